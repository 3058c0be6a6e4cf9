"""Full training loop over frozen embedding banks.

Encoders never appear here: their outputs arrive as immutable banks, and
the only mutable state is the two projection heads plus AdamW moments.
Per step: sample a query batch, soft-retrieve pseudo-pairs from the two
memory banks, perturb, run both heads on their two input streams, apply
the combined loss, and take one decoupled-weight-decay Adam step under a
per-step linear learning-rate decay.

English queries are the only supervision; target-language text exists
solely inside the frozen multilingual memory bank.
"""

import json
import time
from dataclasses import dataclass, field, asdict

import numpy as np

from . import alignment, projector
from .alignment import AlignedQuad, LossConfig
from .bank import EmbeddingBank, l2_normalize_bank
from .numerics import Rng

DEFAULT_OUT_DIM = 512
HIDDEN_FACTOR = 2  # hidden layer is twice the input width


class NumericalError(RuntimeError):
    """Training hit a non-finite loss or gradient."""


@dataclass
class TrainConfig:
    loss: LossConfig = field(default_factory=LossConfig)
    epochs: int = 5
    batch_size: int = 2048
    lr: float = 1e-3
    weight_decay: float = 0.01
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    out_dim: int = DEFAULT_OUT_DIM
    seed: int = 0
    deterministic: bool = False

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 2:
            raise ValueError(f"batch_size must be >= 2, got {self.batch_size}")
        if self.lr <= 0:
            raise ValueError(f"lr must be > 0, got {self.lr}")


@dataclass
class OptimizerState:
    """Per-parameter AdamW moments and the shared step counter."""

    m: dict
    v: dict
    t: int = 0

    @classmethod
    def for_params(cls, params: dict) -> "OptimizerState":
        return cls(
            m={k: np.zeros(p.shape, dtype=np.float64) for k, p in params.items()},
            v={k: np.zeros(p.shape, dtype=np.float64) for k, p in params.items()},
        )


@dataclass
class TrainingLog:
    records: list = field(default_factory=list)

    def append(self, **record):
        self.records.append(record)

    def write_ndjson(self, path) -> None:
        with open(str(path), "w", encoding="utf-8") as fh:
            for rec in self.records:
                fh.write(json.dumps(rec, sort_keys=True))
                fh.write("\n")


def lr_at(step: int, total_steps: int, base_lr: float) -> float:
    """Per-step linear decay: base_lr * (1 - step/total_steps)."""
    if total_steps == 0:
        raise ValueError("total_steps must be > 0")
    if not 0 <= step < total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps})")
    return base_lr * (1.0 - step / total_steps)


def adamw_step(params: dict, grads: dict, state: OptimizerState, lr: float, cfg: TrainConfig) -> None:
    """One decoupled-weight-decay Adam update, in place.

    m and v accumulate in float64; parameters are written back in their
    own (float32) storage dtype.
    """
    state.t += 1
    b1, b2, eps = cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps
    bias1 = 1.0 - b1**state.t
    bias2 = 1.0 - b2**state.t
    for name, theta in params.items():
        g = np.asarray(grads[name], dtype=np.float64)
        if g.shape != theta.shape:
            raise ValueError(f"gradient shape {g.shape} != parameter shape {theta.shape} for {name}")
        if not np.all(np.isfinite(g)):
            raise NumericalError(f"non-finite gradient in {name} at optimizer step {state.t}")
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        m_hat = m / bias1
        v_hat = v / bias2
        theta64 = theta.astype(np.float64)
        theta64 -= lr * (m_hat / (np.sqrt(v_hat) + eps) + cfg.weight_decay * theta64)
        theta[...] = theta64.astype(theta.dtype)


def _epoch_batches(rows: int, batch_size: int, rng: Rng):
    """Seeded shuffle, fixed-size chunks; a trailing chunk below 2 rows is dropped."""
    order = rng.shuffled(rows)
    for start in range(0, rows, batch_size):
        chunk = order[start : start + batch_size]
        if chunk.size >= 2:
            yield chunk


def steps_per_epoch(rows: int, batch_size: int) -> int:
    full, rem = divmod(rows, batch_size)
    return full + (1 if rem >= 2 else 0)


def train(
    queries_c: EmbeddingBank,
    queries_m: EmbeddingBank,
    image_bank: EmbeddingBank,
    multiling_bank: EmbeddingBank,
    cfg: TrainConfig,
):
    """Train both heads; returns (f_c, f_m, TrainingLog).

    Row i of queries_c and queries_m must embed the same English
    sentence in the two encoder spaces — the only pairing the method
    uses.  Banks are read-only throughout.  Heads come back in
    inference mode with frozen running statistics.
    """
    if queries_c.rows != queries_m.rows:
        raise ValueError(
            f"query banks must pair row-for-row: {queries_c.rows} vs {queries_m.rows}"
        )
    if queries_c.dim != image_bank.dim:
        raise ValueError(
            f"dim mismatch: queries_c dim {queries_c.dim}, image bank dim {image_bank.dim}"
        )
    if queries_m.dim != multiling_bank.dim:
        raise ValueError(
            f"dim mismatch: queries_m dim {queries_m.dim}, multilingual bank dim {multiling_bank.dim}"
        )

    rows = queries_c.rows
    batch_size = min(cfg.batch_size, rows)
    if batch_size < 2:
        raise ValueError("need at least 2 query rows to train")

    # Queries are l2-normalized at ingestion; bank rows are used as stored.
    q_c = l2_normalize_bank(queries_c).data.astype(np.float64)
    q_m = l2_normalize_bank(queries_m).data.astype(np.float64)

    root = Rng(cfg.seed)
    f_c = projector.init_head(queries_c.dim, HIDDEN_FACTOR * queries_c.dim, cfg.out_dim, root.spawn(0))
    f_m = projector.init_head(queries_m.dim, HIDDEN_FACTOR * queries_m.dim, cfg.out_dim, root.spawn(1))
    rng_shuffle = root.spawn(2)
    rng_noise = root.spawn(3)

    opt_c = OptimizerState.for_params(projector.trainable_params(f_c))
    opt_m = OptimizerState.for_params(projector.trainable_params(f_m))

    image_memory = alignment.BankRetriever(image_bank)
    multiling_memory = alignment.BankRetriever(multiling_bank)

    per_epoch = steps_per_epoch(rows, batch_size)
    total_steps = cfg.epochs * per_epoch
    sigma = cfg.loss.sigma if cfg.loss.use_perturbation else 0.0

    log = TrainingLog()
    step = 0
    for epoch in range(cfg.epochs):
        for idx in _epoch_batches(rows, batch_size, rng_shuffle):
            t0 = time.perf_counter()
            lr = lr_at(step, total_steps, cfg.lr)

            e_c = q_c[idx]
            e_m = q_m[idx]
            v_c = image_memory.retrieve(e_c, cfg.loss.tau_retrieval)
            m_m = multiling_memory.retrieve(e_m, cfg.loss.tau_retrieval)

            # Four independent noise draws, fixed order.
            quad = AlignedQuad(e_c=e_c, e_m=e_m, v_c=v_c, m_m=m_m)
            quad.e_c_tilde = alignment.perturb_batch(e_c, sigma, rng_noise)
            quad.e_m_tilde = alignment.perturb_batch(e_m, sigma, rng_noise)
            quad.v_c_tilde = alignment.perturb_batch(v_c, sigma, rng_noise)
            quad.m_m_tilde = alignment.perturb_batch(m_m, sigma, rng_noise)

            quad.e_c_hat, cache_ec = projector.forward(f_c, quad.e_c_tilde)
            quad.v_c_hat, cache_vc = projector.forward(f_c, quad.v_c_tilde)
            quad.e_m_hat, cache_em = projector.forward(f_m, quad.e_m_tilde)
            quad.m_m_hat, cache_mm = projector.forward(f_m, quad.m_m_tilde)

            loss, grads, parts = alignment.total_loss(quad, cfg.loss)
            if not np.isfinite(loss):
                raise NumericalError(f"non-finite loss {loss} at step {step}")

            g_c, _ = projector.backward(f_c, cache_ec, grads.d_e_c)
            g_c2, _ = projector.backward(f_c, cache_vc, grads.d_v_c)
            g_m, _ = projector.backward(f_m, cache_em, grads.d_e_m)
            g_m2, _ = projector.backward(f_m, cache_mm, grads.d_m_m)

            adamw_step(projector.trainable_params(f_c), g_c.add(g_c2).as_dict(), opt_c, lr, cfg)
            adamw_step(projector.trainable_params(f_m), g_m.add(g_m2).as_dict(), opt_m, lr, cfg)

            # wall_ms would break bit-identical logs, so deterministic runs record 0.
            wall_ms = 0.0 if cfg.deterministic else (time.perf_counter() - t0) * 1e3
            log.append(
                step=step,
                epoch=epoch,
                lr=lr,
                loss=float(loss),
                l_text=parts.l_text,
                l_pseudo=parts.l_pseudo,
                l_intra=parts.l_intra,
                wall_ms=wall_ms,
            )
            step += 1

    f_c.mode = "inference"
    f_m.mode = "inference"
    return f_c, f_m, log


def config_snapshot(cfg: TrainConfig) -> dict:
    """JSON-ready view of a config, for manifests and logs."""
    return asdict(cfg)
