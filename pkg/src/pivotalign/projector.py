"""Trainable projection heads: Linear -> BatchNorm1D -> ReLU -> Linear.

The image/CLIP-space head maps 512 -> 1024 -> 512 and the multilingual
head maps 768 -> 1536 -> 512 by default; any (in, hidden, out) shape is
supported.  Outputs are l2-normalized, and the manual backward pass
includes both the batch-statistics BN Jacobian and the normalization
Jacobian, so gradients are exact for the cached forward computation.

Parameters and running statistics are stored as float32; all arithmetic
runs in float64.

UPC1 checkpoint layout: magic "UPC1", uint32 little-endian JSON length,
a JSON header {version, in_dim, hidden_dim, out_dim, mode}, then raw
little-endian float32 blobs in fixed order W1, b1, bn_gamma, bn_beta,
bn_running_mean, bn_running_var, W2, b2.
"""

import json
import struct
from dataclasses import dataclass

import numpy as np

from .numerics import Rng

BN_EPS = 1e-5
BN_MOMENTUM = 0.1

CKPT_MAGIC = b"UPC1"
CKPT_VERSION = 1
_FIELD_ORDER = ("W1", "b1", "bn_gamma", "bn_beta", "bn_running_mean", "bn_running_var", "W2", "b2")
_TRAINABLE = ("W1", "b1", "bn_gamma", "bn_beta", "W2", "b2")


class CheckpointError(ValueError):
    """Raised for malformed or mismatched checkpoint files."""


@dataclass
class ProjectionHead:
    in_dim: int
    hidden_dim: int
    out_dim: int
    W1: np.ndarray  # hidden x in
    b1: np.ndarray
    bn_gamma: np.ndarray
    bn_beta: np.ndarray
    bn_running_mean: np.ndarray
    bn_running_var: np.ndarray
    W2: np.ndarray  # out x hidden
    b2: np.ndarray
    mode: str = "training"

    @property
    def n_params(self) -> int:
        """Trainable parameter count: W1 + b1 + gamma + beta + W2 + b2."""
        return (
            self.in_dim * self.hidden_dim
            + self.hidden_dim
            + 2 * self.hidden_dim
            + self.hidden_dim * self.out_dim
            + self.out_dim
        )


@dataclass
class HeadGradients:
    """Gradients mirroring the trainable fields of a head."""

    W1: np.ndarray
    b1: np.ndarray
    bn_gamma: np.ndarray
    bn_beta: np.ndarray
    W2: np.ndarray
    b2: np.ndarray

    def as_dict(self) -> dict:
        return {name: getattr(self, name) for name in _TRAINABLE}

    def add(self, other: "HeadGradients") -> "HeadGradients":
        return HeadGradients(**{n: getattr(self, n) + getattr(other, n) for n in _TRAINABLE})


@dataclass
class ForwardCache:
    mode: str
    x: np.ndarray
    xhat: np.ndarray
    inv_std: np.ndarray
    gamma: np.ndarray
    relu_mask: np.ndarray
    a: np.ndarray
    W2: np.ndarray
    y: np.ndarray
    z2_norms: np.ndarray


def trainable_params(head: ProjectionHead) -> dict:
    """Live references to the trainable arrays, in fixed order."""
    return {name: getattr(head, name) for name in _TRAINABLE}


def init_head(in_dim: int, hidden_dim: int, out_dim: int, rng: Rng) -> ProjectionHead:
    """Fresh head: weights uniform in +-1/sqrt(fan_in), biases 0, BN identity."""
    if min(in_dim, hidden_dim, out_dim) < 1:
        raise ValueError(f"dims must be >= 1, got ({in_dim}, {hidden_dim}, {out_dim})")

    def uniform_pm(n, bound):
        return ((rng.uniform(n) * 2.0 - 1.0) * bound).astype(np.float32)

    w1 = uniform_pm(hidden_dim * in_dim, 1.0 / np.sqrt(in_dim)).reshape(hidden_dim, in_dim)
    w2 = uniform_pm(out_dim * hidden_dim, 1.0 / np.sqrt(hidden_dim)).reshape(out_dim, hidden_dim)
    return ProjectionHead(
        in_dim=in_dim,
        hidden_dim=hidden_dim,
        out_dim=out_dim,
        W1=w1,
        b1=np.zeros(hidden_dim, dtype=np.float32),
        bn_gamma=np.ones(hidden_dim, dtype=np.float32),
        bn_beta=np.zeros(hidden_dim, dtype=np.float32),
        bn_running_mean=np.zeros(hidden_dim, dtype=np.float32),
        bn_running_var=np.ones(hidden_dim, dtype=np.float32),
        W2=w2,
        b2=np.zeros(out_dim, dtype=np.float32),
        mode="training",
    )


def forward(head: ProjectionHead, batch: np.ndarray):
    """Run the head on a B x in_dim batch.

    Training mode normalizes with biased batch statistics (eps 1e-5) and
    updates the running stats with momentum 0.1; inference mode uses the
    stored running stats and mutates nothing.  Output rows are unit-norm.

    Returns (output B x out_dim float64, ForwardCache).
    """
    x = np.asarray(batch, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 1:
        raise ValueError(f"batch must be 2-D and nonempty, got shape {x.shape}")
    if x.shape[1] != head.in_dim:
        raise ValueError(f"dim mismatch: batch has {x.shape[1]}, head expects {head.in_dim}")
    training = head.mode == "training"
    if training and x.shape[0] < 2:
        raise ValueError("training-mode batch normalization requires batch size >= 2")

    w1 = head.W1.astype(np.float64)
    w2 = head.W2.astype(np.float64)
    gamma = head.bn_gamma.astype(np.float64)
    beta = head.bn_beta.astype(np.float64)

    z1 = x @ w1.T + head.b1.astype(np.float64)
    if training:
        mean = z1.mean(axis=0)
        var = z1.var(axis=0)  # biased
        inv_std = 1.0 / np.sqrt(var + BN_EPS)
        xhat = (z1 - mean) * inv_std
        head.bn_running_mean[:] = ((1.0 - BN_MOMENTUM) * head.bn_running_mean.astype(np.float64)
                                   + BN_MOMENTUM * mean).astype(np.float32)
        head.bn_running_var[:] = ((1.0 - BN_MOMENTUM) * head.bn_running_var.astype(np.float64)
                                  + BN_MOMENTUM * var).astype(np.float32)
    else:
        inv_std = 1.0 / np.sqrt(head.bn_running_var.astype(np.float64) + BN_EPS)
        xhat = (z1 - head.bn_running_mean.astype(np.float64)) * inv_std

    h = gamma * xhat + beta
    relu_mask = h > 0
    a = np.where(relu_mask, h, 0.0)
    z2 = a @ w2.T + head.b2.astype(np.float64)

    norms = np.linalg.norm(z2, axis=1)
    if np.any(norms <= 1e-12):
        raise ValueError(f"zero-norm projector output at row {int(np.argmin(norms))}")
    y = z2 / norms[:, None]
    cache = ForwardCache(
        mode=head.mode, x=x, xhat=xhat, inv_std=inv_std, gamma=gamma,
        relu_mask=relu_mask, a=a, W2=w2, y=y, z2_norms=norms,
    )
    return y, cache


def backward(head: ProjectionHead, cache: ForwardCache, upstream_grad: np.ndarray):
    """Exact gradients of the cached training-mode forward pass.

    Returns (HeadGradients, input gradient B x in_dim).
    """
    if cache.mode != "training":
        raise ValueError("backward requires a training-mode forward cache")
    g = np.asarray(upstream_grad, dtype=np.float64)
    if g.shape != cache.y.shape:
        raise ValueError(f"upstream grad shape {g.shape} != output shape {cache.y.shape}")

    # l2 normalization: y = z2 / |z2|  =>  dz2 = (g - (g.y) y) / |z2|
    dots = np.sum(g * cache.y, axis=1, keepdims=True)
    dz2 = (g - dots * cache.y) / cache.z2_norms[:, None]

    dW2 = dz2.T @ cache.a
    db2 = dz2.sum(axis=0)
    da = dz2 @ cache.W2

    dh = np.where(cache.relu_mask, da, 0.0)

    dgamma = np.sum(dh * cache.xhat, axis=0)
    dbeta = dh.sum(axis=0)

    # BN with batch statistics: mean and var both depend on every row.
    dxhat = dh * cache.gamma
    n = cache.x.shape[0]
    dz1 = (cache.inv_std / n) * (
        n * dxhat - dxhat.sum(axis=0) - cache.xhat * np.sum(dxhat * cache.xhat, axis=0)
    )

    dW1 = dz1.T @ cache.x
    db1 = dz1.sum(axis=0)
    dx = dz1 @ (head.W1.astype(np.float64))

    grads = HeadGradients(W1=dW1, b1=db1, bn_gamma=dgamma, bn_beta=dbeta, W2=dW2, b2=db2)
    return grads, dx


def save_head(head: ProjectionHead, path) -> None:
    """Write a UPC1 checkpoint; float32 fields roundtrip bit-exactly."""
    meta = {
        "version": CKPT_VERSION,
        "in_dim": head.in_dim,
        "hidden_dim": head.hidden_dim,
        "out_dim": head.out_dim,
        "mode": head.mode,
    }
    blob = json.dumps(meta, sort_keys=True).encode("utf-8")
    with open(str(path), "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        for name in _FIELD_ORDER:
            fh.write(getattr(head, name).astype("<f4", copy=False).tobytes(order="C"))


def _field_shapes(in_dim, hidden_dim, out_dim):
    return {
        "W1": (hidden_dim, in_dim),
        "b1": (hidden_dim,),
        "bn_gamma": (hidden_dim,),
        "bn_beta": (hidden_dim,),
        "bn_running_mean": (hidden_dim,),
        "bn_running_var": (hidden_dim,),
        "W2": (out_dim, hidden_dim),
        "b2": (out_dim,),
    }


def load_head(path, expect_dims=None) -> ProjectionHead:
    """Read a UPC1 checkpoint.

    expect_dims, when given as (in_dim, hidden_dim, out_dim), rejects a
    checkpoint of any other shape.
    """
    path = str(path)
    try:
        with open(path, "rb") as fh:
            raw = fh.read()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc

    if len(raw) < 8 or raw[:4] != CKPT_MAGIC:
        raise CheckpointError(f"not a UPC1 file: {path}")
    (json_len,) = struct.unpack_from("<I", raw, 4)
    if len(raw) < 8 + json_len:
        raise CheckpointError(f"corrupt checkpoint {path}: truncated header")
    try:
        meta = json.loads(raw[8 : 8 + json_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"corrupt checkpoint {path}: bad header: {exc}") from exc
    if meta.get("version") != CKPT_VERSION:
        raise CheckpointError(f"unsupported version {meta.get('version')} in {path}")

    try:
        in_dim, hidden_dim, out_dim = (int(meta[k]) for k in ("in_dim", "hidden_dim", "out_dim"))
        mode = str(meta["mode"])
    except (KeyError, TypeError, ValueError) as exc:
        raise CheckpointError(f"corrupt checkpoint {path}: incomplete header") from exc
    if mode not in ("training", "inference"):
        raise CheckpointError(f"corrupt checkpoint {path}: bad mode {mode!r}")
    if expect_dims is not None and tuple(expect_dims) != (in_dim, hidden_dim, out_dim):
        raise CheckpointError(
            f"shape mismatch in {path}: expected {tuple(expect_dims)}, "
            f"found ({in_dim}, {hidden_dim}, {out_dim})"
        )

    shapes = _field_shapes(in_dim, hidden_dim, out_dim)
    total = sum(int(np.prod(s)) for s in shapes.values())
    body = raw[8 + json_len :]
    if len(body) != total * 4:
        raise CheckpointError(
            f"corrupt checkpoint {path}: expected {total * 4} payload bytes, found {len(body)}"
        )
    fields = {}
    offset = 0
    for name in _FIELD_ORDER:
        shape = shapes[name]
        count = int(np.prod(shape))
        arr = np.frombuffer(body, dtype="<f4", count=count, offset=offset).reshape(shape).copy()
        fields[name] = arr
        offset += count * 4
    if np.any(fields["bn_running_var"] < 0):
        raise CheckpointError(f"corrupt checkpoint {path}: negative running variance")
    return ProjectionHead(in_dim=in_dim, hidden_dim=hidden_dim, out_dim=out_dim, mode=mode, **fields)
