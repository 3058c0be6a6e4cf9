"""Training-step math: soft retrieval, perturbation, and the loss terms.

One training step moves a batch of English queries through four stages:
soft-retrieve pseudo-aligned vectors from the two memory banks, perturb
all four embedding streams onto the unit sphere, project through the
heads, then combine a symmetric InfoNCE loss on the same-query pair, a
symmetric InfoNCE loss on the retrieved pseudo-pair, and an
attractive-only squared-distance term:

    L = L_text + L_pseudo + lambda * L_intra

Every similarity is a true cosine (inputs are renormalized in float64
internally), so the gradients returned here are exact for off-sphere
perturbations as well — finite differences check out without assuming
unit inputs.
"""

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .bank import EmbeddingBank
from .numerics import Rng, gaussian, unit_rows

DEFAULT_TAU = 0.01  # shared temperature for retrieval and InfoNCE
DEFAULT_SIGMA_SQ = 0.004  # perturbation noise variance per coordinate


@dataclass
class LossConfig:
    tau_retrieval: float = DEFAULT_TAU
    tau_nce: float = DEFAULT_TAU
    sigma: float = math.sqrt(DEFAULT_SIGMA_SQ)
    lambda_intra: float = 1.0
    use_text: bool = True
    use_pseudo: bool = True
    use_intra: bool = True
    use_perturbation: bool = True

    def __post_init__(self):
        if self.tau_retrieval <= 0 or self.tau_nce <= 0:
            raise ValueError("temperatures must be > 0")
        if self.sigma < 0:
            raise ValueError("sigma must be >= 0")
        if self.lambda_intra < 0:
            raise ValueError("lambda_intra must be >= 0")


@dataclass
class AlignedQuad:
    """Batch of per-query quadruples flowing through one training step.

    Rows are queries.  e_c/e_m are the English query embeddings in the
    two encoder spaces, v_c/m_m the soft-retrieved bank vectors; tilde
    fields are the perturbed unit vectors, hat fields the projected
    unit vectors in the shared space.
    """

    e_c: np.ndarray
    e_m: np.ndarray
    v_c: np.ndarray
    m_m: np.ndarray
    e_c_tilde: Optional[np.ndarray] = None
    e_m_tilde: Optional[np.ndarray] = None
    v_c_tilde: Optional[np.ndarray] = None
    m_m_tilde: Optional[np.ndarray] = None
    e_c_hat: Optional[np.ndarray] = None
    e_m_hat: Optional[np.ndarray] = None
    v_c_hat: Optional[np.ndarray] = None
    m_m_hat: Optional[np.ndarray] = None


@dataclass
class LossParts:
    l_text: float = 0.0
    l_pseudo: float = 0.0
    l_intra: float = 0.0


@dataclass
class LossGrads:
    """d(total loss) w.r.t. the four projected batches."""

    d_e_c: np.ndarray
    d_e_m: np.ndarray
    d_v_c: np.ndarray
    d_m_m: np.ndarray


class BankRetriever:
    """Soft retrieval against one bank with the row-normalization hoisted.

    Produces bitwise the same output as :func:`soft_retrieve_batch`; the
    only difference is that the float64 copy and the unit rows of the
    bank are computed once instead of per call.
    """

    def __init__(self, bank: EmbeddingBank):
        if bank.rows < 1:
            raise ValueError("empty bank")
        self.dim = bank.dim
        self.rows = bank.data.astype(np.float64)
        self.unit = unit_rows(self.rows)

    def retrieve(self, queries: np.ndarray, tau: float) -> np.ndarray:
        if tau <= 0:
            raise ValueError("tau must be > 0")
        q = np.asarray(queries, dtype=np.float64)
        if q.ndim != 2:
            raise ValueError("queries must be 2-D")
        if q.shape[1] != self.dim:
            raise ValueError(f"dim mismatch: query dim {q.shape[1]}, bank dim {self.dim}")
        sims = unit_rows(q) @ self.unit.T  # B x K cosine matrix
        logits = sims / tau
        logits -= logits.max(axis=1, keepdims=True)
        w = np.exp(logits)
        w /= w.sum(axis=1, keepdims=True)
        return w @ self.rows


def soft_retrieve_batch(queries: np.ndarray, bank: EmbeddingBank, tau: float) -> np.ndarray:
    """Softmax-weighted average of bank rows per query.

    Weights are a temperature-scaled softmax over cosine similarity to
    every bank row; the average is taken over the raw (stored) rows.
    """
    return BankRetriever(bank).retrieve(queries, tau)


def soft_retrieve(query: np.ndarray, bank: EmbeddingBank, tau: float, return_weights: bool = False):
    """Single-query soft retrieval; optionally also return the weights."""
    q = np.asarray(query, dtype=np.float64)
    if q.ndim != 1:
        raise ValueError("query must be 1-D")
    out = soft_retrieve_batch(q[None, :], bank, tau)[0]
    if not return_weights:
        return out
    sims = unit_rows(bank.data.astype(np.float64)) @ (q / np.linalg.norm(q))
    logits = sims / tau
    logits -= logits.max()
    w = np.exp(logits)
    w /= w.sum()
    return out, w


def perturb(v: np.ndarray, sigma: float, rng: Rng) -> np.ndarray:
    """Norm(v + eps), eps ~ N(0, sigma^2 I); retries the measure-zero zero-norm case."""
    v = np.asarray(v, dtype=np.float64)
    for _ in range(3):
        w = v + gaussian(rng, v.shape[-1], sigma)
        norm = np.linalg.norm(w)
        if norm > 1e-12:
            return w / norm
    raise ValueError("perturbation produced a zero-norm vector 3 times")


def perturb_batch(x: np.ndarray, sigma: float, rng: Rng) -> np.ndarray:
    """Row-wise perturb; noise drawn row-major so the stream is shape-stable."""
    x = np.asarray(x, dtype=np.float64)
    noise = gaussian(rng, x.size, sigma).reshape(x.shape)
    w = x + noise
    norms = np.linalg.norm(w, axis=-1, keepdims=True)
    flat = norms.ravel()
    for i in np.nonzero(flat <= 1e-12)[0]:
        w[i] = perturb(x[i], sigma, rng) if sigma > 0 else x[i]
        flat[i] = np.linalg.norm(w[i])
        if flat[i] <= 1e-12:
            raise ValueError(f"zero-norm row {i} cannot be normalized")
    return w / norms


def _nce_forward(q, k, tau):
    """Shared InfoNCE plumbing: unit rows, cosine matrix, row softmax."""
    q = np.asarray(q, dtype=np.float64)
    k = np.asarray(k, dtype=np.float64)
    if q.shape != k.shape or q.ndim != 2 or q.shape[0] < 1:
        raise ValueError(f"shape mismatch: {q.shape} vs {k.shape}")
    qn = np.linalg.norm(q, axis=1, keepdims=True)
    kn = np.linalg.norm(k, axis=1, keepdims=True)
    if np.any(qn <= 1e-12) or np.any(kn <= 1e-12):
        raise ValueError("zero-norm row in InfoNCE input")
    u = q / qn
    w = k / kn
    sims = u @ w.T
    logits = sims / tau
    shift = logits.max(axis=1, keepdims=True)
    exp = np.exp(logits - shift)
    denom = exp.sum(axis=1, keepdims=True)
    p = exp / denom
    b = q.shape[0]
    log_probs = (logits - shift) - np.log(denom)
    loss = -float(np.trace(log_probs)) / b
    return loss, u, w, qn, kn, p


def info_nce(q: np.ndarray, k: np.ndarray, tau: float) -> float:
    """Mean over rows of -log softmax_j(sim(q_i, k_j)/tau) at j = i."""
    loss, *_ = _nce_forward(q, k, tau)
    return loss


def info_nce_with_grads(q: np.ndarray, k: np.ndarray, tau: float):
    """InfoNCE loss plus exact gradients w.r.t. q and k (cosine Jacobian included)."""
    loss, u, w, qn, kn, p = _nce_forward(q, k, tau)
    b = q.shape[0]
    ds = (p - np.eye(b)) / (b * tau)
    du = ds @ w
    dw = ds.T @ u
    dq = (du - np.sum(du * u, axis=1, keepdims=True) * u) / qn
    dk = (dw - np.sum(dw * w, axis=1, keepdims=True) * w) / kn
    return loss, dq, dk


def symmetric_nce(a: np.ndarray, b: np.ndarray, tau: float) -> float:
    """0.5 * [info_nce(a, b) + info_nce(b, a)]; softmax is asymmetric, this is not."""
    return 0.5 * (info_nce(a, b, tau) + info_nce(b, a, tau))


def symmetric_nce_with_grads(a: np.ndarray, b: np.ndarray, tau: float):
    l_ab, da1, db1 = info_nce_with_grads(a, b, tau)
    l_ba, db2, da2 = info_nce_with_grads(b, a, tau)
    return 0.5 * (l_ab + l_ba), 0.5 * (da1 + da2), 0.5 * (db1 + db2)


def intra_loss(e_c_hat, v_c_hat, e_m_hat, m_m_hat) -> float:
    """Attractive-only term: mean squared distance inside each encoder family."""
    loss, _ = intra_loss_with_grads(e_c_hat, v_c_hat, e_m_hat, m_m_hat)
    return loss


def intra_loss_with_grads(e_c_hat, v_c_hat, e_m_hat, m_m_hat):
    ec = np.asarray(e_c_hat, dtype=np.float64)
    vc = np.asarray(v_c_hat, dtype=np.float64)
    em = np.asarray(e_m_hat, dtype=np.float64)
    mm = np.asarray(m_m_hat, dtype=np.float64)
    if ec.shape != vc.shape or em.shape != mm.shape or ec.shape[0] != em.shape[0]:
        raise ValueError("shape mismatch in intra_loss inputs")
    b = ec.shape[0]
    if b < 1:
        raise ValueError("empty batch")
    dc = ec - vc
    dm = em - mm
    loss = float(np.sum(dc * dc) + np.sum(dm * dm)) / (2.0 * b)
    return loss, (dc / b, -dc / b, dm / b, -dm / b)


def total_loss(quad: AlignedQuad, cfg: LossConfig):
    """Combined objective over a projected batch.

    Returns (loss, LossGrads, LossParts); disabled terms contribute
    exactly zero to both the value and every gradient.
    """
    ec, em = quad.e_c_hat, quad.e_m_hat
    vc, mm = quad.v_c_hat, quad.m_m_hat
    if any(t is None for t in (ec, em, vc, mm)):
        raise ValueError("total_loss requires projected (hat) fields on the quad")
    b = ec.shape[0]
    if b < 2 and (cfg.use_text or cfg.use_pseudo):
        raise ValueError("contrastive terms need batch size >= 2 (negatives)")

    parts = LossParts()
    d_ec = np.zeros_like(np.asarray(ec, dtype=np.float64))
    d_em = np.zeros_like(np.asarray(em, dtype=np.float64))
    d_vc = np.zeros_like(np.asarray(vc, dtype=np.float64))
    d_mm = np.zeros_like(np.asarray(mm, dtype=np.float64))

    loss = 0.0
    if cfg.use_text:
        l_text, g_ec, g_em = symmetric_nce_with_grads(ec, em, cfg.tau_nce)
        parts.l_text = l_text
        loss += l_text
        d_ec += g_ec
        d_em += g_em
    if cfg.use_pseudo:
        l_pseudo, g_vc, g_mm = symmetric_nce_with_grads(vc, mm, cfg.tau_nce)
        parts.l_pseudo = l_pseudo
        loss += l_pseudo
        d_vc += g_vc
        d_mm += g_mm
    if cfg.use_intra:
        l_intra, (g_ec, g_vc, g_em, g_mm) = intra_loss_with_grads(ec, vc, em, mm)
        parts.l_intra = l_intra
        loss += cfg.lambda_intra * l_intra
        d_ec += cfg.lambda_intra * g_ec
        d_vc += cfg.lambda_intra * g_vc
        d_em += cfg.lambda_intra * g_em
        d_mm += cfg.lambda_intra * g_mm

    return loss, LossGrads(d_e_c=d_ec, d_e_m=d_em, d_v_c=d_vc, d_m_m=d_mm), parts
