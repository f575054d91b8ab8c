"""Self-supervised training objective on fused features and attention rows.

For every query patch, the K_p strongest and K_n weakest keys per frame
(by attention weight) act as positives and negatives. Two hinge losses
push positive distances below negative distances by a margin: one in
feature space (cosine distance on fused features), one in attention space
(symmetric KL between attention rows). Per-patch losses are combined with
entropy-derived weights that favour confident rows.

The gradient treats the mined index sets and the entropy weights as
constants: indices are a discrete selection, and the weights are an
importance estimate rather than a quantity to optimize through.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .correlator import AttentionField
from .numerics import KL_EPS, row_entropy, row_normalize

# Upper bound on scratch elements per chunk when expanding [rows, P, M]
# intermediates; keeps peak memory flat as the attention width grows.
_CHUNK_BUDGET = 1 << 22


@dataclass(frozen=True)
class IndexSets:
    """Mined key indices per query row: [N, T, K] global token indices,
    positives in descending and negatives in ascending attention order."""

    positives: np.ndarray
    negatives: np.ndarray

    @property
    def flat_positives(self) -> np.ndarray:
        return self.positives.reshape(self.positives.shape[0], -1)

    @property
    def flat_negatives(self) -> np.ndarray:
        return self.negatives.reshape(self.negatives.shape[0], -1)


@dataclass(frozen=True)
class LossBreakdown:
    semantic: np.ndarray  # [N]
    motion: np.ndarray  # [N]
    entropy: np.ndarray  # [N]
    weights: np.ndarray  # [N]
    pos_feature_dist: np.ndarray  # [N, T*K_p]
    neg_feature_dist: np.ndarray  # [N, T*K_n]
    pos_attention_dist: np.ndarray  # [N, T*K_p]
    neg_attention_dist: np.ndarray  # [N, T*K_n]
    total: float


def sample_index_sets(attention: AttentionField, k_p: int, k_n: int) -> IndexSets:
    """Pick per-frame top-k_p / bottom-k_n key indices for every query row.

    Requires self-attention (keys cover the query frames). Taking both
    sets from the two ends of a single descending sort keeps them disjoint
    whenever k_p + k_n <= H*W, ties included; the stable sort breaks ties
    by key position, so the selection is deterministic.
    """
    if attention.n_key != attention.n_query:
        raise ValueError("index mining needs self-attention (keys = queries)")
    hw = attention.hw
    t = attention.n_key_frames
    if k_p < 1 or k_n < 1:
        raise ValueError("k_p and k_n must be positive")
    if k_p + k_n > hw:
        raise ValueError(f"k_p + k_n = {k_p + k_n} exceeds patches per frame ({hw})")
    scores = attention.rows.reshape(attention.n_query, t, hw)
    order = np.argsort(-scores, axis=2, kind="stable")
    offsets = (np.arange(t, dtype=np.int64) * hw)[None, :, None]
    positives = order[:, :, :k_p].astype(np.int64) + offsets
    negatives = order[:, :, ::-1][:, :, :k_n].astype(np.int64) + offsets
    return IndexSets(positives=positives, negatives=negatives)


def _hinge_row_sums(pos: np.ndarray, neg: np.ndarray, margin: float) -> np.ndarray:
    """l[i] = sum_{j,k} max(pos[i,j] - neg[i,k] + margin, 0), chunked."""
    n, p = pos.shape
    step = max(1, _CHUNK_BUDGET // max(1, p * neg.shape[1]))
    out = np.empty(n)
    for lo in range(0, n, step):
        hi = min(n, lo + step)
        diff = pos[lo:hi, :, None] - neg[lo:hi, None, :] + margin
        np.maximum(diff, 0.0, out=diff)
        out[lo:hi] = diff.sum(axis=(1, 2))
    return out


def semantic_loss(
    fused: np.ndarray, sets: IndexSets, margin: float
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Per-row feature-space hinge loss; returns (loss, pos_dist, neg_dist)."""
    unit, _ = row_normalize(np.asarray(fused, dtype=np.float64))
    pos_d = 1.0 - np.einsum("ic,ijc->ij", unit, unit[sets.flat_positives])
    neg_d = 1.0 - np.einsum("ic,ijc->ij", unit, unit[sets.flat_negatives])
    return _hinge_row_sums(pos_d, neg_d, margin), pos_d, neg_d


def _attention_reps(rows: np.ndarray, eps: float):
    clamped = np.maximum(np.asarray(rows, dtype=np.float64), eps)
    logs = np.log(clamped)
    self_terms = np.einsum("ij,ij->i", clamped, logs)
    return clamped, logs, self_terms


def _gathered_sym_kl(clamped, logs, self_terms, idx):
    # D(x_i, x_j) expanded so the gathers stay [rows, K, M] per chunk.
    n = clamped.shape[0]
    k = idx.shape[1]
    m = clamped.shape[1]
    step = max(1, _CHUNK_BUDGET // max(1, k * m))
    out = np.empty((n, k))
    for lo in range(0, n, step):
        hi = min(n, lo + step)
        sel = idx[lo:hi]
        out[lo:hi] = (
            self_terms[lo:hi, None]
            + self_terms[sel]
            - np.einsum("im,ikm->ik", clamped[lo:hi], logs[sel])
            - np.einsum("im,ikm->ik", logs[lo:hi], clamped[sel])
        )
    np.maximum(out, 0.0, out=out)
    return out


def motion_loss(
    attention: AttentionField, sets: IndexSets, margin: float, eps: float = KL_EPS
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Per-row attention-space hinge loss; returns (loss, pos_div, neg_div)."""
    clamped, logs, self_terms = _attention_reps(attention.rows, eps)
    pos_d = _gathered_sym_kl(clamped, logs, self_terms, sets.flat_positives)
    neg_d = _gathered_sym_kl(clamped, logs, self_terms, sets.flat_negatives)
    return _hinge_row_sums(pos_d, neg_d, margin), pos_d, neg_d


def entropy_weights(attention: AttentionField) -> np.ndarray:
    """Softmax of negated row entropies; low-entropy rows weigh more."""
    return _weights_from_entropy(row_entropy(attention.rows))


def _weights_from_entropy(entropy: np.ndarray) -> np.ndarray:
    neg = -np.asarray(entropy, dtype=np.float64)
    neg -= neg.max()
    w = np.exp(neg)
    w /= w.sum()
    return w


def total_loss(semantic: np.ndarray, motion: np.ndarray, weights: np.ndarray) -> float:
    s = np.asarray(semantic, dtype=np.float64)
    m = np.asarray(motion, dtype=np.float64)
    w = np.asarray(weights, dtype=np.float64)
    if not (s.shape == m.shape == w.shape):
        raise ValueError("loss terms and weights must share one length")
    return float(np.dot(w, s + m))


def compute_objective(
    fused: np.ndarray,
    attention: AttentionField,
    sets: IndexSets,
    margin_semantic: float,
    margin_motion: float,
    weights: np.ndarray | None = None,
) -> LossBreakdown:
    """Evaluate every term. ``weights`` may be pinned (the gradient
    contract) or left None to derive them from the attention entropies."""
    l_s, pos_f, neg_f = semantic_loss(fused, sets, margin_semantic)
    l_m, pos_a, neg_a = motion_loss(attention, sets, margin_motion)
    ent = row_entropy(attention.rows)
    w = _weights_from_entropy(ent) if weights is None else np.asarray(weights, dtype=np.float64)
    return LossBreakdown(
        semantic=l_s,
        motion=l_m,
        entropy=ent,
        weights=w,
        pos_feature_dist=pos_f,
        neg_feature_dist=neg_f,
        pos_attention_dist=pos_a,
        neg_attention_dist=neg_a,
        total=total_loss(l_s, l_m, w),
    )


def objective_backward(
    fused: np.ndarray,
    attention: AttentionField,
    sets: IndexSets,
    margin_semantic: float,
    margin_motion: float,
    weights: np.ndarray,
    eps: float = KL_EPS,
) -> tuple[np.ndarray, np.ndarray]:
    """Exact gradients of the weighted total w.r.t. fused features and
    attention rows, with index sets and weights held fixed.

    The hinge subgradient at exactly zero is taken as zero, matching the
    strict "> 0" activity test below.
    """
    fused = np.asarray(fused, dtype=np.float64)
    rows = np.asarray(attention.rows, dtype=np.float64)
    w = np.asarray(weights, dtype=np.float64)
    n, c = fused.shape
    m = rows.shape[1]
    idx_p = sets.flat_positives
    idx_n = sets.flat_negatives
    kp = idx_p.shape[1]
    kn = idx_n.shape[1]

    unit, norms = row_normalize(fused)
    clamped, logs, self_terms = _attention_reps(rows, eps)
    live = rows > eps  # where the clamp passes the gradient through

    d_fused = np.zeros((n, c))
    d_rows = np.zeros((n, m))

    step = max(1, _CHUNK_BUDGET // max(1, max(kp, kn) * max(c, m)))
    for lo in range(0, n, step):
        hi = min(n, lo + step)
        rows_w = w[lo:hi]
        sel_p = idx_p[lo:hi]
        sel_n = idx_n[lo:hi]

        # Hinge activity counts shared by both losses' chain rules:
        # dL/d pos[i,j] = w[i] * #{k active}, dL/d neg[i,k] = -w[i] * #{j active}.
        def hinge_coefs(pos_d, neg_d, margin):
            active = (pos_d[:, :, None] - neg_d[:, None, :] + margin) > 0.0
            cp = active.sum(axis=2) * rows_w[:, None]
            cn = active.sum(axis=1) * rows_w[:, None]
            return cp, cn

        # Feature-space term. dist = 1 - <u_i, u_j>; with hats unit rows,
        # d dist/d f_i = -(u_j - <u_i,u_j> u_i) / |f_i| and symmetrically.
        up = unit[sel_p]
        un = unit[sel_n]
        ui = unit[lo:hi]
        dot_p = np.einsum("ic,ijc->ij", ui, up)
        dot_n = np.einsum("ic,ijc->ij", ui, un)
        cp, cn = hinge_coefs(1.0 - dot_p, 1.0 - dot_n, margin_semantic)
        inv_i = 1.0 / norms[lo:hi]
        grad_i = -(up - dot_p[..., None] * ui[:, None, :])
        d_fused[lo:hi] += np.einsum("ij,ijc->ic", cp, grad_i) * inv_i[:, None]
        grad_j = -(ui[:, None, :] - dot_p[..., None] * up) / norms[sel_p][..., None]
        np.add.at(d_fused, sel_p.ravel(), (cp[..., None] * grad_j).reshape(-1, c))
        grad_i = -(un - dot_n[..., None] * ui[:, None, :])
        d_fused[lo:hi] -= np.einsum("ik,ikc->ic", cn, grad_i) * inv_i[:, None]
        grad_j = -(ui[:, None, :] - dot_n[..., None] * un) / norms[sel_n][..., None]
        np.add.at(d_fused, sel_n.ravel(), (-cn[..., None] * grad_j).reshape(-1, c))

        # Attention-space term. D(x, y) = sum (x~-y~)(log x~ - log y~);
        # dD/dx = (log x~ - log y~) + (x~-y~)/x~ wherever the clamp is open.
        div_p = _gathered_sym_kl(clamped, logs, self_terms, sel_p)
        div_n = _gathered_sym_kl(clamped, logs, self_terms, sel_n)
        cp, cn = hinge_coefs(div_p, div_n, margin_motion)
        xi = clamped[lo:hi][:, None, :]
        li = logs[lo:hi][:, None, :]
        for sel, coef, sign in ((sel_p, cp, 1.0), (sel_n, cn, -1.0)):
            yj = clamped[sel]
            lj = logs[sel]
            dd_x = (li - lj) + (xi - yj) / xi
            dd_x *= live[lo:hi][:, None, :]
            d_rows[lo:hi] += sign * np.einsum("ij,ijm->im", coef, dd_x)
            dd_y = (lj - li) + (yj - xi) / yj
            dd_y *= live[sel]
            np.add.at(
                d_rows, sel.ravel(), (sign * coef[..., None] * dd_y).reshape(-1, m)
            )
    return d_fused, d_rows
