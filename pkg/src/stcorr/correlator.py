"""Single spatio-temporal transformer block over frozen per-frame features.

The block is pre-norm: attention and the feed-forward net each read a
layer-normed copy of their input and add their result back onto the
residual stream. Attention runs jointly over all T*H*W tokens of a clip,
and the exported attention field is the mean over heads, so every row is
a probability distribution over key tokens.

All block arithmetic happens in float64. Feature files store float32;
promotion happens on entry. The backward pass is derived by hand and is
checked against central finite differences in the test suite.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import erf

from . import dataio
from .numerics import softmax_rows

LN_EPS = 1e-5
FFN_RATIO = 4
CHECKPOINT_VERSION = 1

# Logit gain for the identity-initialized block; chosen so attention on
# unit-norm, well-separated features concentrates within a region without
# saturating the softmax.
IDENTITY_LOGIT_SCALE = 3.0


@dataclass(frozen=True)
class FeatureClip:
    """A fixed-stride window of per-frame patch features.

    data has shape [T, H*W, C]; frame_indices are the absolute frame
    positions of the T frames and must be strictly increasing with a
    uniform gap equal to ``stride``.
    """

    data: np.ndarray
    height: int
    width: int
    frame_indices: np.ndarray
    stride: int

    def __post_init__(self):
        data = np.asarray(self.data)
        idx = np.asarray(self.frame_indices, dtype=np.int64)
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "frame_indices", idx)
        if data.ndim != 3:
            raise ValueError(f"clip data must be [T, H*W, C], got shape {data.shape}")
        if self.height < 1 or self.width < 1:
            raise ValueError("grid dimensions must be positive")
        if data.shape[1] != self.height * self.width:
            raise ValueError(
                f"grid {self.height}x{self.width} does not match {data.shape[1]} patches"
            )
        if idx.shape != (data.shape[0],):
            raise ValueError("frame_indices length must equal the frame count")
        if data.shape[0] == 0:
            raise ValueError("clip must contain at least one frame")
        if data.shape[0] > 1:
            gaps = np.diff(idx)
            if np.any(gaps <= 0):
                raise ValueError("frame_indices must be strictly increasing")
            if np.any(gaps != self.stride):
                raise ValueError("frame gaps must all equal the stride")
        if not np.all(np.isfinite(data)):
            raise ValueError("clip features must be finite")

    @property
    def n_frames(self) -> int:
        return self.data.shape[0]

    @property
    def hw(self) -> int:
        return self.data.shape[1]

    @property
    def channels(self) -> int:
        return self.data.shape[2]

    @property
    def n_tokens(self) -> int:
        return self.n_frames * self.hw

    @classmethod
    def from_file(cls, path) -> "FeatureClip":
        data, height, width, idx = dataio.read_features(path)
        stride = int(idx[1] - idx[0]) if len(idx) > 1 else 1
        return cls(data, height, width, idx, stride)


_PARAM_FIELDS = (
    "w_q", "b_q", "w_k", "b_k", "w_v", "b_v", "w_o", "b_o",
    "ln1_gain", "ln1_bias", "ln2_gain", "ln2_bias",
    "w_ff1", "b_ff1", "w_ff2", "b_ff2", "pe",
)


@dataclass
class CorrelatorParams:
    """Weights of the block. Projection matrices are [C, C] with the head
    split taken along columns; pe is a learned temporal embedding, one row
    per clip position, shared by all patches of a frame."""

    n_heads: int
    w_q: np.ndarray
    b_q: np.ndarray
    w_k: np.ndarray
    b_k: np.ndarray
    w_v: np.ndarray
    b_v: np.ndarray
    w_o: np.ndarray
    b_o: np.ndarray
    ln1_gain: np.ndarray
    ln1_bias: np.ndarray
    ln2_gain: np.ndarray
    ln2_bias: np.ndarray
    w_ff1: np.ndarray
    b_ff1: np.ndarray
    w_ff2: np.ndarray
    b_ff2: np.ndarray
    pe: np.ndarray

    def __post_init__(self):
        for name in _PARAM_FIELDS:
            setattr(self, name, np.asarray(getattr(self, name), dtype=np.float64))
        c = self.channels
        hidden = FFN_RATIO * c
        expected = {
            "w_q": (c, c), "b_q": (c,), "w_k": (c, c), "b_k": (c,),
            "w_v": (c, c), "b_v": (c,), "w_o": (c, c), "b_o": (c,),
            "ln1_gain": (c,), "ln1_bias": (c,), "ln2_gain": (c,), "ln2_bias": (c,),
            "w_ff1": (c, hidden), "b_ff1": (hidden,), "w_ff2": (hidden, c), "b_ff2": (c,),
        }
        for name, shape in expected.items():
            if getattr(self, name).shape != shape:
                raise ValueError(f"{name} must have shape {shape}, got {getattr(self, name).shape}")
        if self.pe.ndim != 2 or self.pe.shape[1] != c:
            raise ValueError(f"pe must be [T_max, {c}], got shape {self.pe.shape}")
        if self.n_heads < 1 or c % self.n_heads != 0:
            raise ValueError(f"channels {c} not divisible by {self.n_heads} heads")

    @property
    def channels(self) -> int:
        return self.w_q.shape[0]

    @property
    def t_max(self) -> int:
        return self.pe.shape[0]

    @property
    def head_dim(self) -> int:
        return self.channels // self.n_heads

    @classmethod
    def random(
        cls,
        channels: int,
        n_heads: int = 8,
        t_max: int = 64,
        seed: int = 0,
        std: float = 0.02,
    ) -> "CorrelatorParams":
        """Gaussian projections and temporal embeddings, identity layer norms."""
        rng = np.random.default_rng(seed)
        hidden = FFN_RATIO * channels

        def w(*shape):
            return rng.normal(0.0, std, size=shape)

        return cls(
            n_heads=n_heads,
            w_q=w(channels, channels), b_q=np.zeros(channels),
            w_k=w(channels, channels), b_k=np.zeros(channels),
            w_v=w(channels, channels), b_v=np.zeros(channels),
            w_o=w(channels, channels), b_o=np.zeros(channels),
            ln1_gain=np.ones(channels), ln1_bias=np.zeros(channels),
            ln2_gain=np.ones(channels), ln2_bias=np.zeros(channels),
            w_ff1=w(channels, hidden), b_ff1=np.zeros(hidden),
            w_ff2=w(hidden, channels), b_ff2=np.zeros(channels),
            pe=w(t_max, channels),
        )

    @classmethod
    def identity(
        cls,
        channels: int,
        n_heads: int = 8,
        t_max: int = 64,
        logit_scale: float = IDENTITY_LOGIT_SCALE,
    ) -> "CorrelatorParams":
        """Degenerate untrained mode: attention logits are scaled feature
        similarities (q = scale * ln(x), k = v = ln(x)), the feed-forward
        path is zeroed, and no temporal embedding is added."""
        eye = np.eye(channels)
        hidden = FFN_RATIO * channels
        return cls(
            n_heads=n_heads,
            w_q=logit_scale * eye, b_q=np.zeros(channels),
            w_k=eye.copy(), b_k=np.zeros(channels),
            w_v=eye.copy(), b_v=np.zeros(channels),
            w_o=eye.copy(), b_o=np.zeros(channels),
            ln1_gain=np.ones(channels), ln1_bias=np.zeros(channels),
            ln2_gain=np.ones(channels), ln2_bias=np.zeros(channels),
            w_ff1=np.zeros((channels, hidden)), b_ff1=np.zeros(hidden),
            w_ff2=np.zeros((hidden, channels)), b_ff2=np.zeros(channels),
            pe=np.zeros((t_max, channels)),
        )

    def named_arrays(self) -> dict[str, np.ndarray]:
        return {name: getattr(self, name) for name in _PARAM_FIELDS}

    @classmethod
    def from_arrays(cls, n_heads: int, arrays: dict[str, np.ndarray]) -> "CorrelatorParams":
        return cls(n_heads=n_heads, **{name: arrays[name] for name in _PARAM_FIELDS})

    def zeros_like(self) -> "CorrelatorParams":
        return CorrelatorParams.from_arrays(
            self.n_heads, {k: np.zeros_like(v) for k, v in self.named_arrays().items()}
        )

    def copy(self) -> "CorrelatorParams":
        return CorrelatorParams.from_arrays(
            self.n_heads, {k: v.copy() for k, v in self.named_arrays().items()}
        )


@dataclass(frozen=True)
class AttentionField:
    """Head-averaged attention. rows[i] is a probability distribution over
    the key tokens; key tokens cover ``n_key_frames`` whole frames."""

    rows: np.ndarray
    n_query_frames: int
    n_key_frames: int
    hw: int

    def __post_init__(self):
        rows = np.asarray(self.rows, dtype=np.float64)
        object.__setattr__(self, "rows", rows)
        if rows.ndim != 2:
            raise ValueError("attention rows must be 2-D")
        if rows.shape[0] != self.n_query_frames * self.hw:
            raise ValueError("query count must equal n_query_frames * hw")
        if rows.shape[1] != self.n_key_frames * self.hw:
            raise ValueError("key count must equal n_key_frames * hw")

    @property
    def n_query(self) -> int:
        return self.rows.shape[0]

    @property
    def n_key(self) -> int:
        return self.rows.shape[1]


def _check_compat(clip: FeatureClip, params: CorrelatorParams) -> None:
    if clip.channels != params.channels:
        raise ValueError(f"clip has {clip.channels} channels, params expect {params.channels}")
    if clip.n_frames > params.t_max:
        raise ValueError(
            f"clip length {clip.n_frames} exceeds the positional table ({params.t_max})"
        )


def _embed(clip: FeatureClip, params: CorrelatorParams) -> np.ndarray:
    # x[t*hw + p] = features[t, p] + pe[t]; clip positions index pe, not
    # absolute frame numbers, so a window anywhere in a video embeds alike.
    x = clip.data.astype(np.float64) + params.pe[: clip.n_frames, None, :]
    return x.reshape(clip.n_tokens, clip.channels)


def _layer_norm(x, gain, bias):
    mu = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + LN_EPS)
    xhat = (x - mu) * inv
    return gain * xhat + bias, xhat, inv


def _layer_norm_backward(dy, xhat, inv, gain):
    dgain = np.sum(dy * xhat, axis=0)
    dbias = np.sum(dy, axis=0)
    dxhat = dy * gain
    dx = inv * (
        dxhat
        - dxhat.mean(axis=-1, keepdims=True)
        - xhat * np.mean(dxhat * xhat, axis=-1, keepdims=True)
    )
    return dx, dgain, dbias


def _gelu(u):
    return 0.5 * u * (1.0 + erf(u / math.sqrt(2.0)))


def _gelu_grad(u):
    return 0.5 * (1.0 + erf(u / math.sqrt(2.0))) + u * np.exp(-0.5 * u * u) / math.sqrt(
        2.0 * math.pi
    )


def _attend(h1, params, key_token_idx=None, want_output=True):
    """Shared attention core.

    Returns (head-mean attention, concatenated head outputs or None). The
    full-key path and the restricted-key path run the identical sequence
    of operations when key_token_idx is None, which is what makes
    cross_attention with all frames bit-exact with forward().
    """
    dh = params.head_dim
    scale = 1.0 / math.sqrt(dh)
    q = h1 @ params.w_q + params.b_q
    hk = h1 if key_token_idx is None else h1[key_token_idx]
    k = hk @ params.w_k + params.b_k
    v = hk @ params.w_v + params.b_v if want_output else None
    acc = None
    out = np.empty_like(h1) if want_output else None
    for h in range(params.n_heads):
        sl = slice(h * dh, (h + 1) * dh)
        probs = softmax_rows((q[:, sl] @ k[:, sl].T) * scale)
        if acc is None:
            acc = probs
        else:
            acc += probs
        if want_output:
            out[:, sl] = probs @ v[:, sl]
    acc /= params.n_heads
    return acc, out


def forward(clip: FeatureClip, params: CorrelatorParams) -> tuple[np.ndarray, AttentionField]:
    """Run the block; returns (fused features [T*H*W, C], attention field)."""
    _check_compat(clip, params)
    x = _embed(clip, params)
    h1, _, _ = _layer_norm(x, params.ln1_gain, params.ln1_bias)
    attn, out = _attend(h1, params)
    x2 = x + out @ params.w_o + params.b_o
    h2, _, _ = _layer_norm(x2, params.ln2_gain, params.ln2_bias)
    y = x2 + _gelu(h2 @ params.w_ff1 + params.b_ff1) @ params.w_ff2 + params.b_ff2
    field = AttentionField(attn, clip.n_frames, clip.n_frames, clip.hw)
    return y, field


def cross_attention(
    clip: FeatureClip, key_frames, params: CorrelatorParams
) -> AttentionField:
    """Attention with keys restricted to the given clip frame positions
    (0-based). Rows are normalized over the restricted key set because the
    softmax itself runs over it."""
    _check_compat(clip, params)
    frames = np.asarray(list(key_frames), dtype=np.int64)
    if frames.size == 0:
        raise ValueError("key frame set must be non-empty")
    if np.any(np.diff(frames) <= 0):
        raise ValueError("key frames must be sorted and unique")
    if frames[0] < 0 or frames[-1] >= clip.n_frames:
        raise ValueError("key frames must be positions within the clip")
    x = _embed(clip, params)
    h1, _, _ = _layer_norm(x, params.ln1_gain, params.ln1_bias)
    if frames.size == clip.n_frames:
        token_idx = None  # full key set: take the self-attention path verbatim
    else:
        token_idx = (frames[:, None] * clip.hw + np.arange(clip.hw)[None, :]).reshape(-1)
    attn, _ = _attend(h1, params, key_token_idx=token_idx, want_output=False)
    return AttentionField(attn, clip.n_frames, int(frames.size), clip.hw)


def backward(
    clip: FeatureClip,
    params: CorrelatorParams,
    grad_features: np.ndarray,
    grad_attention: np.ndarray,
) -> CorrelatorParams:
    """Exact parameter gradients of <grad_features, fused> + <grad_attention,
    attention rows>, recomputed from scratch so callers need no cache.

    Stores per-head attention matrices, so it is meant for training-scale
    clips rather than full-video inference.
    """
    _check_compat(clip, params)
    n = clip.n_tokens
    c = params.channels
    gy = np.asarray(grad_features, dtype=np.float64)
    ga = np.asarray(grad_attention, dtype=np.float64)
    if gy.shape != (n, c):
        raise ValueError(f"grad_features must have shape {(n, c)}, got {gy.shape}")
    if ga.shape != (n, n):
        raise ValueError(f"grad_attention must have shape {(n, n)}, got {ga.shape}")

    dh = params.head_dim
    scale = 1.0 / math.sqrt(dh)

    # Recompute the forward pass, keeping what the chain rule needs.
    x = _embed(clip, params)
    h1, xhat1, inv1 = _layer_norm(x, params.ln1_gain, params.ln1_bias)
    q = h1 @ params.w_q + params.b_q
    k = h1 @ params.w_k + params.b_k
    v = h1 @ params.w_v + params.b_v
    probs = []
    out = np.empty_like(h1)
    for h in range(params.n_heads):
        sl = slice(h * dh, (h + 1) * dh)
        p = softmax_rows((q[:, sl] @ k[:, sl].T) * scale)
        probs.append(p)
        out[:, sl] = p @ v[:, sl]
    attn_out = out @ params.w_o + params.b_o
    x2 = x + attn_out
    h2, xhat2, inv2 = _layer_norm(x2, params.ln2_gain, params.ln2_bias)
    u = h2 @ params.w_ff1 + params.b_ff1
    g = _gelu(u)

    # Feed-forward branch: y = x2 + gelu(LN2(x2) @ w1 + b1) @ w2 + b2.
    dx2 = gy.copy()
    dw_ff2 = g.T @ gy
    db_ff2 = gy.sum(axis=0)
    du = (gy @ params.w_ff2.T) * _gelu_grad(u)
    dw_ff1 = h2.T @ du
    db_ff1 = du.sum(axis=0)
    dh2 = du @ params.w_ff1.T
    dx2_ln, dg2, db2 = _layer_norm_backward(dh2, xhat2, inv2, params.ln2_gain)
    dx2 += dx2_ln

    # Attention branch. The head-mean attention also receives an upstream
    # gradient, which splits evenly across heads before the softmax.
    dw_o = out.T @ dx2
    db_o = dx2.sum(axis=0)
    dout = dx2 @ params.w_o.T
    dq = np.empty_like(q)
    dk = np.empty_like(k)
    dv = np.empty_like(v)
    ga_head = ga / params.n_heads
    for h in range(params.n_heads):
        sl = slice(h * dh, (h + 1) * dh)
        p = probs[h]
        dp = dout[:, sl] @ v[:, sl].T + ga_head
        dv[:, sl] = p.T @ dout[:, sl]
        ds = p * (dp - np.sum(dp * p, axis=-1, keepdims=True))
        dq[:, sl] = (ds @ k[:, sl]) * scale
        dk[:, sl] = (ds.T @ q[:, sl]) * scale
    dw_q = h1.T @ dq
    db_q = dq.sum(axis=0)
    dw_k = h1.T @ dk
    db_k = dk.sum(axis=0)
    dw_v = h1.T @ dv
    db_v = dv.sum(axis=0)
    dh1 = dq @ params.w_q.T + dk @ params.w_k.T + dv @ params.w_v.T
    dx1_ln, dg1, db1 = _layer_norm_backward(dh1, xhat1, inv1, params.ln1_gain)

    # Both residual entry points feed the token embedding x = features + pe.
    dx = dx2 + dx1_ln
    dpe = np.zeros_like(params.pe)
    per_frame = dx.reshape(clip.n_frames, clip.hw, c).sum(axis=1)
    dpe[: clip.n_frames] = per_frame

    return CorrelatorParams(
        n_heads=params.n_heads,
        w_q=dw_q, b_q=db_q, w_k=dw_k, b_k=db_k, w_v=dw_v, b_v=db_v,
        w_o=dw_o, b_o=db_o,
        ln1_gain=dg1, ln1_bias=db1, ln2_gain=dg2, ln2_bias=db2,
        w_ff1=dw_ff1, b_ff1=db_ff1, w_ff2=dw_ff2, b_ff2=db_ff2,
        pe=dpe,
    )


# --- checkpoints ----------------------------------------------------------


def save_checkpoint(path, params: CorrelatorParams) -> None:
    tensors = {name: arr for name, arr in params.named_arrays().items()}
    tensors["meta"] = np.array(
        [params.channels, params.n_heads, params.t_max, CHECKPOINT_VERSION],
        dtype=np.uint32,
    )
    dataio.write_tensors(path, tensors)


def load_checkpoint(path) -> CorrelatorParams:
    tensors = dataio.read_tensors(path)
    if "meta" not in tensors:
        raise dataio.ContainerError("checkpoint missing 'meta' tensor")
    meta = tensors["meta"]
    if meta.shape != (4,):
        raise dataio.ContainerError("checkpoint meta must be [C, heads, T_max, version]")
    channels, n_heads, t_max, version = (int(m) for m in meta)
    if version != CHECKPOINT_VERSION:
        raise dataio.ContainerError(f"unsupported checkpoint version {version}")
    missing = [name for name in _PARAM_FIELDS if name not in tensors]
    if missing:
        raise dataio.ContainerError(f"checkpoint missing tensors: {missing}")
    params = CorrelatorParams.from_arrays(
        n_heads, {name: tensors[name] for name in _PARAM_FIELDS}
    )
    if params.channels != channels or params.t_max != t_max:
        raise dataio.ContainerError("checkpoint meta disagrees with tensor shapes")
    return params
