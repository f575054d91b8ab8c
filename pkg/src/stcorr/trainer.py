"""Training loop: sample short clips, run the block, step the optimizer.

The optimizer is Adam with decoupled weight decay: each step first shrinks
the parameter multiplicatively (theta <- theta * (1 - lr * wd)) and then
applies the bias-corrected adaptive-moment update. The learning rate is
constant for the whole run.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import dataio
from .correlator import CorrelatorParams, FeatureClip, backward, forward, save_checkpoint
from .objective import compute_objective, objective_backward, sample_index_sets

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    frames: int = 3
    stride: int = 4
    k_p: int = 10
    k_n: int = 50
    margin_semantic: float = 0.5
    margin_motion: float = 1.0
    learning_rate: float = 1e-4
    weight_decay: float = 0.05
    beta1: float = 0.9
    beta2: float = 0.999
    eps_opt: float = 1e-8
    batch_size: int = 16
    total_iters: int = 30000
    n_heads: int = 8
    t_max: int = 64
    init_std: float = 0.02
    seed: int = 0
    # The block runs without dropout; the flag records that decision and
    # rejects anything else.
    dropout: float = 0.0

    def __post_init__(self):
        if self.frames < 2:
            raise ValueError("clips need at least two frames")
        if self.stride < 1:
            raise ValueError("stride must be positive")
        if self.batch_size < 1:
            raise ValueError("batch size must be positive")
        if self.total_iters < 0:
            raise ValueError("total_iters must be non-negative")
        if self.learning_rate <= 0:
            raise ValueError("learning rate must be positive")
        if not (0.0 <= self.beta1 < 1.0 and 0.0 <= self.beta2 < 1.0):
            raise ValueError("betas must lie in [0, 1)")
        if self.weight_decay < 0:
            raise ValueError("weight decay must be non-negative")
        if self.dropout != 0.0:
            raise ValueError("dropout is not supported; set dropout=0.0")
        if self.frames > self.t_max:
            raise ValueError("frames exceeds the positional table size t_max")

    @property
    def clip_span(self) -> int:
        return (self.frames - 1) * self.stride + 1


@dataclass
class OptimizerState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0

    @classmethod
    def initial(cls, params: CorrelatorParams) -> "OptimizerState":
        named = params.named_arrays()
        return cls(
            m={k: np.zeros_like(a) for k, a in named.items()},
            v={k: np.zeros_like(a) for k, a in named.items()},
            step=0,
        )


def sample_clip(
    features: np.ndarray,
    height: int,
    width: int,
    frames: int,
    stride: int,
    rng: np.random.Generator,
) -> FeatureClip:
    """Uniform-random fixed-stride window over a [L, H*W, C] sequence."""
    length = features.shape[0]
    span = (frames - 1) * stride + 1
    if length < span:
        raise ValueError(f"video of {length} frames cannot fit a span-{span} clip")
    start = int(rng.integers(0, length - span + 1))
    idx = start + stride * np.arange(frames, dtype=np.int64)
    return FeatureClip(features[idx], height, width, idx, stride)


def optimizer_step(
    params: CorrelatorParams,
    grads: CorrelatorParams,
    state: OptimizerState,
    config: TrainConfig,
) -> tuple[CorrelatorParams, OptimizerState]:
    """One decay-then-Adam update; returns fresh params and state."""
    t = state.step + 1
    lr = config.learning_rate
    decay = 1.0 - lr * config.weight_decay
    bc1 = 1.0 - config.beta1 ** t
    bc2 = 1.0 - config.beta2 ** t
    new_arrays: dict[str, np.ndarray] = {}
    new_m: dict[str, np.ndarray] = {}
    new_v: dict[str, np.ndarray] = {}
    grad_map = grads.named_arrays()
    for name, theta in params.named_arrays().items():
        g = grad_map[name]
        if not np.all(np.isfinite(g)):
            raise ValueError(f"non-finite gradient for parameter '{name}'")
        m = config.beta1 * state.m[name] + (1.0 - config.beta1) * g
        v = config.beta2 * state.v[name] + (1.0 - config.beta2) * (g * g)
        update = (m / bc1) / (np.sqrt(v / bc2) + config.eps_opt)
        new_arrays[name] = theta * decay - lr * update
        new_m[name] = m
        new_v[name] = v
    return (
        CorrelatorParams.from_arrays(params.n_heads, new_arrays),
        OptimizerState(m=new_m, v=new_v, step=t),
    )


@dataclass
class TrainResult:
    params: CorrelatorParams
    losses: np.ndarray
    checkpoint_path: str | None = None
    loss_log_path: str | None = None
    skipped_videos: list[str] = field(default_factory=list)


class _VideoStore:
    """Manifest-backed lazy loader; every video is read at most once."""

    def __init__(self, entries: list[dataio.ManifestEntry]):
        self.entries = entries
        self._cache: dict[str, tuple[np.ndarray, int, int]] = {}

    def load(self, entry: dataio.ManifestEntry) -> tuple[np.ndarray, int, int]:
        if entry.path not in self._cache:
            data, height, width, _ = dataio.read_features(entry.path)
            self._cache[entry.path] = (data, height, width)
        return self._cache[entry.path]


def _clip_gradients(
    clip: FeatureClip, params: CorrelatorParams, config: TrainConfig
) -> tuple[CorrelatorParams, float]:
    fused, attention = forward(clip, params)
    sets = sample_index_sets(attention, config.k_p, config.k_n)
    breakdown = compute_objective(
        fused, attention, sets, config.margin_semantic, config.margin_motion
    )
    d_fused, d_rows = objective_backward(
        fused,
        attention,
        sets,
        config.margin_semantic,
        config.margin_motion,
        breakdown.weights,
    )
    return backward(clip, params, d_fused, d_rows), breakdown.total


def train(
    manifest_path: str,
    config: TrainConfig,
    out_dir: str | None = None,
    params: CorrelatorParams | None = None,
) -> TrainResult:
    """Train on clips sampled uniformly (with replacement) from the
    manifest's videos. Videos shorter than the clip span are skipped with
    a warning. Writes a checkpoint and an ``iter<TAB>loss`` log when
    ``out_dir`` is given."""
    import os

    entries = dataio.read_manifest(manifest_path)
    if not entries:
        raise ValueError(f"manifest {manifest_path} lists no videos")
    store = _VideoStore(entries)
    usable = []
    skipped = []
    span = config.clip_span
    channels = None
    for entry in entries:
        if entry.num_frames < span:
            log.warning(
                "skipping video %s: %d frames < clip span %d",
                entry.video_id, entry.num_frames, span,
            )
            skipped.append(entry.video_id)
            continue
        usable.append(entry)
    if not usable:
        raise ValueError("no manifest video is long enough for the configured clip span")

    data0, _, _ = store.load(usable[0])
    channels = data0.shape[2]
    if params is None:
        params = CorrelatorParams.random(
            channels,
            n_heads=config.n_heads,
            t_max=config.t_max,
            seed=config.seed,
            std=config.init_std,
        )
    elif params.channels != channels:
        raise ValueError("provided params do not match the feature channel count")

    state = OptimizerState.initial(params)
    rng = np.random.default_rng(config.seed)
    losses = np.zeros(config.total_iters)

    log_fh = None
    checkpoint_path = None
    loss_log_path = None
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        checkpoint_path = os.path.join(out_dir, "checkpoint.stf")
        loss_log_path = os.path.join(out_dir, "loss_log.tsv")
        log_fh = open(loss_log_path, "w", encoding="utf-8")

    try:
        for it in range(config.total_iters):
            acc: dict[str, np.ndarray] | None = None
            loss_sum = 0.0
            for _ in range(config.batch_size):
                entry = usable[int(rng.integers(0, len(usable)))]
                data, height, width = store.load(entry)
                if data.shape[2] != channels:
                    raise ValueError(
                        f"video {entry.video_id} has {data.shape[2]} channels, expected {channels}"
                    )
                clip = sample_clip(data, height, width, config.frames, config.stride, rng)
                grads, loss = _clip_gradients(clip, params, config)
                loss_sum += loss
                named = grads.named_arrays()
                if acc is None:
                    acc = {k: a.copy() for k, a in named.items()}
                else:
                    for k, a in named.items():
                        acc[k] += a
            inv_b = 1.0 / config.batch_size
            mean_loss = loss_sum * inv_b
            if not np.isfinite(mean_loss):
                raise RuntimeError(f"non-finite loss at iteration {it}")
            losses[it] = mean_loss
            for k in acc:
                acc[k] *= inv_b
            mean_grads = CorrelatorParams.from_arrays(params.n_heads, acc)
            params, state = optimizer_step(params, mean_grads, state, config)
            if log_fh is not None:
                log_fh.write(f"{it}\t{mean_loss:.10g}\n")
    finally:
        if log_fh is not None:
            log_fh.close()

    if checkpoint_path is not None:
        save_checkpoint(checkpoint_path, params)
    return TrainResult(
        params=params,
        losses=losses,
        checkpoint_path=checkpoint_path,
        loss_log_path=loss_log_path,
        skipped_videos=skipped,
    )
