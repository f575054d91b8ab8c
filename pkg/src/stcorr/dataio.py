"""File formats and synthetic data.

Tensor container layout (all integers little-endian):

    magic "STF1" (4 bytes)
    u32 tensor count
    per tensor:
        u16 name length, then that many bytes of UTF-8 name
        u8 dtype code: 1 = float32, 2 = float64, 3 = uint16, 4 = uint32
        u8 ndim
        ndim * u64 dims
        payload, row-major little-endian

Mask rasters are a container holding a single 2-D uint16 tensor named
"labels" (0 = background). Feature files hold "features" [T, H*W, C]
float32 plus "grid" = [H, W] and "frame_indices" as uint32 vectors.
Manifests are TSV lines "video_id<TAB>feature_path<TAB>num_frames";
relative feature paths resolve against the manifest's directory.
"""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass

import numpy as np

MAGIC = b"STF1"

_CODE_TO_DTYPE = {
    1: np.dtype("<f4"),
    2: np.dtype("<f8"),
    3: np.dtype("<u2"),
    4: np.dtype("<u4"),
}
_KIND_TO_CODE = {"f4": 1, "f8": 2, "u2": 3, "u4": 4}


class ContainerError(Exception):
    """Base class for tensor container format violations."""


class BadMagicError(ContainerError):
    pass


class TruncatedFileError(ContainerError):
    pass


class DuplicateNameError(ContainerError):
    pass


def _dtype_code(arr: np.ndarray) -> int:
    key = arr.dtype.newbyteorder("<").str.lstrip("<|")
    code = _KIND_TO_CODE.get(key)
    if code is None:
        raise ContainerError(f"unsupported dtype {arr.dtype}")
    return code


def write_tensors(path: str | os.PathLike, tensors: dict[str, np.ndarray]) -> None:
    """Serialize named tensors to ``path``. Insertion order is preserved."""
    parts = [MAGIC, struct.pack("<I", len(tensors))]
    for name, arr in tensors.items():
        raw = np.ascontiguousarray(arr)
        code = _dtype_code(raw)
        raw = raw.astype(raw.dtype.newbyteorder("<"), copy=False)
        encoded = name.encode("utf-8")
        if len(encoded) > 0xFFFF:
            raise ContainerError(f"tensor name too long: {name!r}")
        parts.append(struct.pack("<H", len(encoded)))
        parts.append(encoded)
        parts.append(struct.pack("<BB", code, raw.ndim))
        parts.append(struct.pack(f"<{raw.ndim}Q", *raw.shape))
        parts.append(raw.tobytes())
    blob = b"".join(parts)
    with open(path, "wb") as fh:
        fh.write(blob)


def _take(buf: bytes, offset: int, count: int, what: str) -> tuple[bytes, int]:
    end = offset + count
    if end > len(buf):
        raise TruncatedFileError(f"file ends inside {what}")
    return buf[offset:end], end


def read_tensors(path: str | os.PathLike) -> dict[str, np.ndarray]:
    """Parse a container file back into an ordered name -> array mapping."""
    with open(path, "rb") as fh:
        buf = fh.read()
    magic, off = _take(buf, 0, 4, "magic")
    if magic != MAGIC:
        raise BadMagicError(f"bad magic {magic!r}, expected {MAGIC!r}")
    raw_count, off = _take(buf, off, 4, "tensor count")
    (count,) = struct.unpack("<I", raw_count)
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        raw_len, off = _take(buf, off, 2, "name length")
        (name_len,) = struct.unpack("<H", raw_len)
        raw_name, off = _take(buf, off, name_len, "name")
        name = raw_name.decode("utf-8")
        if name in out:
            raise DuplicateNameError(f"duplicate tensor name {name!r}")
        head, off = _take(buf, off, 2, "dtype/ndim")
        code, ndim = struct.unpack("<BB", head)
        dtype = _CODE_TO_DTYPE.get(code)
        if dtype is None:
            raise ContainerError(f"unknown dtype code {code}")
        raw_dims, off = _take(buf, off, 8 * ndim, "dims")
        dims = struct.unpack(f"<{ndim}Q", raw_dims)
        n_bytes = int(np.prod(dims, dtype=np.int64)) * dtype.itemsize if ndim else dtype.itemsize
        if ndim == 0:
            n_bytes = dtype.itemsize
        payload, off = _take(buf, off, n_bytes, f"payload of {name!r}")
        out[name] = np.frombuffer(payload, dtype=dtype).reshape(dims).copy()
    return out


def inspect_file(path: str | os.PathLike) -> list[tuple[str, str, tuple[int, ...], int]]:
    """Return (name, dtype, shape, payload bytes) per tensor without copies."""
    info = []
    for name, arr in read_tensors(path).items():
        info.append((name, arr.dtype.name, arr.shape, arr.nbytes))
    return info


# --- mask rasters ---------------------------------------------------------


def write_mask(path: str | os.PathLike, labels: np.ndarray) -> None:
    arr = np.asarray(labels)
    if arr.ndim != 2:
        raise ContainerError(f"mask must be 2-D, got shape {arr.shape}")
    if arr.min(initial=0) < 0 or arr.max(initial=0) > 0xFFFF:
        raise ContainerError("mask labels must fit in uint16")
    write_tensors(path, {"labels": arr.astype(np.uint16)})


def read_mask(path: str | os.PathLike) -> np.ndarray:
    tensors = read_tensors(path)
    if list(tensors) != ["labels"]:
        raise ContainerError(f"mask file must hold a single 'labels' tensor, got {list(tensors)}")
    labels = tensors["labels"]
    if labels.dtype != np.uint16:
        raise ContainerError(f"mask labels must be uint16, got {labels.dtype.name}")
    if labels.ndim != 2:
        raise ContainerError(f"mask labels must be 2-D, got shape {labels.shape}")
    return labels


# --- feature files --------------------------------------------------------


def write_features(
    path: str | os.PathLike,
    data: np.ndarray,
    height: int,
    width: int,
    frame_indices: np.ndarray,
) -> None:
    arr = np.asarray(data, dtype=np.float32)
    idx = np.asarray(frame_indices, dtype=np.uint32)
    if arr.ndim != 3:
        raise ContainerError(f"features must be [T, H*W, C], got shape {arr.shape}")
    if arr.shape[1] != height * width:
        raise ContainerError(f"grid {height}x{width} does not match {arr.shape[1]} patches")
    if idx.shape != (arr.shape[0],):
        raise ContainerError("frame_indices length must equal the frame count")
    write_tensors(
        path,
        {
            "features": arr,
            "grid": np.array([height, width], dtype=np.uint32),
            "frame_indices": idx,
        },
    )


def read_features(path: str | os.PathLike) -> tuple[np.ndarray, int, int, np.ndarray]:
    tensors = read_tensors(path)
    for required in ("features", "grid", "frame_indices"):
        if required not in tensors:
            raise ContainerError(f"feature file missing tensor {required!r}")
    data = tensors["features"]
    grid = tensors["grid"]
    idx = tensors["frame_indices"]
    if data.ndim != 3:
        raise ContainerError(f"features must be [T, H*W, C], got shape {data.shape}")
    if grid.shape != (2,):
        raise ContainerError("grid tensor must have shape [2]")
    height, width = int(grid[0]), int(grid[1])
    if height * width != data.shape[1]:
        raise ContainerError(f"grid {height}x{width} does not match {data.shape[1]} patches")
    if idx.shape != (data.shape[0],):
        raise ContainerError("frame_indices length must equal the frame count")
    return data, height, width, idx.astype(np.int64)


# --- manifests ------------------------------------------------------------


@dataclass(frozen=True)
class ManifestEntry:
    video_id: str
    path: str
    num_frames: int


def write_manifest(path: str | os.PathLike, entries: list[ManifestEntry]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for entry in entries:
            fh.write(f"{entry.video_id}\t{entry.path}\t{entry.num_frames}\n")


def read_manifest(path: str | os.PathLike) -> list[ManifestEntry]:
    base = os.path.dirname(os.path.abspath(path))
    entries = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line:
                continue
            fields = line.split("\t")
            if len(fields) != 3:
                raise ContainerError(f"{path}:{lineno}: expected 3 tab-separated fields")
            video_id, rel, frames = fields
            try:
                num_frames = int(frames)
            except ValueError as exc:
                raise ContainerError(f"{path}:{lineno}: bad frame count {frames!r}") from exc
            resolved = rel if os.path.isabs(rel) else os.path.join(base, rel)
            entries.append(ManifestEntry(video_id, resolved, num_frames))
    return entries


# --- synthetic scenes -----------------------------------------------------


@dataclass(frozen=True)
class SynthSceneConfig:
    """Rigid rectangles drifting over a flat background on a patch grid.

    Every patch emits its region prototype plus isotropic Gaussian noise
    (scaled so ``noise`` is the expected L2 norm of the perturbation) and
    is renormalized to unit length. Prototypes are mutually orthogonal, so
    the cosine similarity between regions is 0 before noise, which keeps
    it below any non-negative ``separation`` bound.
    """

    num_objects: int = 3
    frames: int = 5
    height: int = 16
    width: int = 16
    channels: int = 64
    speed: float = 1.0
    noise: float = 0.05
    separation: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if self.num_objects < 1:
            raise ValueError("need at least one object")
        if self.frames < 1 or self.height < 2 or self.width < 2:
            raise ValueError("scene dimensions too small")
        if self.channels < self.num_objects + 1:
            raise ValueError("channels must be at least num_objects + 1 for orthogonal prototypes")
        if self.noise < 0 or self.speed < 0 or self.separation < 0:
            raise ValueError("noise, speed and separation must be non-negative")


def _orthonormal_prototypes(rng: np.random.Generator, count: int, channels: int) -> np.ndarray:
    gauss = rng.normal(size=(channels, count))
    q, _ = np.linalg.qr(gauss)
    return q.T[:count]


def _place_objects(rng, config, sizes):
    # Rejection-sample non-overlapping top-left corners at t=0.
    occupancy = np.zeros((config.height, config.width), dtype=bool)
    corners = []
    for oh, ow in sizes:
        placed = False
        for _ in range(200):
            top = int(rng.integers(0, config.height - oh + 1))
            left = int(rng.integers(0, config.width - ow + 1))
            if not occupancy[top : top + oh, left : left + ow].any():
                occupancy[top : top + oh, left : left + ow] = True
                corners.append((float(top), float(left)))
                placed = True
                break
        if not placed:
            raise ValueError("could not place objects without overlap at t=0")
    return corners


def _bounce(pos: float, vel: float, limit: float) -> tuple[float, float]:
    # Reflect off [0, limit]; limit is the largest legal top/left coordinate.
    if limit <= 0:
        return 0.0, -vel
    nxt = pos + vel
    while nxt < 0.0 or nxt > limit:
        if nxt < 0.0:
            nxt = -nxt
            vel = -vel
        else:
            nxt = 2.0 * limit - nxt
            vel = -vel
    return nxt, vel


def synth_scene(config: SynthSceneConfig) -> tuple[np.ndarray, np.ndarray]:
    """Generate (features [T, H*W, C] float32, labels [T, H, W] uint16)."""
    rng = np.random.default_rng(config.seed)
    k = config.num_objects
    side = max(2, min(config.height, config.width) // 4)
    sizes = [(side, side)] * k
    corners = _place_objects(rng, config, sizes)
    speeds = []
    for _ in range(k):
        angle = rng.uniform(0.0, 2.0 * np.pi)
        speeds.append((config.speed * np.sin(angle), config.speed * np.cos(angle)))
    prototypes = _orthonormal_prototypes(rng, k + 1, config.channels)

    labels = np.zeros((config.frames, config.height, config.width), dtype=np.uint16)
    positions = list(corners)
    velocities = list(speeds)
    for t in range(config.frames):
        for obj in range(k):
            oh, ow = sizes[obj]
            top, left = positions[obj]
            r = int(round(top))
            c = int(round(left))
            labels[t, r : r + oh, c : c + ow] = obj + 1
        for obj in range(k):
            oh, ow = sizes[obj]
            top, vy = _bounce(positions[obj][0], velocities[obj][0], config.height - oh)
            left, vx = _bounce(positions[obj][1], velocities[obj][1], config.width - ow)
            positions[obj] = (top, left)
            velocities[obj] = (vy, vx)

    flat_labels = labels.reshape(config.frames, -1)
    features = prototypes[flat_labels]
    if config.noise > 0:
        features = features + (
            config.noise / np.sqrt(config.channels)
        ) * rng.normal(size=features.shape)
    features /= np.linalg.norm(features, axis=-1, keepdims=True)
    return features.astype(np.float32), labels
