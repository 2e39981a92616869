"""Dataset persistence, preprocessing, and the synthetic organ/tumor generator.

Tensor files are self-describing little-endian binaries: magic ``LMTX``,
version u32, dtype tag u8 (0=f32, 1=f64, 2=u16), rank u8, extents u64[rank],
then the row-major payload.  A dataset is a JSON manifest referencing one
image and one mask file per sample.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from math import prod
from pathlib import Path

import numpy as np

from .errors import DataError, LoadError, ParameterError
from .tensor import Tensor

TENSOR_MAGIC = b"LMTX"
TENSOR_VERSION = 1
MAX_RANK = 8
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8"), 2: np.dtype("<u2")}


@dataclass
class Sample:
    image: np.ndarray   # (in_channels, spatial...)
    mask: np.ndarray    # (spatial...), integer labels
    id: str


@dataclass
class DatasetManifest:
    version: int
    rank: int
    num_classes: int
    class_names: list
    samples: list       # of {"id", "image", "mask"} with paths relative to root
    split: str = "all"
    root: Path = field(default=Path("."), repr=False)

    def __len__(self):
        return len(self.samples)


# ---------------------------------------------------------------------------
# tensor files


def save_tensor(array, path):
    arr = np.asarray(array.data if isinstance(array, Tensor) else array)
    if arr.ndim > MAX_RANK:
        raise ParameterError(f"tensor rank {arr.ndim} exceeds {MAX_RANK}")
    if arr.dtype == np.float32:
        tag = 0
    elif arr.dtype == np.float64:
        tag = 1
    elif np.issubdtype(arr.dtype, np.integer):
        if arr.size and (arr.min() < 0 or arr.max() > np.iinfo(np.uint16).max):
            raise DataError("integer payload does not fit in u16")
        tag = 2
        arr = arr.astype(np.uint16)
    else:
        raise ParameterError(f"unsupported dtype {arr.dtype}")
    with open(path, "wb") as f:
        f.write(TENSOR_MAGIC)
        f.write(struct.pack("<IBB", TENSOR_VERSION, tag, arr.ndim))
        f.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        f.write(np.ascontiguousarray(arr).astype(_DTYPES[tag], copy=False).tobytes())


def load_tensor(path):
    with open(path, "rb") as f:
        head = f.read(4)
        if head != TENSOR_MAGIC:
            raise LoadError(f"{path} is not a tensor file (bad magic)")
        meta = f.read(6)
        if len(meta) != 6:
            raise LoadError(f"{path}: truncated header")
        version, tag, rank = struct.unpack("<IBB", meta)
        if version != TENSOR_VERSION:
            raise LoadError(f"{path}: unsupported version {version}")
        if tag not in _DTYPES:
            raise LoadError(f"{path}: unknown dtype tag {tag}")
        if rank > MAX_RANK:
            raise LoadError(f"{path}: rank {rank} exceeds {MAX_RANK}")
        raw = f.read(8 * rank)
        if len(raw) != 8 * rank:
            raise LoadError(f"{path}: truncated extents header")
        shape = struct.unpack(f"<{rank}Q", raw)
        dt = _DTYPES[tag]
        payload = f.read(prod(shape) * dt.itemsize)
        if len(payload) != prod(shape) * dt.itemsize:
            raise LoadError(f"{path}: truncated payload")
    return np.frombuffer(payload, dtype=dt).reshape(shape).copy()


# ---------------------------------------------------------------------------
# preprocessing


def znorm(image):
    """Per-sample z-score over all elements; a constant image maps to zeros."""
    arr = np.asarray(image, dtype=np.float32)
    std = arr.std()
    if std == 0:
        return np.zeros_like(arr)
    return (arr - arr.mean()) / std


def _linear_resize_axis(arr, axis, out_len):
    n = arr.shape[axis]
    dst = np.arange(out_len, dtype=np.float64)
    src = (dst + 0.5) * (n / out_len) - 0.5
    i0f = np.floor(src)
    w1 = (src - i0f).astype(arr.dtype)
    i0 = np.clip(i0f, 0, n - 1).astype(np.intp)
    i1 = np.clip(i0f + 1, 0, n - 1).astype(np.intp)
    shape = [1] * arr.ndim
    shape[axis] = out_len
    w1 = w1.reshape(shape)
    return (1 - w1) * np.take(arr, i0, axis=axis) + w1 * np.take(arr, i1, axis=axis)


def _nearest_resize_axis(arr, axis, out_len):
    n = arr.shape[axis]
    idx = np.floor((np.arange(out_len) + 0.5) * (n / out_len)).astype(np.intp)
    return np.take(arr, np.clip(idx, 0, n - 1), axis=axis)


def resize(array, target):
    """Resample to the target spatial extents.

    Float arrays are interpolated linearly on half-pixel centers; integer
    label maps use nearest neighbor so labels are never blended.  A leading
    channel axis (ndim == len(target) + 1) is preserved.
    """
    arr = np.asarray(array)
    target = tuple(int(n) for n in target)
    if any(n < 1 for n in target):
        raise ParameterError(f"target extents must be >= 1, got {target}")
    if arr.ndim == len(target):
        first_axis = 0
    elif arr.ndim == len(target) + 1:
        first_axis = 1
    else:
        raise ParameterError(f"cannot resize shape {arr.shape} to extents {target}")
    is_mask = np.issubdtype(arr.dtype, np.integer)
    out = arr
    for axis, extent in enumerate(target, start=first_axis):
        if out.shape[axis] == extent:
            continue
        if is_mask:
            out = _nearest_resize_axis(out, axis, extent)
        else:
            out = _linear_resize_axis(out, axis, extent)
    return np.ascontiguousarray(out)


# ---------------------------------------------------------------------------
# manifests


def save_manifest(manifest, path):
    path = Path(path)
    payload = {
        "version": manifest.version,
        "rank": manifest.rank,
        "num_classes": manifest.num_classes,
        "class_names": manifest.class_names,
        "split": manifest.split,
        "samples": manifest.samples,
    }
    path.write_text(json.dumps(payload, indent=2))


def load_manifest(path):
    path = Path(path)
    try:
        payload = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise LoadError(f"cannot read manifest {path}: {exc}") from exc
    manifest = DatasetManifest(
        version=payload["version"],
        rank=payload["rank"],
        num_classes=payload["num_classes"],
        class_names=payload["class_names"],
        samples=payload["samples"],
        split=payload.get("split", "all"),
        root=path.parent,
    )
    ids = [s["id"] for s in manifest.samples]
    if len(set(ids)) != len(ids):
        raise DataError(f"manifest {path} contains duplicate sample ids")
    for entry in manifest.samples:
        for key in ("image", "mask"):
            target = manifest.root / entry[key]
            if not target.exists():
                raise DataError(f"manifest references missing file {target}")
    return manifest


def load_sample(manifest, index):
    entry = manifest.samples[index]
    image = load_tensor(manifest.root / entry["image"]).astype(np.float32)
    mask = load_tensor(manifest.root / entry["mask"]).astype(np.int64)
    if image.shape[1:] != mask.shape:
        raise DataError(f"sample {entry['id']}: image {image.shape} and mask "
                        f"{mask.shape} extents differ")
    return Sample(image=image, mask=mask, id=entry["id"])


def load_samples(manifest):
    return [load_sample(manifest, i) for i in range(len(manifest))]


# ---------------------------------------------------------------------------
# synthetic data


def _coordinate_grid(extents):
    axes = [np.arange(n, dtype=np.float64) for n in extents]
    return np.meshgrid(*axes, indexing="ij")


def _smooth_noise(rng, extents, scale=0.4):
    coarse_shape = tuple(max(2, n // 8) for n in extents)
    coarse = rng.normal(0.0, 1.0, size=coarse_shape).astype(np.float32)
    return scale * resize(coarse, extents)


def generate_sample(seed, index, rank, extents, num_classes=3):
    """One synthetic image/mask pair, a pure function of (seed, index)."""
    rng = np.random.default_rng([seed, index])
    extents = tuple(int(n) for n in extents)
    grid = _coordinate_grid(extents)

    image = _smooth_noise(rng, extents)
    mask = np.zeros(extents, dtype=np.uint16)

    center = [rng.uniform(0.38, 0.62) * n for n in extents]
    axes = [rng.uniform(0.18, 0.30) * n for n in extents]
    organ_dist = sum(((g - c) / a) ** 2 for g, c, a in zip(grid, center, axes))
    organ = organ_dist <= 1.0
    mask[organ] = 1
    image[organ] += 1.2

    if num_classes > 2:
        for _ in range(int(rng.integers(0, 3))):
            t_center = [c + rng.uniform(-0.45, 0.45) * a
                        for c, a in zip(center, axes)]
            radius = rng.uniform(0.05, 0.10) * min(extents)
            dist = sum((g - c) ** 2 for g, c in zip(grid, t_center))
            tumor = np.logical_and(dist <= radius ** 2, organ)
            mask[tumor] = 2
            image[tumor] += 1.0

    image += rng.normal(0.0, 0.05, size=extents).astype(np.float32)
    return image[None].astype(np.float32), mask


def synth_generate(seed, n, rank, extents, out_dir, num_classes=3):
    """Write ``n`` synthetic samples plus a manifest under ``out_dir``."""
    extents = tuple(int(e) for e in extents)
    if len(extents) != rank:
        raise ParameterError(f"extents {extents} do not match rank {rank}")
    for e in extents:
        if e % 8 != 0:
            raise ParameterError(f"extents must be divisible by 8, got {extents}")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    entries = []
    for i in range(n):
        image, mask = generate_sample(seed, i, rank, extents, num_classes)
        sid = f"s{i:04d}"
        save_tensor(image, out / f"{sid}_img.lmt")
        save_tensor(mask, out / f"{sid}_msk.lmt")
        entries.append({"id": sid, "image": f"{sid}_img.lmt", "mask": f"{sid}_msk.lmt"})
    manifest = DatasetManifest(
        version=1, rank=rank, num_classes=num_classes,
        class_names=["background", "organ", "tumor"][:num_classes],
        samples=entries, split="all", root=out)
    save_manifest(manifest, out / "manifest.json")
    return manifest


def split(manifest, ratios, seed):
    """Seeded shuffle and contiguous partition by rounded ratios."""
    parts = [float(r) for r in ratios]
    if any(r <= 0 for r in parts):
        raise DataError(f"split ratios must be positive, got {ratios}")
    n = len(manifest.samples)
    if n < len(parts):
        raise DataError(f"cannot split {n} samples into {len(parts)} parts")
    total = sum(parts)
    order = np.random.default_rng(seed).permutation(n)
    boundaries = [round(sum(parts[:i + 1]) / total * n) for i in range(len(parts))]
    boundaries[-1] = n
    names = ["train", "val", "test"]
    outputs = []
    start = 0
    for i, stop in enumerate(boundaries):
        chosen = [manifest.samples[j] for j in order[start:stop]]
        outputs.append(DatasetManifest(
            version=manifest.version, rank=manifest.rank,
            num_classes=manifest.num_classes, class_names=manifest.class_names,
            samples=chosen, split=names[i] if i < len(names) else f"part{i}",
            root=manifest.root))
        start = stop
    return tuple(outputs)
