"""Manifest ingestion, image codecs, augmentation, interleaving, triplets.

A dataset is a TSV manifest: one header line ``task_name<TAB>num_classes``
then one ``image_path<TAB>listing_id<TAB>label`` row per example. Paths
resolve relative to the manifest's directory. Images are binary PPM (P6)
or serialized tensors; decoded values always live in [0, 1], channels
RGB, layout (3, H, W).

The interleaving sampler realizes sentinel-masked multitask batches: each
batch draws an equal share from every dataset and labels each example for
its own task only, with SENTINEL everywhere else.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterator

import numpy as np

from .errors import (
    ConfigError,
    ContractError,
    FormatError,
    LabelError,
    ParseError,
    TruncatedError,
)
from .tensor import Tensor
from .vrt import MAGIC as VRT_MAGIC
from .vrt import tensor_from_bytes

SENTINEL = -1

__all__ = [
    "SENTINEL",
    "DatasetManifest",
    "ManifestRow",
    "Batch",
    "Triplet",
    "AugConfig",
    "load_manifest",
    "save_manifest",
    "read_ppm",
    "write_ppm",
    "decode_image",
    "resize_bilinear",
    "augment",
    "interleave_batches",
    "sample_triplets",
]


# ---------------------------------------------------------------------------
# manifests


@dataclass
class ManifestRow:
    path: str
    listing_id: str
    label: int


@dataclass
class DatasetManifest:
    name: str
    task_name: str
    num_classes: int
    rows: list[ManifestRow]
    root: Path = field(default_factory=Path)

    def resolve(self, row: ManifestRow) -> Path:
        return self.root / row.path


def load_manifest(path: str | os.PathLike) -> DatasetManifest:
    path = Path(path)
    lines = path.read_text(encoding="utf-8").splitlines()
    if not lines:
        raise ParseError(f"{path}: empty manifest")
    header = lines[0].split("\t")
    if len(header) != 2:
        raise ParseError(f"{path}:1: header must be 'task_name<TAB>num_classes'")
    task_name = header[0].strip()
    try:
        num_classes = int(header[1])
    except ValueError:
        raise ParseError(f"{path}:1: class count {header[1]!r} is not an integer")
    if not task_name or num_classes < 2:
        raise ParseError(f"{path}:1: need a task name and >= 2 classes")
    rows: list[ManifestRow] = []
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 3:
            raise ParseError(
                f"{path}:{lineno}: expected 3 tab-separated fields, got {len(parts)}"
            )
        img, listing_id, label_s = parts
        try:
            label = int(label_s)
        except ValueError:
            raise ParseError(f"{path}:{lineno}: label {label_s!r} is not an integer")
        if not 0 <= label < num_classes:
            raise LabelError(
                f"{path}:{lineno}: label {label} out of range [0, {num_classes})"
            )
        rows.append(ManifestRow(img, listing_id, label))
    if not rows:
        raise ParseError(f"{path}: manifest has no data rows")
    root = path.parent
    for row in rows:
        if not (root / row.path).is_file():
            raise ConfigError(f"{path}: image {row.path!r} not found under {root}")
    return DatasetManifest(
        name=path.stem, task_name=task_name, num_classes=num_classes, rows=rows, root=root
    )


def save_manifest(path: str | os.PathLike, manifest: DatasetManifest) -> None:
    lines = [f"{manifest.task_name}\t{manifest.num_classes}"]
    for row in manifest.rows:
        lines.append(f"{row.path}\t{row.listing_id}\t{row.label}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


# ---------------------------------------------------------------------------
# PPM (P6) codec


def _ppm_token(data: bytes, pos: int) -> tuple[bytes, int]:
    # skip whitespace and '#' comments, return next token
    n = len(data)
    while pos < n:
        c = data[pos : pos + 1]
        if c == b"#":
            while pos < n and data[pos : pos + 1] != b"\n":
                pos += 1
        elif c.isspace():
            pos += 1
        else:
            break
    start = pos
    while pos < n and not data[pos : pos + 1].isspace():
        pos += 1
    if start == pos:
        raise TruncatedError("PPM header ended early")
    return data[start:pos], pos


def read_ppm(path: str | os.PathLike) -> np.ndarray:
    """Decode binary PPM into float32 (3, H, W) in [0, 1]."""
    blob = Path(path).read_bytes()
    if blob[:2] != b"P6":
        raise FormatError(f"{path}: unsupported magic bytes {blob[:2]!r}")
    pos = 2
    fields = []
    for _ in range(3):
        tok, pos = _ppm_token(blob, pos)
        fields.append(tok)
    try:
        width, height, maxval = (int(f) for f in fields)
    except ValueError:
        raise FormatError(f"{path}: malformed PPM header fields {fields}")
    if maxval < 1 or maxval > 255:
        raise FormatError(f"{path}: maxval {maxval} outside 8-bit range")
    pos += 1  # single whitespace byte after maxval
    need = width * height * 3
    payload = blob[pos : pos + need]
    if len(payload) < need:
        raise TruncatedError(f"{path}: payload {len(payload)} bytes, need {need}")
    hwc = np.frombuffer(payload, dtype=np.uint8, count=need).reshape(height, width, 3)
    chw = hwc.transpose(2, 0, 1).astype(np.float32) / float(maxval)
    return chw


def write_ppm(path: str | os.PathLike, image: np.ndarray) -> None:
    """Encode float (3, H, W) values in [0, 1] as maxval-255 binary PPM."""
    if image.ndim != 3 or image.shape[0] != 3:
        raise FormatError(f"PPM writer needs (3, H, W), got {image.shape}")
    u8 = np.clip(np.round(np.asarray(image, dtype=np.float64) * 255.0), 0, 255).astype(
        np.uint8
    )
    h, w = image.shape[1], image.shape[2]
    header = f"P6\n{w} {h}\n255\n".encode("ascii")
    Path(path).write_bytes(header + u8.transpose(1, 2, 0).tobytes())


def decode_image(path: str | os.PathLike) -> Tensor:
    """Read either image container into a float32 (3, H, W) tensor."""
    path = Path(path)
    head = path.read_bytes()
    if head[:2] == b"P6":
        return Tensor(read_ppm(path))
    if head[:4] == VRT_MAGIC:
        arr = tensor_from_bytes(head, source=str(path))
        if arr.ndim != 3 or arr.shape[0] != 3:
            raise FormatError(f"{path}: tensor image must be (3, H, W), got {arr.shape}")
        return Tensor(arr)
    raise FormatError(f"{path}: unsupported magic bytes {head[:4]!r}")


# ---------------------------------------------------------------------------
# augmentation


@dataclass
class AugConfig:
    resize_to: tuple[int, int]  # intermediate size after bilinear resize
    crop_to: tuple[int, int]  # final size, == model input
    rescale: float = 1.0  # multiplicative value rescale before resize
    rotation_max_deg: float = 0.0  # uniform in [-r, +r], nearest, zero fill
    brightness: tuple[float, float] = (0.0, 0.0)  # additive delta range
    contrast: tuple[float, float] = (0.0, 0.0)  # deviation multiplier delta range

    def __post_init__(self):
        rh, rw = self.resize_to
        ch, cw = self.crop_to
        if ch > rh or cw > rw:
            raise ConfigError(f"crop {self.crop_to} larger than resized {self.resize_to}")
        if abs(self.rotation_max_deg) > 180.0:
            raise ConfigError("rotation range must stay within +-180 degrees")
        for name, (lo, hi) in (("brightness", self.brightness), ("contrast", self.contrast)):
            if not (-1.0 <= lo <= hi <= 1.0):
                raise ConfigError(f"{name} range ({lo}, {hi}) must be ordered within [-1, 1]")


def resize_bilinear(chw: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Half-pixel-center bilinear resample; exact copy when sizes match."""
    c, h, w = chw.shape
    if (h, w) == (out_h, out_w):
        return chw.copy()
    ys = (np.arange(out_h, dtype=np.float64) + 0.5) * (h / out_h) - 0.5
    xs = (np.arange(out_w, dtype=np.float64) + 0.5) * (w / out_w) - 0.5
    y0 = np.clip(np.floor(ys).astype(np.int64), 0, h - 1)
    x0 = np.clip(np.floor(xs).astype(np.int64), 0, w - 1)
    y1 = np.clip(y0 + 1, 0, h - 1)
    x1 = np.clip(x0 + 1, 0, w - 1)
    wy = np.clip(ys - y0, 0.0, 1.0)[None, :, None]
    wx = np.clip(xs - x0, 0.0, 1.0)[None, None, :]
    top = chw[:, y0][:, :, x0] * (1 - wx) + chw[:, y0][:, :, x1] * wx
    bot = chw[:, y1][:, :, x0] * (1 - wx) + chw[:, y1][:, :, x1] * wx
    return (top * (1 - wy) + bot * wy).astype(np.float32)


def _rotate_nearest(chw: np.ndarray, degrees: float) -> np.ndarray:
    c, h, w = chw.shape
    theta = np.deg2rad(degrees)
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    yy, xx = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    # rotate destination coordinates back into the source frame
    cos_t, sin_t = np.cos(theta), np.sin(theta)
    sy = cos_t * (yy - cy) - sin_t * (xx - cx) + cy
    sx = sin_t * (yy - cy) + cos_t * (xx - cx) + cx
    iy = np.round(sy).astype(np.int64)
    ix = np.round(sx).astype(np.int64)
    valid = (iy >= 0) & (iy < h) & (ix >= 0) & (ix < w)
    out = np.zeros_like(chw)
    out[:, valid] = chw[:, iy[valid], ix[valid]]
    return out


def augment(image: Tensor | np.ndarray, cfg: AugConfig, rng: np.random.Generator) -> Tensor:
    """Apply rescale, resize, crop, rotate, and jitter in that fixed order."""
    chw = np.asarray(image.data if isinstance(image, Tensor) else image, dtype=np.float32)
    if chw.ndim != 3 or chw.shape[0] != 3:
        raise ConfigError(f"augment needs (3, H, W), got {chw.shape}")
    if cfg.rescale != 1.0:
        chw = chw * np.float32(cfg.rescale)
    chw = resize_bilinear(chw, *cfg.resize_to)
    ch, cw = cfg.crop_to
    max_dy = cfg.resize_to[0] - ch
    max_dx = cfg.resize_to[1] - cw
    dy = int(rng.integers(0, max_dy + 1))
    dx = int(rng.integers(0, max_dx + 1))
    chw = chw[:, dy : dy + ch, dx : dx + cw]
    if cfg.rotation_max_deg != 0.0:
        deg = float(rng.uniform(-cfg.rotation_max_deg, cfg.rotation_max_deg))
        chw = _rotate_nearest(chw, deg)
    lo, hi = cfg.brightness
    if lo != 0.0 or hi != 0.0:
        chw = chw + np.float32(lo if lo == hi else rng.uniform(lo, hi))
    lo, hi = cfg.contrast
    if lo != 0.0 or hi != 0.0:
        factor = 1.0 + (lo if lo == hi else rng.uniform(lo, hi))
        mean = chw.mean()
        chw = mean + (chw - mean) * np.float32(factor)
    return Tensor(np.clip(chw, 0.0, 1.0))


# ---------------------------------------------------------------------------
# interleaved multitask batches


@dataclass
class Batch:
    images: Tensor  # (B, 3, H, W)
    labels: dict[str, np.ndarray]  # task -> int64 (B,), SENTINEL where absent
    listing_ids: list[str]
    dataset_names: list[str]


Loader = Callable[[DatasetManifest, ManifestRow, np.random.Generator], np.ndarray]


def _default_loader(
    manifest: DatasetManifest, row: ManifestRow, rng: np.random.Generator
) -> np.ndarray:
    return decode_image(manifest.resolve(row)).data


def interleave_batches(
    datasets: list[DatasetManifest],
    batch_size: int,
    rng: np.random.Generator,
    loader: Loader = _default_loader,
) -> Iterator[Batch]:
    """One epoch of equal-share batches; ends when the smallest dataset runs out."""
    if not datasets:
        raise ConfigError("need at least one dataset")
    d = len(datasets)
    if batch_size % d:
        raise ConfigError(f"batch size {batch_size} not divisible by {d} datasets")
    per = batch_size // d
    if per < 1:
        raise ConfigError(f"batch size {batch_size} too small for {d} datasets")
    orders = [rng.permutation(len(ds.rows)) for ds in datasets]
    n_batches = min(len(o) for o in orders) // per
    tasks = []
    for ds in datasets:
        if ds.task_name not in tasks:
            tasks.append(ds.task_name)
    for b in range(n_batches):
        images: list[np.ndarray] = []
        listing_ids: list[str] = []
        dataset_names: list[str] = []
        labels = {t: np.full(batch_size, SENTINEL, dtype=np.int64) for t in tasks}
        pos = 0
        for ds, order in zip(datasets, orders):
            for idx in order[b * per : (b + 1) * per]:
                row = ds.rows[int(idx)]
                images.append(loader(ds, row, rng))
                listing_ids.append(row.listing_id)
                dataset_names.append(ds.name)
                labels[ds.task_name][pos] = row.label
                pos += 1
        stacked = np.stack(images).astype(np.float32)
        yield Batch(Tensor(stacked), labels, listing_ids, dataset_names)


# ---------------------------------------------------------------------------
# triplet sampling


@dataclass(frozen=True)
class Triplet:
    anchor: int
    positive: int
    negative: int


def sample_triplets(
    embeddings: np.ndarray,
    listing_ids: list[str],
    strategy: str = "batch_all",
    margin: float = 0.2,
) -> list[Triplet]:
    """Mine listing-grouped triplets from one batch of embeddings.

    batch_all emits every (a, p, n) whose hinge is active; batch_hard keeps
    only the worst-violating negative per ordered positive pair. A batch
    without any positive pair yields an empty list.
    """
    if strategy not in ("batch_all", "batch_hard"):
        raise ConfigError(f"unknown triplet strategy '{strategy}'")
    b = len(listing_ids)
    if embeddings.shape[0] != b:
        raise ContractError(
            f"{embeddings.shape[0]} embeddings for {b} listing ids"
        )
    ids = np.asarray(listing_ids)
    same = ids[:, None] == ids[None, :]
    # squared Euclidean distances via the Gram matrix
    sq = np.sum(embeddings.astype(np.float64) ** 2, axis=1)
    d2 = np.maximum(sq[:, None] + sq[None, :] - 2.0 * (embeddings @ embeddings.T), 0.0)
    out: list[Triplet] = []
    for a in range(b):
        positives = np.nonzero(same[a])[0]
        negatives = np.nonzero(~same[a])[0]
        if negatives.size == 0:
            continue
        for p in positives:
            if p == a:
                continue
            viol = d2[a, p] - d2[a, negatives] + margin
            if strategy == "batch_all":
                for n, v in zip(negatives, viol):
                    if v > 0:
                        out.append(Triplet(a, int(p), int(n)))
            else:
                best = int(np.argmax(viol))
                if viol[best] > 0:
                    out.append(Triplet(a, int(p), int(negatives[best])))
    return out
