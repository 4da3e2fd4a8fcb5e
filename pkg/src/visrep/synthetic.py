"""Procedural shapes corpus so the whole pipeline runs without external data.

Each synthetic listing owns a stable visual identity (shape class, color
shade, size bucket) and several photos of it that vary only in nuisance
factors (position, background noise, overall brightness). A fourth,
review-style image adds heavy noise. The generator writes PPM images plus
four task manifests, a triplet manifest, three retrieval datasets, and a
text-query log.

Identity-vs-nuisance matters: a freshly initialized backbone keys on the
nuisance (brightness, background), so retrieval starts poor; training on
the labels or triplets has real signal to recover.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .data import DatasetManifest, ManifestRow, save_manifest, write_ppm
from .errors import ConfigError

SHAPES = ("rectangle", "ellipse", "cross", "diamond")
COLORS = (
    ("red", (0.88, 0.18, 0.18)),
    ("green", (0.18, 0.80, 0.22)),
    ("blue", (0.20, 0.30, 0.88)),
    ("yellow", (0.90, 0.85, 0.16)),
    ("magenta", (0.85, 0.20, 0.80)),
    ("cyan", (0.18, 0.80, 0.84)),
)
SIZES = ("small", "medium", "large")
_SIZE_FRAC = (0.16, 0.25, 0.34)

__all__ = [
    "SHAPES",
    "COLORS",
    "SIZES",
    "CorpusSpec",
    "CorpusPaths",
    "render_shape",
    "render_listing_image",
    "generate_corpus",
    "text_to_image_stub",
]


def shape_mask(shape: str, size: int, cy: float, cx: float, ry: float, rx: float) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size]
    dy = (yy - cy) / ry
    dx = (xx - cx) / rx
    if shape == "rectangle":
        return (np.abs(dy) <= 1.0) & (np.abs(dx) <= 1.0)
    if shape == "ellipse":
        return dy * dy + dx * dx <= 1.0
    if shape == "cross":
        bar = 1.0 / 3.0
        return ((np.abs(dy) <= bar) & (np.abs(dx) <= 1.0)) | (
            (np.abs(dx) <= bar) & (np.abs(dy) <= 1.0)
        )
    if shape == "diamond":
        return np.abs(dy) + np.abs(dx) <= 1.0
    raise ConfigError(f"unknown shape '{shape}'")


def render_shape(
    shape: str,
    color: tuple[float, float, float],
    size: int,
    radius_frac: float,
    aspect: float,
    rng: np.random.Generator,
    noise: float = 0.08,
    brightness_range: tuple[float, float] = (0.7, 1.3),
    speckle: float = 0.0,
) -> np.ndarray:
    """One (3, size, size) photo: colored figure over a noisy background."""
    ry = radius_frac * size
    rx = ry * aspect
    # keep the figure fully inside the frame
    cy = rng.uniform(ry, size - 1 - ry)
    cx = rng.uniform(rx, size - 1 - rx)
    mask = shape_mask(shape, size, cy, cx, ry, rx)
    bg = rng.uniform(0.25, 0.75)
    img = np.full((3, size, size), bg, dtype=np.float32)
    img += rng.uniform(-noise, noise, img.shape).astype(np.float32)
    img[:, mask] = np.asarray(color, dtype=np.float32)[:, None]
    if speckle > 0.0:
        hits = rng.random((size, size)) < speckle
        img[:, hits] = rng.random((3, int(hits.sum()))).astype(np.float32)
    img *= np.float32(rng.uniform(*brightness_range))
    return np.clip(img, 0.0, 1.0)


@dataclass
class ListingIdentity:
    listing_id: str
    shape_idx: int
    color_idx: int
    size_idx: int
    shade: tuple[float, float, float]
    radius_frac: float
    aspect: float


def render_listing_image(
    ident: ListingIdentity, size: int, rng: np.random.Generator, review: bool = False
) -> np.ndarray:
    if review:
        return render_shape(
            SHAPES[ident.shape_idx],
            ident.shade,
            size,
            ident.radius_frac,
            ident.aspect,
            rng,
            noise=0.25,
            brightness_range=(0.5, 1.5),
            speckle=0.05,
        )
    return render_shape(
        SHAPES[ident.shape_idx],
        ident.shade,
        size,
        ident.radius_frac,
        ident.aspect,
        rng,
    )


@dataclass
class CorpusSpec:
    n_listings: int = 60
    image_size: int = 32
    seed: int = 0
    queries_per_listing: int = 1

    def __post_init__(self):
        if self.n_listings < 8:
            raise ConfigError("need at least 8 listings for usable class coverage")
        if not 8 <= self.image_size <= 64:
            raise ConfigError("image size must be within [8, 64]")
        if not 1 <= self.queries_per_listing <= 2:
            raise ConfigError("queries per listing must be 1 or 2 (two alt photos exist)")


@dataclass
class CorpusPaths:
    root: Path
    task_manifests: dict[str, Path]  # task name -> manifest path
    triplet_manifest: Path
    retrieval_manifests: dict[str, Path]  # dataset name -> path
    query_log: Path


def _identity(i: int, rng: np.random.Generator) -> ListingIdentity:
    shape_idx = int(rng.integers(len(SHAPES)))
    color_idx = int(rng.integers(len(COLORS)))
    size_idx = int(rng.integers(len(SIZES)))
    base = np.asarray(COLORS[color_idx][1])
    shade = np.clip(base + rng.uniform(-0.05, 0.05, 3), 0.0, 1.0)
    frac = _SIZE_FRAC[size_idx] * float(rng.uniform(0.95, 1.05))
    return ListingIdentity(
        listing_id=f"L{i:04d}",
        shape_idx=shape_idx,
        color_idx=color_idx,
        size_idx=size_idx,
        shade=tuple(float(v) for v in shade),
        radius_frac=frac,
        aspect=float(rng.uniform(0.65, 1.0)),
    )


def generate_corpus(out_dir: str | Path, spec: CorpusSpec) -> CorpusPaths:
    """Write the full corpus; every artifact is a pure function of the spec."""
    root = Path(out_dir)
    img_dir = root / "images"
    img_dir.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(spec.seed)
    idents = [_identity(i, rng) for i in range(spec.n_listings)]

    # per listing: photos 0..2 are clean (0 is the hero), photo 3 is review-style
    rel_paths: list[list[str]] = []
    for ident in idents:
        paths = []
        for j in range(4):
            rel = f"images/{ident.listing_id}_{j}.ppm"
            img = render_listing_image(ident, spec.image_size, rng, review=(j == 3))
            write_ppm(root / rel, img)
            paths.append(rel)
        rel_paths.append(paths)

    def manifest(name, task, n_classes, photo, label_of):
        rows = [
            ManifestRow(rel_paths[i][photo], idents[i].listing_id, label_of(idents[i]))
            for i in range(spec.n_listings)
        ]
        m = DatasetManifest(name, task, n_classes, rows, root)
        path = root / f"{name}.tsv"
        save_manifest(path, m)
        return path

    task_manifests = {
        "shape": manifest("shape", "shape", len(SHAPES), 0, lambda d: d.shape_idx),
        "color": manifest("color", "color", len(COLORS), 1, lambda d: d.color_idx),
        "size": manifest("size", "size", len(SIZES), 2, lambda d: d.size_idx),
        "review_shape": manifest(
            "reviews", "review_shape", len(SHAPES), 3, lambda d: d.shape_idx
        ),
    }

    # every photo of every listing, labeled by shape; the triplet regime
    # only needs listing ids to co-occur within batches
    trip_rows = [
        ManifestRow(rel_paths[i][j], idents[i].listing_id, idents[i].shape_idx)
        for i in range(spec.n_listings)
        for j in range(4)
    ]
    triplet_manifest = root / "triplet.tsv"
    save_manifest(
        triplet_manifest,
        DatasetManifest("triplet", "shape", len(SHAPES), trip_rows, root),
    )

    retrieval = {}

    def retrieval_file(name, lines):
        path = root / f"retrieval_{name}.tsv"
        path.write_text("\n".join([name] + lines) + "\n", encoding="utf-8")
        retrieval[name] = path

    q = spec.queries_per_listing
    retrieval_file(
        "intra_listing",
        [f"C\t{rel_paths[i][0]}\t{idents[i].listing_id}" for i in range(spec.n_listings)]
        + [
            f"Q\t{rel_paths[i][1 + k]}\t{idents[i].listing_id}"
            for i in range(spec.n_listings)
            for k in range(q)
        ],
    )
    retrieval_file(
        "intra_listing_reviews",
        [f"C\t{rel_paths[i][0]}\t{idents[i].listing_id}" for i in range(spec.n_listings)]
        + [f"Q\t{rel_paths[i][3]}\t{idents[i].listing_id}" for i in range(spec.n_listings)],
    )

    # click groups: listings sharing shape and color read as co-clicked;
    # groups with a single member cannot produce a positive and are dropped
    groups: dict[tuple[int, int], list[int]] = {}
    for i, ident in enumerate(idents):
        groups.setdefault((ident.shape_idx, ident.color_idx), []).append(i)
    click_lines = []
    for (s, c), members in sorted(groups.items()):
        if len(members) < 2:
            continue
        gid = f"{SHAPES[s]}_{COLORS[c][0]}"
        for i in members:
            click_lines.append(f"C\t{rel_paths[i][0]}\t{gid}")
            click_lines.append(f"Q\t{rel_paths[i][2]}\t{gid}")
    retrieval_file("visually_similar_clicks", click_lines)

    query_log = root / "query_log.tsv"
    log_lines = []
    for i, ident in enumerate(idents):
        text = f"{SIZES[ident.size_idx]} {COLORS[ident.color_idx][0]} {SHAPES[ident.shape_idx]}"
        log_lines.append(f"{text}\t{ident.listing_id}\t{rel_paths[i][0]}")
    query_log.write_text("\n".join(log_lines) + "\n", encoding="utf-8")

    return CorpusPaths(root, task_manifests, triplet_manifest, retrieval, query_log)


def text_to_image_stub(text: str, seed: int, image_size: int = 32) -> np.ndarray:
    """Deterministic stand-in for a text-to-image model.

    Shape, color, and size are chosen by a hash of the text, so equal
    queries always render equal images for a given seed.
    """
    digest = hashlib.sha256(text.encode("utf-8")).digest()
    shape = SHAPES[digest[0] % len(SHAPES)]
    color = COLORS[digest[1] % len(COLORS)][1]
    frac = _SIZE_FRAC[digest[2] % len(SIZES)]
    rng = np.random.default_rng((int.from_bytes(digest[3:11], "little") ^ seed) & (2**63 - 1))
    return render_shape(shape, color, image_size, frac, 0.85, rng)
