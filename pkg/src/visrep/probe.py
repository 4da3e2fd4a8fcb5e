"""Attention heatmap extraction and overlay export.

For an attention-bearing backbone, each head's T x T attention matrix is
average-pooled over one axis into a length-T saliency vector, reshaped to
the S x S token grid, and min-max normalized for display. Raw pooled maps
are preserved alongside so downstream analysis is not stuck with the
normalized version.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .assembly import ModelGraph
from .data import resize_bilinear, write_ppm
from .errors import CapabilityError, ConfigError
from .tensor import Tensor
from .vrt import write_tensor

__all__ = ["HeatmapBundle", "attention_heatmaps", "export_heatmap_overlay"]


@dataclass
class HeatmapBundle:
    per_head: np.ndarray  # (heads, S, S), min-max normalized to [0, 1]
    raw: np.ndarray  # (heads, S, S), pre-normalization pooled saliency
    source: str
    layer_index: int


def attention_heatmaps(
    model: ModelGraph,
    image: Tensor | np.ndarray,
    block: str | int = "last",
    axis: str = "query",
    source: str = "",
) -> HeatmapBundle:
    """Pool one attention block's maps into per-head S x S saliency grids."""
    if axis not in ("query", "key"):
        raise ConfigError(f"axis must be 'query' or 'key', got '{axis}'")
    arr = np.asarray(image.data if isinstance(image, Tensor) else image, dtype=np.float32)
    if arr.ndim == 3:
        arr = arr[None]
    if arr.ndim != 4 or arr.shape[0] != 1:
        raise ConfigError(f"probe takes a single image, got shape {arr.shape}")
    model.set_mode(False)
    bundle = model.features(Tensor(arr))
    maps = bundle.attn_maps
    if not maps:
        raise CapabilityError(
            f"'{model.spec.family}' backbone has no attention to probe"
        )
    if block == "last":
        index = len(maps) - 1
    else:
        index = int(block)
        if not 0 <= index < len(maps):
            raise ConfigError(f"block {index} outside [0, {len(maps)}) attention blocks")
    attn = maps[index].data[0]  # (heads, T, T), rows sum to 1
    if model.spec.family == "vit" and model.spec.vit_pooling == "cls":
        # the prepended class token is not part of the spatial grid
        attn = attn[:, 1:, 1:]
    pooled = attn.mean(axis=1 if axis == "query" else 2)  # (heads, T)
    t = pooled.shape[1]
    s = int(round(np.sqrt(t)))
    if s * s != t:
        raise ConfigError(f"token count {t} is not a square grid")
    raw = pooled.reshape(-1, s, s)
    lo = raw.min(axis=(1, 2), keepdims=True)
    hi = raw.max(axis=(1, 2), keepdims=True)
    span = hi - lo
    flat = span < 1e-12
    norm = np.where(flat, 1.0, (raw - lo) / np.where(flat, 1.0, span))
    return HeatmapBundle(norm.astype(np.float32), raw.astype(np.float32), source, index)


def export_heatmap_overlay(
    image: Tensor | np.ndarray, bundle: HeatmapBundle, out_dir: str | Path
) -> list[Path]:
    """Write one blended PPM per head plus the raw maps as a single tensor."""
    arr = np.asarray(image.data if isinstance(image, Tensor) else image, dtype=np.float32)
    if arr.ndim == 4:
        arr = arr[0]
    if arr.ndim != 3 or arr.shape[0] != 3:
        raise ConfigError(f"overlay needs a (3, H, W) image, got {arr.shape}")
    h, w = arr.shape[1], arr.shape[2]
    gray = arr.mean(axis=0, keepdims=True).repeat(3, axis=0)
    out_dir = Path(out_dir)
    paths: list[Path] = []
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
        for head, grid in enumerate(bundle.per_head):
            up = resize_bilinear(grid[None].astype(np.float32), h, w)[0]
            heat = np.stack([up, 0.2 * up, 1.0 - up])  # cold blue to hot red
            blended = np.clip(0.5 * gray + 0.5 * heat, 0.0, 1.0)
            path = out_dir / f"head{head}.ppm"
            write_ppm(path, blended)
            paths.append(path)
        raw_path = out_dir / "heatmaps.vrt"
        write_tensor(raw_path, bundle.raw)
        paths.append(raw_path)
    except OSError as e:
        raise ConfigError(f"cannot write heatmap under {out_dir}: {e}") from e
    return paths
