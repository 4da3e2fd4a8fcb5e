"""Attach heads to a backbone and extract representations.

A ``ModelGraph`` owns one backbone, at most one embedding head, and any
number of named classification heads. Classification heads consume the
same (optionally L2-normalized) embedding that ``extract_embedding``
returns, so logits computed from an extracted embedding match the full
forward pass exactly.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .arch import ArchSpec, FeatureBundle, Module, forward_features
from .errors import ConfigError, ContractError, ShapeError
from .nn import BatchNorm, Conv2d, Dense
from .tensor import Tensor

__all__ = [
    "Embedding",
    "ModelGraph",
    "assemble",
    "attach_embedding_head",
    "attach_classification_heads",
    "extract_embedding",
]

HEAD_STYLES = ("conv_pool", "pooler_dense", "pool_identity")


@dataclass
class Embedding:
    vector: np.ndarray
    listing_id: str
    normalized: bool


def _pool(features: Tensor, pooling: str) -> Tensor:
    """Aggregate (B,C,H,W) or (B,T,D) features into (B, width)."""
    if pooling == "cls":
        if features.ndim != 3:
            raise ShapeError("cls pooling needs token features (B, T, D)")
        b, t, d = features.shape
        swapped = T.transpose(features, (1, 0, 2))
        return T.reshape(T.gather_rows(swapped, np.zeros(1, dtype=np.int64)), (b, d))
    return T.global_avg_pool(features)


class ConvPoolHead(Module):
    """1x1 conv to the target dim, batchnorm, swish, global average pool."""

    def __init__(self, cin: int, dim: int, rng):
        super().__init__()
        self.conv = self.add_module("conv", Conv2d(cin, dim, 1, rng))
        self.bn = self.add_module("bn", BatchNorm(dim))

    def forward(self, bundle: FeatureBundle) -> Tensor:
        x = bundle.last_hidden
        if x.ndim != 4:
            raise ShapeError("conv_pool head needs spatial features (B, C, H, W)")
        return T.global_avg_pool(T.swish(self.bn(self.conv(x))))


class PoolerDenseHead(Module):
    """Pool tokens (or the spatial map), then project to the target dim."""

    def __init__(self, width: int, dim: int, rng, pooling: str = "mean"):
        super().__init__()
        self.pooling = pooling
        self.proj = self.add_module("proj", Dense(width, dim, rng))

    def forward(self, bundle: FeatureBundle) -> Tensor:
        return self.proj(_pool(bundle.last_hidden, self.pooling))


class PoolIdentityHead(Module):
    """Pooling only; the embedding keeps the backbone's feature width."""

    def __init__(self, pooling: str = "mean"):
        super().__init__()
        self.pooling = pooling

    def forward(self, bundle: FeatureBundle) -> Tensor:
        return _pool(bundle.last_hidden, self.pooling)


class ClassHead(Module):
    """batchnorm -> dense, producing task logits from the embedding."""

    def __init__(self, dim: int, num_classes: int, rng):
        super().__init__()
        self.bn = self.add_module("bn", BatchNorm(dim))
        self.fc = self.add_module("fc", Dense(dim, num_classes, rng))

    def forward(self, emb: Tensor) -> Tensor:
        return self.fc(self.bn(emb))


class ModelGraph(Module):
    def __init__(self, backbone: Module, rng_seed: int, normalize: bool = True):
        super().__init__()
        self.spec: ArchSpec = backbone.spec
        self.backbone = self.add_module("backbone", backbone)
        self.embedding_head: Module | None = None
        self.head_style: str | None = None
        self.embed_dim: int | None = None
        self.class_heads: dict[str, ClassHead] = {}
        self.task_classes: dict[str, int] = {}
        self.normalize = normalize
        # heads draw from their own stream so adding one never shifts
        # previously built weights
        self._head_rng = np.random.default_rng(rng_seed)

    # forward paths ----------------------------------------------------

    def features(self, batch: Tensor) -> FeatureBundle:
        return forward_features(self.backbone, batch)

    def embed(self, batch: Tensor) -> Tensor:
        if self.embedding_head is None:
            raise ContractError("no embedding head attached")
        emb = self.embedding_head(self.features(batch))
        if self.normalize:
            emb = T.l2_normalize(emb)
        return emb

    def forward_all(self, batch: Tensor) -> tuple[Tensor, dict[str, Tensor], list | None]:
        bundle = self.features(batch)
        if self.embedding_head is None:
            raise ContractError("no embedding head attached")
        emb = self.embedding_head(bundle)
        if self.normalize:
            emb = T.l2_normalize(emb)
        logits = {name: head(emb) for name, head in self.class_heads.items()}
        return emb, logits, bundle.attn_maps

    def classify(self, batch: Tensor) -> dict[str, Tensor]:
        return self.forward_all(batch)[1]

    def logits_from_embedding(self, emb: Tensor) -> dict[str, Tensor]:
        return {name: head(emb) for name, head in self.class_heads.items()}


def assemble(
    spec: ArchSpec,
    rng_seed: int,
    embed_dim: int | None = None,
    head_style: str = "conv_pool",
    tasks: list[tuple[str, int]] | None = None,
    normalize: bool = True,
) -> ModelGraph:
    """Build backbone plus heads in one deterministic pass."""
    from .arch import build_backbone

    model = ModelGraph(build_backbone(spec, rng_seed), rng_seed + 1, normalize=normalize)
    if embed_dim is not None:
        attach_embedding_head(model, embed_dim, head_style)
    if tasks:
        attach_classification_heads(model, tasks)
    return model


def attach_embedding_head(model: ModelGraph, dim: int, style: str) -> ModelGraph:
    if model.embedding_head is not None:
        raise ContractError("embedding head already attached")
    if style not in HEAD_STYLES:
        raise ConfigError(f"unknown embedding head style '{style}'")
    if dim < 1:
        raise ConfigError(f"embedding dim must be positive, got {dim}")
    spec = model.spec
    width = spec.feature_width()
    pooling = spec.vit_pooling if spec.family == "vit" else "mean"
    if style == "conv_pool":
        if spec.family != "convnet":
            raise ConfigError("conv_pool head needs spatial features (convnet family)")
        head: Module = ConvPoolHead(width, dim, model._head_rng)
    elif style == "pooler_dense":
        head = PoolerDenseHead(width, dim, model._head_rng, pooling=pooling)
    else:
        if dim != width:
            raise ConfigError(
                f"pool_identity keeps the backbone width {width}, cannot produce dim {dim}"
            )
        head = PoolIdentityHead(pooling=pooling)
    model.embedding_head = model.add_module("embedding_head", head)
    model.head_style = style
    model.embed_dim = dim
    return model


def attach_classification_heads(
    model: ModelGraph, tasks: list[tuple[str, int]]
) -> ModelGraph:
    if model.embedding_head is None:
        raise ContractError("attach the embedding head before classification heads")
    for name, num_classes in tasks:
        if name in model.class_heads:
            raise ContractError(f"duplicate task name '{name}'")
        if num_classes < 2:
            raise ConfigError(f"task '{name}' needs >= 2 classes, got {num_classes}")
        head = ClassHead(model.embed_dim, num_classes, model._head_rng)
        model.add_module(f"heads.{name}", head)
        model.class_heads[name] = head
        model.task_classes[name] = num_classes
    return model


def extract_embedding(model: ModelGraph, image: Tensor, listing_id: str = "") -> Embedding:
    """Single-image representation, computed in infer mode."""
    if model.embedding_head is None:
        raise ContractError("no embedding head attached")
    batch = image if image.ndim == 4 else T.reshape(image, (1,) + image.shape)
    was_training = model.training
    model.set_mode(False)
    try:
        vec = model.embed(batch).data[0]
    finally:
        model.set_mode(was_training)
    return Embedding(vector=vec.copy(), listing_id=listing_id, normalized=model.normalize)
