"""Backbone families at configurable scale.

Three families share one contract: ``forward_features`` maps a
(B, 3, H, W) batch to a feature bundle holding the last hidden state and,
when the architecture contains attention, the per-block attention maps.

* convnet: stages of conv+batchnorm+swish blocks, stride-2 entry into
  each stage, so spatial size shrinks by 2**stages overall.
* vit: patch embedding, learned positional embeddings, pre-norm
  transformer blocks, optional class token.
* efficientformer_lite: stride-2 conv stem, conv stages whose token
  mixer is a 3x3 average pool, and a final stage that flattens to a
  token sequence and runs attention blocks.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import tensor as T
from .errors import ConfigError, ShapeError
from .nn import BatchNorm, Conv2d, Dense, LayerNorm, Module, MultiHeadAttention, trunc_normal
from .tensor import Tensor

__all__ = [
    "ArchSpec",
    "ScalingCoefficients",
    "FeatureBundle",
    "compound_scale",
    "build_backbone",
    "build_convnet",
    "build_vit",
    "build_efficientformer_lite",
    "forward_features",
]

FAMILIES = ("convnet", "vit", "efficientformer_lite")


@dataclass
class ArchSpec:
    family: str
    input_size: tuple[int, int, int]  # (H, W, 3)
    depth_per_stage: list[int]
    width_per_stage: list[int]
    stages: int
    heads: int = 1
    patch_size: int = 16  # vit only
    downsamples: int | None = None  # efficientformer_lite only
    vit_pooling: str = "mean"  # mean | cls

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ConfigError(f"unknown backbone family '{self.family}'")
        h, w, c = self.input_size
        if c != 3:
            raise ConfigError(f"input must have 3 channels, got {c}")
        if self.stages < 1:
            raise ConfigError("stages must be >= 1")
        if len(self.depth_per_stage) != self.stages or len(self.width_per_stage) != self.stages:
            raise ConfigError(
                f"depth/width lists must have length stages={self.stages}, got "
                f"{len(self.depth_per_stage)}/{len(self.width_per_stage)}"
            )
        if self.heads < 1:
            raise ConfigError("heads must be >= 1")
        if any(d < 1 for d in self.depth_per_stage):
            raise ConfigError("every stage depth must be >= 1")
        if any(w < 1 for w in self.width_per_stage):
            raise ConfigError("every stage width must be >= 1")
        factor = self.downsampling_factor()
        if h % factor or w % factor:
            raise ConfigError(
                f"input {h}x{w} not divisible by the downsampling factor {factor}"
            )
        if self.family == "vit":
            if len(set(self.width_per_stage)) != 1:
                raise ConfigError("vit width must be constant across stages")
            if self.vit_pooling not in ("mean", "cls"):
                raise ConfigError(f"unknown vit pooling '{self.vit_pooling}'")
        if self.family == "efficientformer_lite":
            if self.stages < 2:
                raise ConfigError("efficientformer_lite needs >= 2 stages")
            if self.effective_downsamples() < self.stages - 1:
                raise ConfigError(
                    f"downsamples={self.effective_downsamples()} cannot cover "
                    f"{self.stages - 1} stage transitions"
                )
        width = self.width_per_stage[-1]
        if self.family in ("vit", "efficientformer_lite") and width % self.heads:
            raise ConfigError(f"final width {width} not divisible by heads {self.heads}")

    def effective_downsamples(self) -> int:
        if self.downsamples is not None:
            return self.downsamples
        return self.stages

    def downsampling_factor(self) -> int:
        if self.family == "convnet":
            return 2**self.stages
        if self.family == "vit":
            return self.patch_size
        return 2 ** self.effective_downsamples()

    def token_count(self) -> int:
        h, w, _ = self.input_size
        f = self.downsampling_factor()
        return (h // f) * (w // f)

    def feature_width(self) -> int:
        return self.width_per_stage[-1]


@dataclass
class ScalingCoefficients:
    alpha: float  # depth multiplier base
    beta: float  # width multiplier base
    gamma: float  # resolution multiplier base
    n: float = 0.0

    def __post_init__(self):
        if min(self.alpha, self.beta, self.gamma) < 1.0:
            raise ConfigError("scaling bases must be >= 1")
        if self.n < 0:
            raise ConfigError("compound exponent must be >= 0")


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def _snap(value: int, multiple: int) -> int:
    """Nearest multiple, ties resolved upward."""
    lo = (value // multiple) * multiple
    hi = lo + multiple
    return lo if value - lo < hi - value else hi


def compound_scale(base: ArchSpec, c: ScalingCoefficients) -> ArchSpec:
    da = c.alpha**c.n
    db = c.beta**c.n
    dg = c.gamma**c.n
    depth = [max(1, _round_half_up(d * da)) for d in base.depth_per_stage]
    width = [max(8, _snap(_round_half_up(w * db), 8)) for w in base.width_per_stage]
    h, w, ch = base.input_size
    factor = base.downsampling_factor()
    nh = max(factor, _snap(_round_half_up(h * dg), factor))
    nw = max(factor, _snap(_round_half_up(w * dg), factor))
    scaled = replace(
        base,
        depth_per_stage=depth,
        width_per_stage=width,
        input_size=(nh, nw, ch),
    )
    return scaled


@dataclass
class FeatureBundle:
    last_hidden: Tensor  # (B, C, H, W) for convnet, (B, T, D) otherwise
    attn_maps: list[Tensor] | None = None  # one (B, heads, T, T) per attention block


class ConvBlock(Module):
    """conv -> batchnorm -> swish, the repeated unit of the conv families."""

    def __init__(self, cin: int, cout: int, rng, stride: int = 1, kernel: int = 3):
        super().__init__()
        self.conv = self.add_module(
            "conv", Conv2d(cin, cout, kernel, rng, stride=stride, padding=kernel // 2)
        )
        self.bn = self.add_module("bn", BatchNorm(cout))

    def forward(self, x: Tensor) -> Tensor:
        return T.swish(self.bn(self.conv(x)))


class TransformerBlock(Module):
    """Pre-norm attention + feedforward; forward returns (tokens, attn)."""

    def __init__(self, dim: int, heads: int, rng, mlp_ratio: int = 4):
        super().__init__()
        self.ln1 = self.add_module("ln1", LayerNorm(dim))
        self.attn = self.add_module("attn", MultiHeadAttention(dim, heads, rng))
        self.ln2 = self.add_module("ln2", LayerNorm(dim))
        self.fc1 = self.add_module("fc1", Dense(dim, dim * mlp_ratio, rng))
        self.fc2 = self.add_module("fc2", Dense(dim * mlp_ratio, dim, rng))

    def forward(self, x: Tensor) -> tuple[Tensor, Tensor]:
        a, attn = self.attn(self.ln1(x))
        x = T.add(x, a)
        m = self.fc2(T.gelu(self.fc1(self.ln2(x))))
        return T.add(x, m), attn


class PoolMixBlock(Module):
    """Token mixing by 3x3 zero-padded average pooling, then a conv MLP.

    The pool's self-subtracting residual is folded: x + (pool(x) - x)
    is written directly as pool(x).
    """

    def __init__(self, width: int, rng, mlp_ratio: int = 4):
        super().__init__()
        hidden = width * mlp_ratio
        self.fc1 = self.add_module("fc1", Conv2d(width, hidden, 1, rng))
        self.bn1 = self.add_module("bn1", BatchNorm(hidden))
        self.fc2 = self.add_module("fc2", Conv2d(hidden, width, 1, rng))
        self.bn2 = self.add_module("bn2", BatchNorm(width))

    def forward(self, x: Tensor) -> Tensor:
        x = T.avg_pool2d(x, kernel=3, stride=1, padding=1)
        h = T.swish(self.bn1(self.fc1(x)))
        return T.add(x, self.bn2(self.fc2(h)))


class ConvNetBackbone(Module):
    def __init__(self, spec: ArchSpec, rng):
        super().__init__()
        self.spec = spec
        self.blocks: list[ConvBlock] = []
        cin = 3
        for s in range(spec.stages):
            width = spec.width_per_stage[s]
            for d in range(spec.depth_per_stage[s]):
                stride = 2 if d == 0 else 1
                blk = ConvBlock(cin, width, rng, stride=stride)
                self.add_module(f"stage{s}.block{d}", blk)
                self.blocks.append(blk)
                cin = width

    def forward(self, x: Tensor) -> FeatureBundle:
        for blk in self.blocks:
            x = blk(x)
        return FeatureBundle(x, None)


class ViTBackbone(Module):
    def __init__(self, spec: ArchSpec, rng):
        super().__init__()
        self.spec = spec
        d = spec.width_per_stage[0]
        p = spec.patch_size
        self.patch_proj = self.add_module("patch_proj", Dense(3 * p * p, d, rng))
        self.use_cls = spec.vit_pooling == "cls"
        seq = spec.token_count() + (1 if self.use_cls else 0)
        self.pos = self.add_param("pos", trunc_normal(rng, (seq, d)))
        if self.use_cls:
            self.cls = self.add_param("cls", trunc_normal(rng, (1, d)))
        self.blocks: list[TransformerBlock] = []
        for i in range(sum(spec.depth_per_stage)):
            blk = TransformerBlock(d, spec.heads, rng)
            self.add_module(f"block{i}", blk)
            self.blocks.append(blk)
        self.ln_out = self.add_module("ln_out", LayerNorm(d))

    def forward(self, x: Tensor) -> FeatureBundle:
        b = x.shape[0]
        h, w = x.shape[2], x.shape[3]
        p = self.spec.patch_size
        gh, gw = h // p, w // p
        d = self.spec.width_per_stage[0]
        patches = T.reshape(x, (b, 3, gh, p, gw, p))
        patches = T.transpose(patches, (0, 2, 4, 1, 3, 5))
        patches = T.reshape(patches, (b * gh * gw, 3 * p * p))
        tok = T.reshape(self.patch_proj(patches), (b, gh * gw, d))
        if self.use_cls:
            # replicate the class token across the batch; gather keeps grads
            cls = T.reshape(T.gather_rows(self.cls, np.zeros(b, dtype=np.int64)), (b, 1, d))
            tok = T.concat2(cls, tok, axis=1)
        tok = T.add(tok, self.pos)
        maps = []
        for blk in self.blocks:
            tok, attn = blk(tok)
            maps.append(attn)
        return FeatureBundle(self.ln_out(tok), maps)


class EfficientFormerLiteBackbone(Module):
    def __init__(self, spec: ArchSpec, rng):
        super().__init__()
        self.spec = spec
        stem_downs = spec.effective_downsamples() - (spec.stages - 1)
        w0 = spec.width_per_stage[0]
        self.stem: list[ConvBlock] = []
        cin = 3
        for i in range(stem_downs):
            blk = ConvBlock(cin, w0, rng, stride=2)
            self.add_module(f"stem{i}", blk)
            self.stem.append(blk)
            cin = w0
        self.conv_stages: list[list[Module]] = []
        for s in range(spec.stages - 1):
            width = spec.width_per_stage[s]
            stage: list[Module] = []
            if s > 0:
                down = ConvBlock(spec.width_per_stage[s - 1], width, rng, stride=2)
                self.add_module(f"stage{s}.down", down)
                stage.append(down)
            for d in range(spec.depth_per_stage[s]):
                blk = PoolMixBlock(width, rng)
                self.add_module(f"stage{s}.block{d}", blk)
                stage.append(blk)
            self.conv_stages.append(stage)
        last = spec.stages - 1
        d_last = spec.width_per_stage[last]
        self.last_down = self.add_module(
            "last_down", ConvBlock(spec.width_per_stage[last - 1], d_last, rng, stride=2)
        )
        self.attn_blocks: list[TransformerBlock] = []
        for i in range(spec.depth_per_stage[last]):
            blk = TransformerBlock(d_last, spec.heads, rng)
            self.add_module(f"attnblock{i}", blk)
            self.attn_blocks.append(blk)
        self.ln_out = self.add_module("ln_out", LayerNorm(d_last))

    def forward(self, x: Tensor) -> FeatureBundle:
        for blk in self.stem:
            x = blk(x)
        for stage in self.conv_stages:
            for blk in stage:
                x = blk(x)
        x = self.last_down(x)
        b, c, h, w = x.shape
        tok = T.transpose(T.reshape(x, (b, c, h * w)), (0, 2, 1))
        maps = []
        for blk in self.attn_blocks:
            tok, attn = blk(tok)
            maps.append(attn)
        return FeatureBundle(self.ln_out(tok), maps)


def build_convnet(spec: ArchSpec, rng_seed: int) -> ConvNetBackbone:
    if spec.family != "convnet":
        raise ConfigError(f"build_convnet got family '{spec.family}'")
    return ConvNetBackbone(spec, np.random.default_rng(rng_seed))


def build_vit(spec: ArchSpec, rng_seed: int) -> ViTBackbone:
    if spec.family != "vit":
        raise ConfigError(f"build_vit got family '{spec.family}'")
    return ViTBackbone(spec, np.random.default_rng(rng_seed))


def build_efficientformer_lite(spec: ArchSpec, rng_seed: int) -> EfficientFormerLiteBackbone:
    if spec.family != "efficientformer_lite":
        raise ConfigError(f"build_efficientformer_lite got family '{spec.family}'")
    return EfficientFormerLiteBackbone(spec, np.random.default_rng(rng_seed))


_BUILDERS = {
    "convnet": build_convnet,
    "vit": build_vit,
    "efficientformer_lite": build_efficientformer_lite,
}


def build_backbone(spec: ArchSpec, rng_seed: int) -> Module:
    return _BUILDERS[spec.family](spec, rng_seed)


def forward_features(backbone: Module, batch: Tensor) -> FeatureBundle:
    spec: ArchSpec = backbone.spec
    h, w, _ = spec.input_size
    if batch.ndim != 4 or batch.shape[1] != 3 or batch.shape[2:] != (h, w):
        raise ShapeError(
            f"batch shape {batch.shape} does not match model input (B, 3, {h}, {w})"
        )
    return backbone.forward(batch)
