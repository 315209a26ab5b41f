"""Backbone descriptions and the networks built from them.

A backbone is declared as a stem plus an ordered sequence of atomic blocks
(:class:`BackboneSpec`), materialized into modules by :func:`build_backbone`,
and consumed as trainable prefixes (stem + first n_k blocks + a temporary
head) via :func:`build_prefix`.
"""

from __future__ import annotations

import contextlib
import hashlib
import json
from dataclasses import dataclass, replace

import torch
from torch import nn

from .blocks import (
    BasicBlock,
    BottleneckBlock,
    CnnClassifier,
    ConvHead,
    ConvStem,
    EncoderBlock,
    PatchEmbedStem,
    TokenHead,
)
from .errors import ConfigError
from .partition import StagePlan, make_plan
from .seeding import torch_generator

RESIDUAL_BASIC = "residual-basic"
RESIDUAL_BOTTLENECK = "residual-bottleneck"
TRANSFORMER = "transformer-encoder"
FAMILIES = (RESIDUAL_BASIC, RESIDUAL_BOTTLENECK, TRANSFORMER)

PROGRESSIVE_HEAD = "progressive"
FINAL_HEAD = "final"


@dataclass(frozen=True)
class ConvStemSpec:
    """Initial convolution (+ optional max pool) ahead of the residual blocks."""

    out_channels: int
    kernel_size: int = 7
    stride: int = 2
    pool: int = 3  # 0 = none, 2 = 2x2/2, 3 = 3x3/2

    def to_dict(self) -> dict:
        return {"kind": "conv", "out_channels": self.out_channels,
                "kernel_size": self.kernel_size, "stride": self.stride,
                "pool": self.pool}


@dataclass(frozen=True)
class PatchTokenizerSpec:
    """Patch tokenizer geometry for transformer stems.

    ``stride == patch_size`` tiles the image with non-overlapping patches;
    ``stride == patch_size // 2`` gives 50% overlap along each axis. The
    token count for an H x W input is ((H-p)/s + 1) * ((W-p)/s + 1), plus
    one class token.
    """

    patch_size: int
    stride: int
    embed_dim: int

    def __post_init__(self):
        if self.patch_size < 1 or self.embed_dim < 1:
            raise ConfigError(f"invalid tokenizer geometry {self}")
        if not 1 <= self.stride <= self.patch_size:
            raise ConfigError(
                f"tokenizer stride {self.stride} must be in 1..{self.patch_size}"
            )

    def token_grid(self, height: int, width: int) -> tuple[int, int]:
        if self.patch_size > height or self.patch_size > width:
            raise ConfigError(
                f"patch size {self.patch_size} exceeds image {height}x{width}"
            )
        return ((height - self.patch_size) // self.stride + 1,
                (width - self.patch_size) // self.stride + 1)

    def token_count(self, height: int, width: int) -> int:
        """Patch tokens only; the class token is prepended on top of these."""
        rows, cols = self.token_grid(height, width)
        return rows * cols

    def to_dict(self) -> dict:
        return {"kind": "patch-embed", "patch_size": self.patch_size,
                "stride": self.stride, "embed_dim": self.embed_dim}


def _stem_from_dict(d: dict):
    kind = d.get("kind")
    if kind == "conv":
        return ConvStemSpec(d["out_channels"], d["kernel_size"], d["stride"],
                            d["pool"])
    if kind == "patch-embed":
        return PatchTokenizerSpec(d["patch_size"], d["stride"], d["embed_dim"])
    raise ConfigError(f"unknown stem kind {kind!r}")


@dataclass(frozen=True)
class BackboneSpec:
    """Declarative description of a block-sequence classifier architecture."""

    family: str
    block_count: int
    stem: ConvStemSpec | PatchTokenizerSpec
    block_widths: tuple[int, ...]
    num_classes: int
    input_shape: tuple[int, int, int]  # (channels, height, width)
    block_strides: tuple[int, ...] = ()
    attn_heads: int = 0
    mlp_ratio: float = 4.0
    head_embed_width: int = 256
    name: str = ""

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ConfigError(
                f"unsupported family {self.family!r}; expected one of {FAMILIES}"
            )
        if self.block_count < 1:
            raise ConfigError(f"block_count must be >= 1, got {self.block_count}")
        if len(self.block_widths) != self.block_count:
            raise ConfigError(
                f"{len(self.block_widths)} widths given for "
                f"{self.block_count} blocks"
            )
        if any(w < 1 for w in self.block_widths):
            raise ConfigError(f"block widths must be >= 1, got {self.block_widths}")
        if self.num_classes < 1:
            raise ConfigError(f"num_classes must be >= 1, got {self.num_classes}")
        if len(self.input_shape) != 3 or any(d < 1 for d in self.input_shape):
            raise ConfigError(f"invalid input shape {self.input_shape}")
        strides = self.block_strides or (1,) * self.block_count
        if len(strides) != self.block_count:
            raise ConfigError(
                f"{len(strides)} strides given for {self.block_count} blocks"
            )
        if any(s not in (1, 2) for s in strides):
            raise ConfigError(f"block strides must be 1 or 2, got {strides}")
        object.__setattr__(self, "block_strides", tuple(strides))
        object.__setattr__(self, "block_widths", tuple(self.block_widths))
        object.__setattr__(self, "input_shape", tuple(self.input_shape))

        if self.is_transformer:
            if not isinstance(self.stem, PatchTokenizerSpec):
                raise ConfigError("transformer backbones need a patch-embed stem")
            if any(w != self.stem.embed_dim for w in self.block_widths):
                raise ConfigError(
                    "encoder widths must all equal the embedding dimension "
                    f"{self.stem.embed_dim}, got {self.block_widths}"
                )
            if self.attn_heads < 1 or self.stem.embed_dim % self.attn_heads:
                raise ConfigError(
                    f"embed dim {self.stem.embed_dim} needs a positive head "
                    f"count that divides it, got {self.attn_heads}"
                )
            self.stem.token_grid(self.input_shape[1], self.input_shape[2])
        else:
            if not isinstance(self.stem, ConvStemSpec):
                raise ConfigError("residual backbones need a conv stem")
            if self.family == RESIDUAL_BOTTLENECK:
                bad = [w for w in self.block_widths
                       if w % BottleneckBlock.EXPANSION]
                if bad:
                    raise ConfigError(
                        f"bottleneck widths must be multiples of "
                        f"{BottleneckBlock.EXPANSION}, got {bad}"
                    )

    @property
    def is_transformer(self) -> bool:
        return self.family == TRANSFORMER

    def width_after(self, n_blocks: int) -> int:
        """Feature width at the cut point after the first ``n_blocks`` blocks."""
        if not 1 <= n_blocks <= self.block_count:
            raise ConfigError(f"prefix length {n_blocks} out of range")
        return self.block_widths[n_blocks - 1]

    def with_classes(self, num_classes: int) -> "BackboneSpec":
        return replace(self, num_classes=num_classes)

    def to_dict(self) -> dict:
        return {
            "family": self.family,
            "block_count": self.block_count,
            "stem": self.stem.to_dict(),
            "block_widths": list(self.block_widths),
            "block_strides": list(self.block_strides),
            "num_classes": self.num_classes,
            "input_shape": list(self.input_shape),
            "attn_heads": self.attn_heads,
            "mlp_ratio": self.mlp_ratio,
            "head_embed_width": self.head_embed_width,
            "name": self.name,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "BackboneSpec":
        return cls(
            family=d["family"],
            block_count=d["block_count"],
            stem=_stem_from_dict(d["stem"]),
            block_widths=tuple(d["block_widths"]),
            num_classes=d["num_classes"],
            input_shape=tuple(d["input_shape"]),
            block_strides=tuple(d["block_strides"]),
            attn_heads=d.get("attn_heads", 0),
            mlp_ratio=d.get("mlp_ratio", 4.0),
            head_embed_width=d.get("head_embed_width", 256),
            name=d.get("name", ""),
        )

    def stable_hash(self) -> str:
        payload = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(payload).hexdigest()[:16]


_RESNET_LAYERS = {18: (2, 2, 2, 2), 34: (3, 4, 6, 3), 50: (3, 4, 6, 3),
                  101: (3, 4, 23, 3), 152: (3, 8, 36, 3)}
_VIT_GEOM = {"b": (12, 768, 12), "l": (24, 1024, 16)}


def _residual_preset(depth: int, num_classes: int, input_size: int,
                     in_channels: int) -> BackboneSpec:
    layers = _RESNET_LAYERS[depth]
    basic = depth in (18, 34)
    base_widths = (64, 128, 256, 512)
    widths, strides = [], []
    for layer_idx, count in enumerate(layers):
        w = base_widths[layer_idx] * (1 if basic else 4)
        for b in range(count):
            widths.append(w)
            strides.append(2 if layer_idx > 0 and b == 0 else 1)
    return BackboneSpec(
        family=RESIDUAL_BASIC if basic else RESIDUAL_BOTTLENECK,
        block_count=sum(layers),
        stem=ConvStemSpec(out_channels=64),
        block_widths=tuple(widths),
        block_strides=tuple(strides),
        num_classes=num_classes,
        input_shape=(in_channels, input_size, input_size),
        name=f"residual-{depth}",
    )


def _transformer_preset(scale: str, patch: int, num_classes: int,
                        input_size: int, in_channels: int,
                        overlap: bool) -> BackboneSpec:
    depth, dim, heads = _VIT_GEOM[scale]
    stride = patch // 2 if overlap else patch
    suffix = "-overlap" if overlap else ""
    return BackboneSpec(
        family=TRANSFORMER,
        block_count=depth,
        stem=PatchTokenizerSpec(patch, stride, dim),
        block_widths=(dim,) * depth,
        num_classes=num_classes,
        input_shape=(in_channels, input_size, input_size),
        attn_heads=heads,
        name=f"transformer-{scale}{patch}{suffix}",
    )


def _tiny_residual(family: str, num_classes: int, input_size: int,
                   in_channels: int) -> BackboneSpec:
    small_input = input_size <= 48
    stem = ConvStemSpec(out_channels=16, kernel_size=3,
                        stride=1 if small_input else 2,
                        pool=0 if small_input else 2)
    if family == RESIDUAL_BASIC:
        widths, name = (16, 32, 32, 64), "tiny-residual-basic"
    else:
        widths, name = (32, 32, 64, 64), "tiny-residual-bottleneck"
    return BackboneSpec(
        family=family,
        block_count=4,
        stem=stem,
        block_widths=widths,
        block_strides=(1, 2, 1, 2),
        num_classes=num_classes,
        input_shape=(in_channels, input_size, input_size),
        name=name,
    )


def _tiny_transformer(num_classes: int, input_size: int,
                      in_channels: int) -> BackboneSpec:
    patch = input_size // 8 if input_size % 8 == 0 and input_size >= 32 else 4
    return BackboneSpec(
        family=TRANSFORMER,
        block_count=6,
        stem=PatchTokenizerSpec(patch, patch, 128),
        block_widths=(128,) * 6,
        num_classes=num_classes,
        input_shape=(in_channels, input_size, input_size),
        attn_heads=4,
        name="tiny-transformer",
    )


_PRESET_ALIASES = {"transformer-b": "transformer-b16",
                   "transformer-l": "transformer-l16"}


def backbone_preset(name: str, num_classes: int, *, input_size: int | None = None,
                    in_channels: int = 3) -> BackboneSpec:
    """Build the spec for a named preset.

    Canonical presets: residual-{18,34,50,101,152}, transformer-{b,l}{16,32}
    (append ``-overlap`` to a 32-patch transformer for 50% patch overlap).
    Desk-scale presets: tiny-residual-basic, tiny-residual-bottleneck,
    tiny-transformer.
    """
    key = _PRESET_ALIASES.get(name.lower(), name.lower())
    if key.startswith("residual-"):
        try:
            depth = int(key.removeprefix("residual-"))
            layers = _RESNET_LAYERS[depth]
        except (ValueError, KeyError):
            raise ConfigError(f"unknown preset {name!r}") from None
        del layers
        return _residual_preset(depth, num_classes, input_size or 224, in_channels)
    if key.startswith("transformer-"):
        body = key.removeprefix("transformer-")
        overlap = body.endswith("-overlap")
        body = body.removesuffix("-overlap")
        if len(body) == 3 and body[0] in _VIT_GEOM and body[1:] in ("16", "32"):
            return _transformer_preset(body[0], int(body[1:]), num_classes,
                                       input_size or 224, in_channels, overlap)
        raise ConfigError(f"unknown preset {name!r}")
    if key == "tiny-residual-basic":
        return _tiny_residual(RESIDUAL_BASIC, num_classes, input_size or 32,
                              in_channels)
    if key == "tiny-residual-bottleneck":
        return _tiny_residual(RESIDUAL_BOTTLENECK, num_classes, input_size or 32,
                              in_channels)
    if key == "tiny-transformer":
        return _tiny_transformer(num_classes, input_size or 32, in_channels)
    raise ConfigError(f"unknown preset {name!r}")


def preset_names() -> tuple[str, ...]:
    return ("residual-18", "residual-34", "residual-50", "residual-101",
            "residual-152", "transformer-b16", "transformer-l16",
            "transformer-b32", "transformer-b32-overlap", "transformer-l32",
            "transformer-l32-overlap", "tiny-residual-basic",
            "tiny-residual-bottleneck", "tiny-transformer")


class OrderedBlockList(nn.Module):
    """The stem plus the full ordered sequence of atomic blocks.

    Prefix networks share these module objects, so training a prefix or
    re-initializing a block is visible to every view of the backbone.
    """

    def __init__(self, spec: BackboneSpec, *, seed: int | None = None,
                 device=None):
        super().__init__()
        self.spec = spec
        ctx = (torch.device(device) if device is not None
               else contextlib.nullcontext())
        with ctx:
            if spec.is_transformer:
                tok = spec.stem
                self.stem = PatchEmbedStem(spec.input_shape[0],
                                           spec.input_shape[1:], tok.patch_size,
                                           tok.stride, tok.embed_dim)
                self.blocks = nn.ModuleList(
                    EncoderBlock(tok.embed_dim, spec.attn_heads, spec.mlp_ratio)
                    for _ in range(spec.block_count)
                )
            else:
                st = spec.stem
                self.stem = ConvStem(spec.input_shape[0], st.out_channels,
                                     st.kernel_size, st.stride, st.pool)
                block_cls = (BasicBlock if spec.family == RESIDUAL_BASIC
                             else BottleneckBlock)
                blocks = []
                in_w = st.out_channels
                for width, stride in zip(spec.block_widths, spec.block_strides):
                    blocks.append(block_cls(in_w, width, stride))
                    in_w = width
                self.blocks = nn.ModuleList(blocks)
        if seed is not None:
            self.reset_all(torch_generator(seed))

    def __len__(self) -> int:
        return len(self.blocks)

    def reset_all(self, gen: torch.Generator) -> None:
        self.stem.reset_parameters(gen)
        for block in self.blocks:
            block.reset_parameters(gen)

    def reset_blocks(self, indices0, gen: torch.Generator) -> None:
        """Re-initialize the 0-based block indices with fresh random weights."""
        for i in indices0:
            self.blocks[i].reset_parameters(gen)


def build_backbone(spec: BackboneSpec, *, seed: int | None = None,
                   device=None) -> OrderedBlockList:
    """Materialize the stem and all atomic blocks described by ``spec``."""
    return OrderedBlockList(spec, seed=seed, device=device)


def make_head(spec: BackboneSpec, prefix_len: int, role: str,
              gen: torch.Generator | None = None) -> nn.Module:
    """Build (and optionally seed) a classification head for a prefix.

    CNN prefixes get the pooled fixed-width projection head while growing
    and the plain pooled affine classifier in the final role; transformer
    prefixes read the class token through layer norm + affine in both roles.
    """
    if role not in (PROGRESSIVE_HEAD, FINAL_HEAD):
        raise ConfigError(f"unknown head role {role!r}")
    width = spec.width_after(prefix_len)
    if spec.is_transformer:
        head = TokenHead(width, spec.num_classes)
    elif role == PROGRESSIVE_HEAD:
        head = ConvHead(width, spec.num_classes, spec.head_embed_width)
    else:
        head = CnnClassifier(width, spec.num_classes)
    if gen is not None:
        head.reset_parameters(gen)
    return head


class PrefixNetwork(nn.Module):
    """Stem + first n_k blocks + a stage head: the trainable unit at stage k.

    Blocks beyond the active prefix are absent from this module, so they
    appear in no forward graph and receive no gradients. The head is
    registered under a stage-specific name (``head_s<k>``, or ``classifier``
    in the final role) so checkpoints from different stages never share
    head parameter names.
    """

    def __init__(self, blocklist: OrderedBlockList, plan: StagePlan, stage: int,
                 head: nn.Module, head_role: str = PROGRESSIVE_HEAD):
        super().__init__()
        spec = blocklist.spec
        if plan.total_blocks != spec.block_count:
            raise ConfigError(
                f"plan covers {plan.total_blocks} blocks but the backbone "
                f"has {spec.block_count}"
            )
        plan.prefix_length(stage)  # validates the stage index
        self.spec = spec
        self.plan = plan
        self.active_stage = stage
        self.head_role = head_role
        self.stem = blocklist.stem
        self.blocks = nn.ModuleList(
            list(blocklist.blocks[: plan.prefix_length(stage)])
        )
        self._head_name = ("classifier" if head_role == FINAL_HEAD
                           else f"head_s{stage}")
        self.add_module(self._head_name, head)

    @property
    def head(self) -> nn.Module:
        return getattr(self, self._head_name)

    @property
    def head_name(self) -> str:
        return self._head_name

    @property
    def n_active_blocks(self) -> int:
        return len(self.blocks)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.dim() != 4 or tuple(x.shape[1:]) != self.spec.input_shape:
            raise ValueError(
                f"expected input of shape (B, {self.spec.input_shape[0]}, "
                f"{self.spec.input_shape[1]}, {self.spec.input_shape[2]}), "
                f"got {tuple(x.shape)}"
            )
        x = self.stem(x)
        for block in self.blocks:
            x = block(x)
        return self.head(x)

    def backbone_forward(self, x: torch.Tensor) -> torch.Tensor:
        """Activations at the cut point (before the head)."""
        x = self.stem(x)
        for block in self.blocks:
            x = block(x)
        return x


def build_prefix(blocklist: OrderedBlockList, plan: StagePlan, stage: int,
                 head: nn.Module | None = None, *,
                 head_role: str | None = None,
                 head_seed: int | None = None) -> PrefixNetwork:
    """Assemble the stage-``stage`` prefix network over shared block modules.

    With ``head=None`` a head of the requested role is constructed
    (progressive by default, the final classifier when ``head_role='final'``)
    and seeded from ``head_seed`` when given.
    """
    role = head_role or PROGRESSIVE_HEAD
    if head is None:
        gen = torch_generator(head_seed) if head_seed is not None else None
        head = make_head(blocklist.spec, plan.prefix_length(stage), role, gen)
    return PrefixNetwork(blocklist, plan, stage, head, role)


def full_network(blocklist: OrderedBlockList, *,
                 head_seed: int | None = None) -> PrefixNetwork:
    """The canonical full-depth network: every block plus the final classifier."""
    plan = make_plan(blocklist.spec.block_count, 1)
    return build_prefix(blocklist, plan, 1, head_role=FINAL_HEAD,
                        head_seed=head_seed)


def parameter_count(module: nn.Module, trainable_only: bool = True) -> int:
    return sum(p.numel() for p in module.parameters()
               if p.requires_grad or not trainable_only)
