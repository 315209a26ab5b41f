"""Atomic blocks, stems, and classification heads.

The growth unit is a whole residual block (basic or bottleneck) or a whole
transformer encoder layer, never an individual convolution. Every module
here exposes ``reset_parameters(gen)`` taking an explicit ``torch.Generator``
so that initialization is reproducible without touching global RNG state.
"""

from __future__ import annotations

import math

import torch
from torch import nn
import torch.nn.functional as F


def _conv_kaiming_(weight: torch.Tensor, gen: torch.Generator) -> None:
    # He-normal with fan_out, the standard init for conv + BN + ReLU stacks.
    fan_out = weight.shape[0] * weight[0][0].numel()
    std = math.sqrt(2.0 / fan_out)
    with torch.no_grad():
        weight.normal_(0.0, std, generator=gen)


def _linear_default_(weight: torch.Tensor, bias, gen: torch.Generator) -> None:
    # Matches torch.nn.Linear.reset_parameters (uniform +-1/sqrt(fan_in)).
    bound = 1.0 / math.sqrt(weight.shape[1])
    with torch.no_grad():
        weight.uniform_(-bound, bound, generator=gen)
        if bias is not None:
            bias.uniform_(-bound, bound, generator=gen)


def _trunc_normal_(tensor: torch.Tensor, std: float, gen: torch.Generator) -> None:
    with torch.no_grad():
        tensor.normal_(0.0, std, generator=gen).clamp_(-2.0 * std, 2.0 * std)


def _reset_bn_(bn: nn.BatchNorm2d, zero_weight: bool = False) -> None:
    with torch.no_grad():
        bn.weight.zero_() if zero_weight else bn.weight.fill_(1.0)
        bn.bias.zero_()
        bn.running_mean.zero_()
        bn.running_var.fill_(1.0)
        bn.num_batches_tracked.zero_()


def _reset_ln_(ln: nn.LayerNorm) -> None:
    with torch.no_grad():
        ln.weight.fill_(1.0)
        ln.bias.zero_()


class BasicBlock(nn.Module):
    """Two 3x3 convolutions with identity (or projected) skip connection."""

    def __init__(self, in_channels: int, out_channels: int, stride: int = 1):
        super().__init__()
        self.conv1 = nn.Conv2d(in_channels, out_channels, 3, stride=stride,
                               padding=1, bias=False)
        self.bn1 = nn.BatchNorm2d(out_channels)
        self.conv2 = nn.Conv2d(out_channels, out_channels, 3, padding=1, bias=False)
        self.bn2 = nn.BatchNorm2d(out_channels)
        if stride != 1 or in_channels != out_channels:
            self.shortcut = nn.Sequential(
                nn.Conv2d(in_channels, out_channels, 1, stride=stride, bias=False),
                nn.BatchNorm2d(out_channels),
            )
        else:
            self.shortcut = nn.Sequential()

    def forward(self, x):
        out = F.relu(self.bn1(self.conv1(x)), inplace=True)
        out = self.bn2(self.conv2(out))
        out = out + self.shortcut(x)
        return F.relu(out, inplace=True)

    def reset_parameters(self, gen: torch.Generator, zero_init_last: bool = True):
        _conv_kaiming_(self.conv1.weight, gen)
        _reset_bn_(self.bn1)
        _conv_kaiming_(self.conv2.weight, gen)
        # Zeroing the closing BN makes a freshly added block start near the
        # identity map, which keeps the grow step smooth.
        _reset_bn_(self.bn2, zero_weight=zero_init_last)
        if len(self.shortcut) > 0:
            _conv_kaiming_(self.shortcut[0].weight, gen)
            _reset_bn_(self.shortcut[1])


class BottleneckBlock(nn.Module):
    """1x1 reduce, 3x3 (carries the stride), 1x1 expand; expansion factor 4."""

    EXPANSION = 4

    def __init__(self, in_channels: int, out_channels: int, stride: int = 1):
        super().__init__()
        if out_channels % self.EXPANSION:
            raise ValueError(
                f"bottleneck output width must be a multiple of {self.EXPANSION}, "
                f"got {out_channels}"
            )
        width = out_channels // self.EXPANSION
        self.conv1 = nn.Conv2d(in_channels, width, 1, bias=False)
        self.bn1 = nn.BatchNorm2d(width)
        self.conv2 = nn.Conv2d(width, width, 3, stride=stride, padding=1, bias=False)
        self.bn2 = nn.BatchNorm2d(width)
        self.conv3 = nn.Conv2d(width, out_channels, 1, bias=False)
        self.bn3 = nn.BatchNorm2d(out_channels)
        if stride != 1 or in_channels != out_channels:
            self.shortcut = nn.Sequential(
                nn.Conv2d(in_channels, out_channels, 1, stride=stride, bias=False),
                nn.BatchNorm2d(out_channels),
            )
        else:
            self.shortcut = nn.Sequential()

    def forward(self, x):
        out = F.relu(self.bn1(self.conv1(x)), inplace=True)
        out = F.relu(self.bn2(self.conv2(out)), inplace=True)
        out = self.bn3(self.conv3(out))
        out = out + self.shortcut(x)
        return F.relu(out, inplace=True)

    def reset_parameters(self, gen: torch.Generator, zero_init_last: bool = True):
        for conv, bn in ((self.conv1, self.bn1), (self.conv2, self.bn2)):
            _conv_kaiming_(conv.weight, gen)
            _reset_bn_(bn)
        _conv_kaiming_(self.conv3.weight, gen)
        _reset_bn_(self.bn3, zero_weight=zero_init_last)
        if len(self.shortcut) > 0:
            _conv_kaiming_(self.shortcut[0].weight, gen)
            _reset_bn_(self.shortcut[1])


class EncoderBlock(nn.Module):
    """Pre-norm transformer encoder layer: self-attention + GELU MLP."""

    def __init__(self, dim: int, num_heads: int, mlp_ratio: float = 4.0):
        super().__init__()
        if dim % num_heads:
            raise ValueError(f"embed dim {dim} not divisible by {num_heads} heads")
        self.dim = dim
        self.num_heads = num_heads
        self.head_dim = dim // num_heads
        hidden = int(dim * mlp_ratio)
        self.ln_1 = nn.LayerNorm(dim)
        self.qkv = nn.Linear(dim, 3 * dim)
        self.proj = nn.Linear(dim, dim)
        self.ln_2 = nn.LayerNorm(dim)
        self.fc1 = nn.Linear(dim, hidden)
        self.fc2 = nn.Linear(hidden, dim)

    def forward(self, x):
        b, t, d = x.shape
        h = self.ln_1(x)
        qkv = self.qkv(h).reshape(b, t, 3, self.num_heads, self.head_dim)
        qkv = qkv.permute(2, 0, 3, 1, 4)
        q, k, v = qkv[0], qkv[1], qkv[2]
        attn = (q @ k.transpose(-2, -1)) * self.head_dim ** -0.5
        attn = attn.softmax(dim=-1)
        out = (attn @ v).transpose(1, 2).reshape(b, t, d)
        x = x + self.proj(out)
        h = self.ln_2(x)
        return x + self.fc2(F.gelu(self.fc1(h)))

    def reset_parameters(self, gen: torch.Generator, zero_init_last: bool = True):
        del zero_init_last  # no closing norm to zero in a pre-norm layer
        _reset_ln_(self.ln_1)
        _reset_ln_(self.ln_2)
        for lin in (self.qkv, self.proj, self.fc1, self.fc2):
            _trunc_normal_(lin.weight, 0.02, gen)
            with torch.no_grad():
                lin.bias.zero_()


class ConvStem(nn.Module):
    """Initial convolution + BN + ReLU, optionally followed by max pooling.

    ``pool=3`` is the classic 3x3/stride-2 pool of the deep presets,
    ``pool=2`` a lighter 2x2, ``pool=0`` none (small-input variants).
    """

    def __init__(self, in_channels: int, out_channels: int, kernel_size: int = 7,
                 stride: int = 2, pool: int = 3):
        super().__init__()
        if pool not in (0, 2, 3):
            raise ValueError(f"unsupported stem pool {pool}")
        self.conv = nn.Conv2d(in_channels, out_channels, kernel_size,
                              stride=stride, padding=kernel_size // 2, bias=False)
        self.bn = nn.BatchNorm2d(out_channels)
        if pool == 3:
            self.pool = nn.MaxPool2d(3, stride=2, padding=1)
        elif pool == 2:
            self.pool = nn.MaxPool2d(2, stride=2)
        else:
            self.pool = nn.Identity()

    def forward(self, x):
        return self.pool(F.relu(self.bn(self.conv(x)), inplace=True))

    def reset_parameters(self, gen: torch.Generator):
        _conv_kaiming_(self.conv.weight, gen)
        _reset_bn_(self.bn)


class PatchEmbedStem(nn.Module):
    """Patch tokenizer: strided linear projection of patches, a learnable
    class token prepended, and learnable positional encodings added.

    A stride smaller than the patch size produces overlapping patches
    (stride = patch/2 gives 50% overlap along each axis).
    """

    def __init__(self, in_channels: int, image_size: tuple[int, int],
                 patch_size: int, stride: int, embed_dim: int):
        super().__init__()
        h, w = image_size
        if patch_size > h or patch_size > w:
            raise ValueError(
                f"patch size {patch_size} exceeds image size {image_size}"
            )
        if not 1 <= stride <= patch_size:
            raise ValueError(f"stride {stride} must be in 1..{patch_size}")
        self.image_size = (h, w)
        self.grid = ((h - patch_size) // stride + 1, (w - patch_size) // stride + 1)
        num_patches = self.grid[0] * self.grid[1]
        self.proj = nn.Conv2d(in_channels, embed_dim, patch_size, stride=stride)
        self.class_token = nn.Parameter(torch.zeros(1, 1, embed_dim))
        self.pos_embed = nn.Parameter(torch.zeros(1, num_patches + 1, embed_dim))

    @property
    def token_count(self) -> int:
        """Patch tokens only; the class token adds one more."""
        return self.grid[0] * self.grid[1]

    def forward(self, x):
        b = x.shape[0]
        tokens = self.proj(x[:, :, : self.image_size[0], : self.image_size[1]])
        tokens = tokens.flatten(2).transpose(1, 2)
        cls = self.class_token.expand(b, -1, -1)
        return torch.cat([cls, tokens], dim=1) + self.pos_embed

    def reset_parameters(self, gen: torch.Generator):
        _linear_default_(self.proj.weight.view(self.proj.weight.shape[0], -1),
                         self.proj.bias, gen)
        _trunc_normal_(self.class_token, 0.02, gen)
        _trunc_normal_(self.pos_embed, 0.02, gen)


class ConvHead(nn.Module):
    """Temporary classifier for CNN prefixes: global average pooling, a
    fixed-width projection (a 1x1 convolution applied to the pooled map,
    i.e. a linear layer), ReLU, and the class logits."""

    def __init__(self, in_channels: int, num_classes: int, embed_width: int = 256):
        super().__init__()
        self.proj = nn.Linear(in_channels, embed_width)
        self.fc = nn.Linear(embed_width, num_classes)

    def forward(self, x):
        pooled = x.mean(dim=(2, 3))
        return self.fc(F.relu(self.proj(pooled), inplace=True))

    def reset_parameters(self, gen: torch.Generator):
        _linear_default_(self.proj.weight, self.proj.bias, gen)
        _linear_default_(self.fc.weight, self.fc.bias, gen)


class CnnClassifier(nn.Module):
    """Standard final CNN classifier: global average pooling + affine map."""

    def __init__(self, in_channels: int, num_classes: int):
        super().__init__()
        self.fc = nn.Linear(in_channels, num_classes)

    def forward(self, x):
        return self.fc(x.mean(dim=(2, 3)))

    def reset_parameters(self, gen: torch.Generator):
        _linear_default_(self.fc.weight, self.fc.bias, gen)


class TokenHead(nn.Module):
    """Transformer classifier: layer-norm the class token, then an affine
    map to the classes. Used at every stage, including the final one."""

    def __init__(self, dim: int, num_classes: int):
        super().__init__()
        self.norm = nn.LayerNorm(dim)
        self.fc = nn.Linear(dim, num_classes)

    def forward(self, tokens):
        return self.fc(self.norm(tokens[:, 0]))

    def reset_parameters(self, gen: torch.Generator):
        _reset_ln_(self.norm)
        _linear_default_(self.fc.weight, self.fc.bias, gen)
