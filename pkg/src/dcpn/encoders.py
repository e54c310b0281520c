"""Dual-channel embedding network: pyramid transformer (global) + residual CNN (local)."""

from __future__ import annotations

import math
from typing import Literal

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from pydantic import ConfigDict, model_validator
from pydantic.dataclasses import dataclass

_strict = ConfigDict(extra="forbid", frozen=True)

PYRAMID_STRIDES = (4, 2, 2, 2)  # per-stage downsampling; cumulative 4, 8, 16, 32
TOTAL_STRIDE = 32


@dataclass(config=_strict)
class PyramidEncoderConfig:
    patch_size: int = 16  # masking patch size used by pretraining
    stage_dims: tuple[int, int, int, int] = (16, 32, 64, 128)
    stage_depths: tuple[int, int, int, int] = (1, 1, 1, 1)
    stage_heads: tuple[int, int, int, int] = (1, 2, 4, 8)
    attention_reduction_ratios: tuple[int, int, int, int] = (8, 4, 2, 1)
    mlp_ratio: float = 4.0
    in_chans: int = 3

    @model_validator(mode="after")
    def _check(self):
        dims = self.stage_dims
        if any(b < a for a, b in zip(dims, dims[1:])):
            raise ValueError(f"stage_dims must be nondecreasing, got {dims}")
        for d, h in zip(dims, self.stage_heads):
            if h < 1 or d % h:
                raise ValueError(f"stage dim {d} not divisible by {h} heads")
        if any(r < 1 for r in self.attention_reduction_ratios):
            raise ValueError("attention reduction ratios must be >= 1")
        if self.patch_size % PYRAMID_STRIDES[0] or TOTAL_STRIDE % self.patch_size:
            raise ValueError(f"patch_size must be a multiple of 4 dividing 32, got {self.patch_size}")
        return self

    @property
    def out_dim(self) -> int:
        return self.stage_dims[-1]


@dataclass(config=_strict)
class ConvEncoderConfig:
    widths: tuple[int, ...] = (16, 32, 64)
    blocks: tuple[int, ...] = (1, 1, 1)
    stem_stride: int = 2
    block: Literal["basic", "bottleneck"] = "basic"
    in_chans: int = 3

    @model_validator(mode="after")
    def _check(self):
        if not self.widths or len(self.widths) != len(self.blocks):
            raise ValueError("widths and blocks must be non-empty and equally long")
        if any(b < 1 for b in self.blocks):
            raise ValueError("every stage needs at least one block")
        return self

    @property
    def output_stride(self) -> int:
        # first stage keeps resolution, each later stage halves it
        return self.stem_stride * 2 ** (len(self.widths) - 1)

    @property
    def out_dim(self) -> int:
        return self.widths[-1] * (4 if self.block == "bottleneck" else 1)


PRESETS = {
    "tiny": (PyramidEncoderConfig(), ConvEncoderConfig()),
    # PVT-small and a 50-layer bottleneck network (stem stride 4 folds in the max-pool).
    "full": (
        PyramidEncoderConfig(stage_dims=(64, 128, 320, 512), stage_depths=(3, 4, 6, 3),
                             stage_heads=(1, 2, 5, 8), attention_reduction_ratios=(8, 4, 2, 1)),
        ConvEncoderConfig(widths=(64, 128, 256, 512), blocks=(3, 4, 6, 3), stem_stride=4, block="bottleneck"),
    ),
}


def check_input_size(image_size: int, config: ConvEncoderConfig | None = None) -> None:
    if image_size % TOTAL_STRIDE:
        raise ValueError(f"input size {image_size} is not divisible by {TOTAL_STRIDE}")
    if config is not None and image_size < config.output_stride:
        raise ValueError(f"input size {image_size} smaller than conv output stride {config.output_stride}")


def sincos_pos_embed(dim: int, rows: torch.Tensor, cols: torch.Tensor) -> torch.Tensor:
    """2-D sine-cosine embedding of (row, col) coordinates; returns ``rows.shape + (dim,)``."""
    if dim % 4:
        raise ValueError(f"positional embedding dim {dim} must be divisible by 4")
    quarter = dim // 4
    omega = 1.0 / 10000 ** (torch.arange(quarter, dtype=torch.float64) / quarter)
    parts = []
    for coord in (rows, cols):
        ang = coord.to(torch.float64)[..., None] * omega
        parts += [torch.sin(ang), torch.cos(ang)]
    return torch.cat(parts, dim=-1)


def grid_pos_embed(dim: int, h: int, w: int) -> torch.Tensor:
    rows, cols = torch.meshgrid(torch.arange(h), torch.arange(w), indexing="ij")
    return sincos_pos_embed(dim, rows, cols)


# --- transformer pieces ------------------------------------------------------

class Mlp(nn.Module):
    def __init__(self, dim, hidden):
        super().__init__()
        self.fc1 = nn.Linear(dim, hidden)
        self.fc2 = nn.Linear(hidden, dim)

    def forward(self, x):
        return self.fc2(F.gelu(self.fc1(x)))


class SpatialReductionAttention(nn.Module):
    """Multi-head attention whose keys/values come from a ``sr_ratio``-downsampled token map."""

    def __init__(self, dim, num_heads, sr_ratio=1):
        super().__init__()
        self.num_heads = num_heads
        self.scale = (dim // num_heads) ** -0.5
        self.q = nn.Linear(dim, dim)
        self.kv = nn.Linear(dim, 2 * dim)
        self.proj = nn.Linear(dim, dim)
        self.sr_ratio = sr_ratio
        if sr_ratio > 1:
            self.sr = nn.Conv2d(dim, dim, kernel_size=sr_ratio, stride=sr_ratio)
            self.norm = nn.LayerNorm(dim)

    def forward(self, x, h, w):
        B, L, C = x.shape
        nh = self.num_heads
        q = self.q(x).reshape(B, L, nh, C // nh).transpose(1, 2)
        if self.sr_ratio > 1:
            if h % self.sr_ratio or w % self.sr_ratio:
                raise ValueError(f"token map {h}x{w} not divisible by reduction ratio {self.sr_ratio}")
            x_ = self.sr(x.transpose(1, 2).reshape(B, C, h, w))
            x_ = self.norm(x_.flatten(2).transpose(1, 2))
        else:
            x_ = x
        kv = self.kv(x_).reshape(B, -1, 2, nh, C // nh).permute(2, 0, 3, 1, 4)
        k, v = kv[0], kv[1]
        attn = (q @ k.transpose(-2, -1)) * self.scale
        out = attn.softmax(dim=-1) @ v
        return self.proj(out.transpose(1, 2).reshape(B, L, C))


class PyramidBlock(nn.Module):
    def __init__(self, dim, num_heads, mlp_ratio=4.0, sr_ratio=1):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = SpatialReductionAttention(dim, num_heads, sr_ratio)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = Mlp(dim, int(dim * mlp_ratio))

    def forward(self, x, h, w):
        x = x + self.attn(self.norm1(x), h, w)
        return x + self.mlp(self.norm2(x))


class PatchEmbed(nn.Module):
    def __init__(self, in_chans, dim, stride):
        super().__init__()
        self.proj = nn.Conv2d(in_chans, dim, kernel_size=stride, stride=stride)
        self.norm = nn.LayerNorm(dim)

    def forward(self, x):
        x = self.proj(x)  # B, C, h, w
        return self.norm(x.permute(0, 2, 3, 1))  # B, h, w, C


class PyramidEncoder(nn.Module):
    """Four-stage pyramid transformer with spatial-reduction attention, total stride 32.

    Stage 1 is split out (:meth:`embed` then :meth:`encode_tokens`) so masked pretraining can
    rearrange stage-1 tokens before the transformer sees them.
    """

    def __init__(self, config: PyramidEncoderConfig):
        super().__init__()
        self.config = config
        c = config
        self.patch_embeds = nn.ModuleList()
        self.stages = nn.ModuleList()
        self.norms = nn.ModuleList()
        in_ch = c.in_chans
        for s in range(4):
            self.patch_embeds.append(PatchEmbed(in_ch, c.stage_dims[s], PYRAMID_STRIDES[s]))
            self.stages.append(nn.ModuleList(
                PyramidBlock(c.stage_dims[s], c.stage_heads[s], c.mlp_ratio, c.attention_reduction_ratios[s])
                for _ in range(c.stage_depths[s])
            ))
            self.norms.append(nn.LayerNorm(c.stage_dims[s]))
            in_ch = c.stage_dims[s]
        self.mask_token = nn.Parameter(torch.zeros(c.stage_dims[0]))
        nn.init.normal_(self.mask_token, std=0.02)
        self.apply(_init_transformer_weights)

    @property
    def out_dim(self) -> int:
        return self.config.out_dim

    def embed(self, x: torch.Tensor) -> torch.Tensor:
        """Stage-1 patch embedding: B x 3 x H x W -> B x H/4 x W/4 x C1 (no positions)."""
        return self.patch_embeds[0](x)

    def pos_embed(self, h: int, w: int) -> torch.Tensor:
        return grid_pos_embed(self.config.stage_dims[0], h, w).to(self.mask_token.dtype)

    def encode_tokens(self, tokens: torch.Tensor) -> torch.Tensor:
        """Run all four stages from stage-1 tokens (B x h x w x C1, positions added)."""
        x = tokens
        for s in range(4):
            if s > 0:
                x = self.patch_embeds[s](x.permute(0, 3, 1, 2))
            B, h, w, C = x.shape
            x = x.reshape(B, h * w, C)
            for blk in self.stages[s]:
                x = blk(x, h, w)
            x = self.norms[s](x).reshape(B, h, w, C)
        return x.permute(0, 3, 1, 2)  # B x C4 x H/32 x W/32

    def forward_map(self, x: torch.Tensor) -> torch.Tensor:
        check_input_size(x.shape[-1])
        t = self.embed(x)
        return self.encode_tokens(t + self.pos_embed(t.shape[1], t.shape[2]))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        """Globally pooled final-stage feature, B x C4."""
        return self.forward_map(x).mean(dim=(2, 3))


def _init_transformer_weights(m):
    if isinstance(m, nn.Linear):
        nn.init.trunc_normal_(m.weight, std=0.02)
        if m.bias is not None:
            nn.init.zeros_(m.bias)
    elif isinstance(m, nn.LayerNorm):
        nn.init.ones_(m.weight)
        nn.init.zeros_(m.bias)
    elif isinstance(m, nn.Conv2d):
        fan_out = m.kernel_size[0] * m.kernel_size[1] * m.out_channels
        nn.init.normal_(m.weight, 0.0, math.sqrt(2.0 / fan_out))
        if m.bias is not None:
            nn.init.zeros_(m.bias)


# --- convolutional channel ---------------------------------------------------

class BasicBlock(nn.Module):
    expansion = 1

    def __init__(self, in_ch, width, stride=1):
        super().__init__()
        self.conv1 = nn.Conv2d(in_ch, width, 3, stride, 1, bias=False)
        self.bn1 = nn.BatchNorm2d(width)
        self.conv2 = nn.Conv2d(width, width, 3, 1, 1, bias=False)
        self.bn2 = nn.BatchNorm2d(width)
        self.shortcut = _shortcut(in_ch, width, stride)

    def forward(self, x):
        out = F.relu(self.bn1(self.conv1(x)))
        out = self.bn2(self.conv2(out))
        return F.relu(out + self.shortcut(x))


class Bottleneck(nn.Module):
    expansion = 4

    def __init__(self, in_ch, width, stride=1):
        super().__init__()
        out_ch = width * self.expansion
        self.conv1 = nn.Conv2d(in_ch, width, 1, bias=False)
        self.bn1 = nn.BatchNorm2d(width)
        self.conv2 = nn.Conv2d(width, width, 3, stride, 1, bias=False)
        self.bn2 = nn.BatchNorm2d(width)
        self.conv3 = nn.Conv2d(width, out_ch, 1, bias=False)
        self.bn3 = nn.BatchNorm2d(out_ch)
        self.shortcut = _shortcut(in_ch, out_ch, stride)

    def forward(self, x):
        out = F.relu(self.bn1(self.conv1(x)))
        out = F.relu(self.bn2(self.conv2(out)))
        out = self.bn3(self.conv3(out))
        return F.relu(out + self.shortcut(x))


def _shortcut(in_ch, out_ch, stride):
    if stride == 1 and in_ch == out_ch:
        return nn.Identity()
    return nn.Sequential(nn.Conv2d(in_ch, out_ch, 1, stride, bias=False), nn.BatchNorm2d(out_ch))


class ConvEncoder(nn.Module):
    """Residual CNN; global average pool of the last stage."""

    def __init__(self, config: ConvEncoderConfig):
        super().__init__()
        self.config = config
        block = Bottleneck if config.block == "bottleneck" else BasicBlock
        stem_ch = config.widths[0]
        self.stem = nn.Sequential(
            nn.Conv2d(config.in_chans, stem_ch, 3, config.stem_stride, 1, bias=False),
            nn.BatchNorm2d(stem_ch),
            nn.ReLU(),
        )
        layers = []
        in_ch = stem_ch
        for i, (width, n) in enumerate(zip(config.widths, config.blocks)):
            for j in range(n):
                stride = 2 if (i > 0 and j == 0) else 1
                layers.append(block(in_ch, width, stride))
                in_ch = width * block.expansion
        self.layers = nn.Sequential(*layers)
        for m in self.modules():
            if isinstance(m, nn.Conv2d):
                nn.init.kaiming_normal_(m.weight, mode="fan_out", nonlinearity="relu")

    @property
    def out_dim(self) -> int:
        return self.config.out_dim

    def forward(self, x):
        return self.layers(self.stem(x)).mean(dim=(2, 3))


class ProjectionHead(nn.Module):
    """Single affine map from a backbone's native width to the common dimension D."""

    def __init__(self, in_dim: int, out_dim: int, identity_init: bool = False):
        super().__init__()
        self.linear = nn.Linear(in_dim, out_dim)
        if identity_init:
            if in_dim != out_dim:
                raise ValueError("identity init needs in_dim == out_dim")
            nn.init.eye_(self.linear.weight)
            nn.init.zeros_(self.linear.bias)

    def forward(self, x):
        if x.shape[-1] != self.linear.in_features:
            raise ValueError(f"head expects width {self.linear.in_features}, got {x.shape[-1]}")
        return self.linear(x)


class DualEncoder(nn.Module):
    """Both channels plus their projection heads to the shared dimension ``dim``."""

    def __init__(self, pyramid: PyramidEncoderConfig, conv: ConvEncoderConfig, dim: int = 64):
        super().__init__()
        self.dim = dim
        self.pyramid = PyramidEncoder(pyramid)
        self.conv = ConvEncoder(conv)
        self.head_g = ProjectionHead(self.pyramid.out_dim, dim)
        self.head_l = ProjectionHead(self.conv.out_dim, dim)

    def forward(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        return self.head_g(self.pyramid(x)), self.head_l(self.conv(x))

    def encode_global(self, x):
        return self.head_g(self.pyramid(x))

    def encode_local(self, x):
        return self.head_l(self.conv(x))


# --- functional surface ------------------------------------------------------

def to_nchw(images, dtype=torch.float32, device=None) -> torch.Tensor:
    """B x H x W x C array (numpy or tensor) -> B x C x H x W tensor."""
    t = images if torch.is_tensor(images) else torch.from_numpy(np.array(images, dtype=np.float32))
    if t.ndim != 4 or t.shape[-1] != 3:
        raise ValueError(f"expected B x H x W x 3 images, got {tuple(t.shape)}")
    return t.permute(0, 3, 1, 2).to(dtype=dtype, device=device).contiguous()


def project_to_common_dim(raw_feature: torch.Tensor, head: ProjectionHead) -> torch.Tensor:
    return head(raw_feature)


def pyramid_forward(images, encoder: PyramidEncoder, head: ProjectionHead) -> torch.Tensor:
    x = to_nchw(images, dtype=head.linear.weight.dtype)
    return project_to_common_dim(encoder(x), head)


def conv_forward(images, encoder: ConvEncoder, head: ProjectionHead) -> torch.Tensor:
    x = to_nchw(images, dtype=head.linear.weight.dtype)
    check_input_size(x.shape[-1], encoder.config)
    return project_to_common_dim(encoder(x), head)


def dual_encode(images, model: DualEncoder) -> tuple[torch.Tensor, torch.Tensor]:
    if model.head_g.linear.out_features != model.head_l.linear.out_features:
        raise ValueError("both channels must project to the same dimension")
    return pyramid_forward(images, model.pyramid, model.head_g), conv_forward(images, model.conv, model.head_l)


@torch.no_grad()
def embed_batches(fn, images: np.ndarray, batch_size: int = 128) -> np.ndarray:
    """Apply ``fn`` (NCHW tensor -> B x D tensor) over an NHWC array in batches."""
    out = []
    for i in range(0, len(images), batch_size):
        out.append(fn(to_nchw(images[i:i + batch_size])).cpu().numpy())
    return np.concatenate(out) if out else np.zeros((0, 0), dtype=np.float32)
