"""
Neural Blocks Module
Shape-preserving feature-map transforms for the proposal network: LSConv,
EMA attention, C3k2_LSConv and C2PSA_EMA, plus the plain YOLO11 blocks they
replace (Conv, Bottleneck, C3k, C3k2, SPPF, Attention, PSABlock, C2PSA).

Every block maps a (B, C, H, W) tensor to a tensor of the same shape unless
its constructor takes distinct in/out widths.
"""

import logging
import math
from dataclasses import dataclass, replace
from typing import Callable, Optional

import torch
import torch.nn as nn
import torch.nn.functional as F

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class BlockConfig:
    channels: int = 64
    ema_groups: int = 32
    lsconv_large_kernel: int = 7
    lsconv_small_kernel: int = 3
    lsconv_groups: int = 8
    n_psa_blocks: int = 1
    c2psa_splits: int = 2
    norm_groups: int = 8

    def __post_init__(self):
        if self.channels < 1:
            raise ValueError(f"channels must be positive, got {self.channels}")
        for name in ("lsconv_large_kernel", "lsconv_small_kernel"):
            k = getattr(self, name)
            if k < 1 or k % 2 == 0:
                raise ValueError(f"{name} must be a positive odd number, got {k}")
        if self.ema_groups < 1 or self.lsconv_groups < 1 or self.norm_groups < 1:
            raise ValueError("group counts must be positive")
        if self.n_psa_blocks < 0:
            raise ValueError(f"n_psa_blocks must be >= 0, got {self.n_psa_blocks}")
        if self.c2psa_splits < 2:
            raise ValueError(f"c2psa_splits must be >= 2, got {self.c2psa_splits}")

    def with_channels(self, channels: int) -> "BlockConfig":
        return replace(self, channels=channels)


def group_norm(channels: int, groups: int = 8) -> nn.GroupNorm:
    return nn.GroupNorm(math.gcd(channels, groups), channels)


def count_parameters(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())


def _check_channels(x: torch.Tensor, expected: int, block: str) -> None:
    if x.dim() != 4:
        raise ValueError(f"{block} expects a 4-D feature map, got shape {tuple(x.shape)}")
    if x.shape[1] != expected:
        raise ValueError(f"{block} expects {expected} channels, got {x.shape[1]}")


class Conv(nn.Module):
    """Convolution + GroupNorm + SiLU."""

    def __init__(self, c1, c2, k=1, s=1, g=1, act=True, norm_groups=8):
        super().__init__()
        self.conv = nn.Conv2d(c1, c2, k, s, k // 2, groups=g, bias=False)
        self.norm = group_norm(c2, norm_groups)
        self.act = nn.SiLU() if act else nn.Identity()

    def forward(self, x):
        return self.act(self.norm(self.conv(x)))


class LSConv(nn.Module):
    """
    Large-kernel perception feeding small-kernel dynamic aggregation.

    A 7x7 depthwise branch summarises context; a pointwise projection of that
    context predicts, per pixel and per channel group, a 3x3 kernel (softmax over
    kernel positions) that aggregates the input neighbourhood. A pointwise
    projection mixes the aggregated channels.
    """

    def __init__(self, channels: int, cfg: BlockConfig = BlockConfig()):
        super().__init__()
        self.channels = channels
        self.groups = math.gcd(channels, cfg.lsconv_groups)
        self.k = cfg.lsconv_small_kernel
        hidden = max(channels // 2, 1)
        large = cfg.lsconv_large_kernel

        self.perceive_in = nn.Conv2d(channels, hidden, 1, bias=False)
        self.perceive_dw = nn.Conv2d(hidden, hidden, large, padding=large // 2, groups=hidden, bias=False)
        self.perceive_norm = group_norm(hidden, cfg.norm_groups)
        self.kernel_gen = nn.Conv2d(hidden, self.groups * self.k * self.k, 1)
        self.norm = group_norm(channels, cfg.norm_groups)
        self.proj = nn.Conv2d(channels, channels, 1, bias=False)
        self.act = nn.SiLU()

    def dynamic_kernels(self, x: torch.Tensor) -> torch.Tensor:
        """(B, groups, k*k, H, W) aggregation weights, each summing to 1 over kernel positions."""
        b, _, h, w = x.shape
        context = self.act(self.perceive_norm(self.perceive_dw(self.act(self.perceive_in(x)))))
        logits = self.kernel_gen(context).view(b, self.groups, self.k * self.k, h, w)
        return logits.softmax(dim=2)

    def forward(self, x):
        _check_channels(x, self.channels, "LSConv")
        b, c, h, w = x.shape
        kernels = self.dynamic_kernels(x)
        patches = F.unfold(x, self.k, padding=self.k // 2)
        patches = patches.view(b, self.groups, c // self.groups, self.k * self.k, h, w)
        aggregated = (patches * kernels.unsqueeze(2)).sum(dim=3).reshape(b, c, h, w)
        return self.proj(self.norm(aggregated))


class EMA(nn.Module):
    """Efficient multi-scale attention with cross-spatial learning over channel groups."""

    def __init__(self, channels: int, groups: int = 32):
        super().__init__()
        if groups < 1 or channels % groups != 0:
            raise ValueError(f"EMA needs channels ({channels}) divisible by groups ({groups})")
        self.channels = channels
        self.groups = groups
        cg = channels // groups
        self.softmax = nn.Softmax(dim=-1)
        self.agp = nn.AdaptiveAvgPool2d((1, 1))
        self.pool_h = nn.AdaptiveAvgPool2d((None, 1))
        self.pool_w = nn.AdaptiveAvgPool2d((1, None))
        self.gn = nn.GroupNorm(cg, cg)
        self.conv1x1 = nn.Conv2d(cg, cg, kernel_size=1)
        self.conv3x3 = nn.Conv2d(cg, cg, kernel_size=3, padding=1)

    def gate(self, x: torch.Tensor) -> torch.Tensor:
        """(B*groups, 1, H, W) sigmoid rescaling factors."""
        _check_channels(x, self.channels, "EMA")
        b, c, h, w = x.shape
        group_x = x.reshape(b * self.groups, -1, h, w)
        x_h = self.pool_h(group_x)
        x_w = self.pool_w(group_x).permute(0, 1, 3, 2)
        hw = self.conv1x1(torch.cat([x_h, x_w], dim=2))
        x_h, x_w = torch.split(hw, [h, w], dim=2)
        x1 = self.gn(group_x * x_h.sigmoid() * x_w.permute(0, 1, 3, 2).sigmoid())
        x2 = self.conv3x3(group_x)

        cg = c // self.groups
        x11 = self.softmax(self.agp(x1).reshape(b * self.groups, -1, 1).permute(0, 2, 1))
        x12 = x2.reshape(b * self.groups, cg, -1)
        x21 = self.softmax(self.agp(x2).reshape(b * self.groups, -1, 1).permute(0, 2, 1))
        x22 = x1.reshape(b * self.groups, cg, -1)
        weights = (torch.matmul(x11, x12) + torch.matmul(x21, x22)).reshape(b * self.groups, 1, h, w)
        return weights.sigmoid()

    def forward(self, x):
        _check_channels(x, self.channels, "EMA")
        b, c, h, w = x.shape
        group_x = x.reshape(b * self.groups, -1, h, w)
        return (group_x * self.gate(x)).reshape(b, c, h, w)


class Bottleneck(nn.Module):
    def __init__(self, c1, c2, shortcut=True, k=3, e=0.5, norm_groups=8):
        super().__init__()
        c_ = int(c2 * e)
        self.cv1 = Conv(c1, c_, k, norm_groups=norm_groups)
        self.cv2 = Conv(c_, c2, k, norm_groups=norm_groups)
        self.add = shortcut and c1 == c2

    def forward(self, x):
        y = self.cv2(self.cv1(x))
        return x + y if self.add else y


class LSBottleneck(nn.Module):
    """Bottleneck whose two k x k convolutions are LSConv layers."""

    def __init__(self, c, shortcut=True, cfg: BlockConfig = BlockConfig()):
        super().__init__()
        self.cv1 = LSConv(c, cfg)
        self.cv2 = LSConv(c, cfg)
        self.act = nn.SiLU()
        self.add = shortcut

    def forward(self, x):
        y = self.act(self.cv2(self.act(self.cv1(x))))
        return x + y if self.add else y


class C3k(nn.Module):
    def __init__(self, c1, c2, n=1, e=0.5, block: Optional[Callable[[int], nn.Module]] = None, norm_groups=8):
        super().__init__()
        c_ = int(c2 * e)
        block = block or (lambda c: Bottleneck(c, c, True, 3, 1.0, norm_groups))
        self.cv1 = Conv(c1, c_, 1, norm_groups=norm_groups)
        self.cv2 = Conv(c1, c_, 1, norm_groups=norm_groups)
        self.cv3 = Conv(2 * c_, c2, 1, norm_groups=norm_groups)
        self.m = nn.Sequential(*(block(c_) for _ in range(n)))

    def forward(self, x):
        return self.cv3(torch.cat((self.m(self.cv1(x)), self.cv2(x)), 1))


class C3k2(nn.Module):
    """Split -> bottleneck stack -> concat -> pointwise fuse."""

    def __init__(self, c1, c2, n=1, c3k=False, e=0.5, shortcut=True, kernel=3,
                 block: Optional[Callable[[int], nn.Module]] = None, norm_groups=8):
        super().__init__()
        self.c = int(c2 * e)
        block = block or (lambda c: Bottleneck(c, c, shortcut, kernel, 1.0, norm_groups))
        self.cv1 = Conv(c1, 2 * self.c, 1, norm_groups=norm_groups)
        self.cv2 = Conv((2 + n) * self.c, c2, 1, norm_groups=norm_groups)
        self.m = nn.ModuleList(
            C3k(self.c, self.c, 2, block=block, norm_groups=norm_groups) if c3k else block(self.c)
            for _ in range(n)
        )

    def forward(self, x):
        y = list(self.cv1(x).chunk(2, 1))
        y.extend(m(y[-1]) for m in self.m)
        return self.cv2(torch.cat(y, 1))


class C3k2LSConv(C3k2):
    """C3k2 with every internal k x k convolution replaced by LSConv."""

    def __init__(self, c1, c2, n=1, c3k=False, e=0.5, shortcut=True,
                 cfg: BlockConfig = BlockConfig(), level: Optional[str] = None):
        super().__init__(c1, c2, n, c3k, e, shortcut,
                         block=lambda c: LSBottleneck(c, shortcut, cfg), norm_groups=cfg.norm_groups)
        self.level = level


class SPPF(nn.Module):
    def __init__(self, c1, c2, k=5, norm_groups=8):
        super().__init__()
        c_ = c1 // 2
        self.cv1 = Conv(c1, c_, 1, norm_groups=norm_groups)
        self.cv2 = Conv(c_ * 4, c2, 1, norm_groups=norm_groups)
        self.m = nn.MaxPool2d(kernel_size=k, stride=1, padding=k // 2)

    def forward(self, x):
        y = [self.cv1(x)]
        y.extend(self.m(y[-1]) for _ in range(3))
        return self.cv2(torch.cat(y, 1))


class Attention(nn.Module):
    """Multi-head self-attention over spatial positions with a depthwise positional term."""

    def __init__(self, dim, attn_ratio=0.5, norm_groups=8):
        super().__init__()
        heads = max(1, dim // 64)
        while dim % heads:
            heads -= 1
        self.num_heads = heads
        self.head_dim = dim // heads
        self.key_dim = max(1, int(self.head_dim * attn_ratio))
        self.scale = self.key_dim ** -0.5
        h = dim + 2 * self.key_dim * heads
        self.qkv = Conv(dim, h, 1, act=False, norm_groups=norm_groups)
        self.proj = Conv(dim, dim, 1, act=False, norm_groups=norm_groups)
        self.pe = Conv(dim, dim, 3, g=dim, act=False, norm_groups=norm_groups)

    def forward(self, x):
        b, c, h, w = x.shape
        n = h * w
        qkv = self.qkv(x).view(b, self.num_heads, 2 * self.key_dim + self.head_dim, n)
        q, k, v = qkv.split([self.key_dim, self.key_dim, self.head_dim], dim=2)
        attn = ((q.transpose(-2, -1) @ k) * self.scale).softmax(dim=-1)
        x = (v @ attn.transpose(-2, -1)).view(b, c, h, w) + self.pe(v.reshape(b, c, h, w))
        return self.proj(x)


class PSABlock(nn.Module):
    def __init__(self, c, attn: Optional[nn.Module] = None, shortcut=True, norm_groups=8):
        super().__init__()
        self.attn = attn if attn is not None else Attention(c, norm_groups=norm_groups)
        self.ffn = nn.Sequential(Conv(c, c * 2, 1, norm_groups=norm_groups),
                                 Conv(c * 2, c, 1, act=False, norm_groups=norm_groups))
        self.add = shortcut

    def forward(self, x):
        x = x + self.attn(x) if self.add else self.attn(x)
        return x + self.ffn(x) if self.add else self.ffn(x)


class PSABlockEMA(PSABlock):
    """EMA attention + feed-forward network, both with residual connections."""

    def __init__(self, c, cfg: BlockConfig = BlockConfig()):
        super().__init__(c, attn=EMA(c, cfg.ema_groups), norm_groups=cfg.norm_groups)


class C2PSA(nn.Module):
    """
    1x1 conv -> channel split into `splits` groups -> the last group runs through
    the PSA stack -> concat -> 1x1 conv back to the input width.
    """

    def __init__(self, c1, n=1, splits=2, block: Optional[Callable[[int], nn.Module]] = None, norm_groups=8):
        super().__init__()
        if c1 % splits != 0:
            raise ValueError(f"C2PSA needs channels ({c1}) divisible by splits ({splits})")
        self.c1 = c1
        self.c = c1 // splits
        block = block or (lambda c: PSABlock(c, norm_groups=norm_groups))
        self.cv1 = Conv(c1, splits * self.c, 1, norm_groups=norm_groups)
        self.cv2 = Conv(splits * self.c, c1, 1, norm_groups=norm_groups)
        self.m = nn.Sequential(*(block(self.c) for _ in range(n)))

    def forward(self, x):
        _check_channels(x, self.c1, type(self).__name__)
        parts = list(self.cv1(x).split(self.c, dim=1))
        parts[-1] = self.m(parts[-1])
        return self.cv2(torch.cat(parts, 1))


class C2PSAEMA(C2PSA):
    def __init__(self, c1, cfg: BlockConfig = BlockConfig()):
        if c1 % cfg.c2psa_splits or (c1 // cfg.c2psa_splits) % cfg.ema_groups:
            raise ValueError(f"C2PSA_EMA with {c1} channels and {cfg.c2psa_splits} splits "
                             f"does not divide into {cfg.ema_groups} EMA groups")
        super().__init__(c1, cfg.n_psa_blocks, cfg.c2psa_splits,
                         block=lambda c: PSABlockEMA(c, cfg), norm_groups=cfg.norm_groups)
