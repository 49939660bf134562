"""Small convolutional building blocks shared by the tokenizer, VAE and denoiser."""
from __future__ import annotations

import math

import torch
import torch.nn.functional as F
from torch import nn


def norm(ch: int) -> nn.GroupNorm:
    return nn.GroupNorm(min(8, ch), ch)


class ResBlock(nn.Module):
    def __init__(self, in_ch: int, out_ch: int | None = None, temb_dim: int | None = None):
        super().__init__()
        out_ch = out_ch or in_ch
        self.norm1 = norm(in_ch)
        self.conv1 = nn.Conv2d(in_ch, out_ch, 3, padding=1)
        self.temb = nn.Linear(temb_dim, out_ch) if temb_dim else None
        self.norm2 = norm(out_ch)
        self.conv2 = nn.Conv2d(out_ch, out_ch, 3, padding=1)
        self.skip = nn.Conv2d(in_ch, out_ch, 1) if in_ch != out_ch else nn.Identity()

    def forward(self, x, temb=None):
        h = self.conv1(F.silu(self.norm1(x)))
        if self.temb is not None:
            h = h + self.temb(F.silu(temb))[:, :, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return self.skip(x) + h


class Downsample(nn.Module):
    def __init__(self, in_ch: int, out_ch: int):
        super().__init__()
        self.conv = nn.Conv2d(in_ch, out_ch, 3, stride=2, padding=1)

    def forward(self, x):
        return self.conv(x)


class Upsample(nn.Module):
    def __init__(self, in_ch: int, out_ch: int):
        super().__init__()
        self.conv = nn.Conv2d(in_ch, out_ch, 3, padding=1)

    def forward(self, x):
        return self.conv(F.interpolate(x, scale_factor=2.0, mode="nearest"))


def timestep_embedding(t: torch.Tensor, dim: int, max_period: float = 10000.0) -> torch.Tensor:
    """Sinusoidal embedding of (possibly fractional) timesteps, shape (B, dim)."""
    half = dim // 2
    freqs = torch.exp(-math.log(max_period) * torch.arange(half, dtype=torch.float64) / half)
    args = t.to(torch.float64)[:, None] * freqs[None]
    emb = torch.cat([torch.cos(args), torch.sin(args)], dim=-1)
    return emb.to(torch.get_default_dtype())


def resize(x: torch.Tensor, size: int | tuple[int, int]) -> torch.Tensor:
    """Bilinear resize of an NCHW batch; antialiased when shrinking."""
    if isinstance(size, int):
        size = (size, size)
    if tuple(x.shape[-2:]) == tuple(size):
        return x
    shrink = size[0] < x.shape[-2] or size[1] < x.shape[-1]
    return F.interpolate(x, size=size, mode="bilinear", align_corners=False, antialias=shrink)


class ConvEncoder(nn.Module):
    """Image -> feature grid, downsampling by ``2 ** (len(widths) - 1)``."""

    def __init__(self, in_ch: int, out_ch: int, widths=(16, 32, 64)):
        super().__init__()
        layers: list[nn.Module] = [nn.Conv2d(in_ch, widths[0], 3, padding=1)]
        for a, b in zip(widths[:-1], widths[1:]):
            layers += [Downsample(a, b), ResBlock(b)]
        self.body = nn.Sequential(*layers)
        self.out = nn.Sequential(norm(widths[-1]), nn.SiLU(), nn.Conv2d(widths[-1], out_ch, 1))
        self.factor = 2 ** (len(widths) - 1)

    def forward(self, x):
        return self.out(self.body(x))


class ConvDecoder(nn.Module):
    """Feature grid -> image, upsampling by ``2 ** (len(widths) - 1)``."""

    def __init__(self, in_ch: int, out_ch: int, widths=(64, 32, 16)):
        super().__init__()
        layers: list[nn.Module] = [nn.Conv2d(in_ch, widths[0], 3, padding=1), ResBlock(widths[0])]
        for i, (a, b) in enumerate(zip(widths[:-1], widths[1:])):
            layers.append(Upsample(a, b))
            if i < len(widths) - 2:
                layers.append(ResBlock(b))
        layers += [norm(widths[-1]), nn.SiLU(), nn.Conv2d(widths[-1], out_ch, 3, padding=1)]
        self.body = nn.Sequential(*layers)

    def forward(self, z):
        return self.body(z)


def widths_for(factor: int, base: int) -> tuple[int, ...]:
    n = factor.bit_length() - 1
    if 2 ** n != factor or n < 1:
        raise ValueError(f"downsample factor must be a power of two, got {factor}")
    return tuple(base * 2 ** i for i in range(n + 1))
