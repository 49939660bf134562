"""Conditional latent decoder: frozen base denoiser plus trainable, zero-joined copies.

The encoder half and middle of the base denoiser are cloned. Each clone
receives the quantized token features (projected by a 1x1 convolution and
bilinearly resized to the clone's resolution) added to its input. Clone
outputs pass through zero-initialised 1x1 convolutions and are added to the
frozen skip activations and the frozen middle output, so a freshly built
model computes exactly what the base computes.
"""
from __future__ import annotations

import copy
import logging

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from . import nncore
from .errors import ContractViolation, InvariantViolation, StageOrderError
from .latentdm import Denoiser, VAE, encode_dataset, stratified_timesteps
from .layers import resize
from .nncore import TrainResult, TrainState
from .vqtok import VQTokenizer

log = logging.getLogger(__name__)


def zero_conv(ch: int) -> nn.Conv2d:
    conv = nn.Conv2d(ch, ch, 1)
    nn.init.zeros_(conv.weight)
    nn.init.zeros_(conv.bias)
    return conv


class LaddModel(nn.Module):
    def __init__(self, base: Denoiser, cond_dim: int):
        super().__init__()
        self.base = base
        self.cond_dim = cond_dim
        ch = base.ch
        self.copies = nn.ModuleList([copy.deepcopy(base.enc_blocks[0]),
                                     copy.deepcopy(base.enc_blocks[1]),
                                     copy.deepcopy(base.mid)])
        for p in self.copies.parameters():
            p.requires_grad_(True)
        in_ch = (base.latent_ch, ch, 2 * ch)     # channels entering each copy
        out_ch = (ch, 2 * ch, 2 * ch)            # channels leaving it
        self.cond_adapter = nn.ModuleList([nn.Conv2d(cond_dim, c, 1) for c in in_ch])
        self.zero_convs = nn.ModuleList([zero_conv(c) for c in out_ch])
        self.schedule = base.schedule
        self.T = base.T

    @property
    def frozen_blocks(self) -> list[nn.Module]:
        return [self.base.enc_blocks[0], self.base.enc_blocks[1], self.base.mid]

    def trainable_modules(self) -> list[nn.Module]:
        return [self.copies, self.cond_adapter, self.zero_convs]

    def check_condition(self, z, C) -> None:
        if C.dim() != 4 or C.shape[1] != self.cond_dim or C.shape[0] != z.shape[0]:
            raise ContractViolation(
                f"condition must be (B={z.shape[0]}, {self.cond_dim}, h, w); got {tuple(C.shape)}")

    def predict_v(self, z, t, C, copies_off: bool = False):
        self.check_condition(z, C)
        base = self.base
        t = torch.as_tensor(t).expand(z.shape[0])
        temb = base.time_embed(t)
        hs = base.encode_half(z, temb)
        m = base.mid(hs[-1], temb)

        h, branch = z, []
        for blk, adapt in zip(self.copies, self.cond_adapter):
            h = blk(h + resize(adapt(C), tuple(h.shape[-2:])), temb)
            branch.append(h)
        zc = [conv(b) for conv, b in zip(self.zero_convs, branch)]
        if copies_off:   # drop the whole trainable branch, zero-conv biases included
            zc = [torch.zeros_like(b) for b in zc]
        return base.decode_half([hs[0] + zc[0], hs[1] + zc[1]], m + zc[2], temb)

    def forward(self, z, t, C, copies_off: bool = False):
        """Noise prediction for latents ``z`` at timestep ``t`` given quantized features ``C``."""
        return self.base.v_to_eps(self.predict_v(z, t, C, copies_off), z, t)

    def x0_eps(self, z, t, C):
        """(clean-latent estimate, noise estimate) from one network evaluation."""
        v = self.predict_v(z, t, C)
        return self.base.v_to_x0(v, z, t), self.base.v_to_eps(v, z, t)


def build_ladd(base: Denoiser, cond_dim: int = 32) -> LaddModel:
    if not bool(base.trained):
        raise StageOrderError("train-ldm", "LADD needs a trained base denoiser")
    nncore.freeze(base)
    return LaddModel(base, cond_dim)


def ladd_forward(model: LaddModel, z_t, C, t, copies_off: bool = False):
    return model(z_t, t, C, copies_off=copies_off)


# -- conditions --------------------------------------------------------------

@torch.no_grad()
def tokenize_images(vq: VQTokenizer, images: torch.Tensor, size: int, bs: int = 256) -> torch.Tensor:
    """Token grids of ``images`` resized to the condition size ``size``."""
    return torch.cat([vq.tokenize(images[i:i + bs], size)[0] for i in range(0, len(images), bs)])


def condition_from_tokens(vq: VQTokenizer, tokens: torch.Tensor) -> torch.Tensor:
    return vq.codebook.lookup(tokens)


@torch.no_grad()
def make_condition(vq: VQTokenizer, images: torch.Tensor, size: int) -> torch.Tensor:
    """C = Q(Enc(downsample(x)))."""
    return vq.tokenize(images, size)[1]


def degenerate_condition(vq: VQTokenizer, like: torch.Tensor, token: int = 0) -> torch.Tensor:
    """A condition carrying no information: every cell holds the same code."""
    b, _, h, w = like.shape
    return condition_from_tokens(vq, torch.full((b, h, w), token, dtype=torch.long))


class ConditionedData:
    """Pre-encoded latents per decode size and token grids per condition size."""

    def __init__(self, images: torch.Tensor, vq: VQTokenizer, vae: VAE,
                 latent_sizes, cond_sizes):
        self.n = len(images)
        self.vq = vq
        self.latents = {s: encode_dataset(vae, images, s) for s in latent_sizes}
        self.tokens = {s: tokenize_images(vq, images, s) for s in cond_sizes}
        self.cond_sizes = list(cond_sizes)

    def batch(self, idx, latent_size: int, cond_size: int):
        return self.latents[latent_size][idx], condition_from_tokens(self.vq, self.tokens[cond_size][idx])


def _guarded(modules: dict[str, nn.Module]) -> dict[str, dict]:
    return {k: nncore.snapshot(m) for k, m in modules.items()}


def _assert_unchanged(modules: dict[str, nn.Module], snaps: dict[str, dict]) -> None:
    changed = {k: nncore.changed_params(m, snaps[k]) for k, m in modules.items()}
    changed = {k: v for k, v in changed.items() if v}
    if changed:
        raise InvariantViolation(f"frozen parameters changed: {changed}")


def conditional_loss(model: LaddModel, z0, C, t, eps):
    zt = model.schedule.diffuse(z0, t, eps)
    return F.mse_loss(model(zt, t, C), eps)


def phase_of(step: int, sizes, steps) -> int:
    """Latent resolution in effect at global ``step`` of the progressive schedule."""
    for size, end in zip(sizes, np.cumsum(steps)):
        if step < end:
            return size
    return sizes[-1]


def train_stage1(model: LaddModel, images: torch.Tensor, vq: VQTokenizer, vae: VAE, cfg,
                 data: ConditionedData | None = None, resume: TrainState | None = None,
                 on_checkpoint=None, every: int = 0) -> TrainResult:
    """Progressive-resolution conditional diffusion training of the LADD trainables.

    ``images`` are full-resolution training images. Each step draws a
    condition size from ``cfg.cond_sizes``. One optimizer spans both
    resolution phases. Curve rows are ``(step, loss, resolution)``.
    Raises :class:`InvariantViolation` if any frozen weight moved.
    """
    if not bool(model.base.trained) or not bool(vae.trained):
        raise StageOrderError("train-ldm", "stage-1 needs the trained VAE and base denoiser")
    guarded = {"vq": vq, "vae": vae, "base": model.base}
    snaps = _guarded(guarded)
    torch.manual_seed(cfg.seed + 3)
    gen = torch.Generator().manual_seed(cfg.seed + 3)
    data = data or ConditionedData(images, vq, vae, cfg.stage1_sizes, cfg.cond_sizes)
    total = int(sum(cfg.stage1_steps))
    opt = nncore.Adam(model, cfg.ladd_lr, betas=(cfg.adam_beta1, cfg.adam_beta2),
                      warmup=min(100, total // 10), total_steps=total)
    res = TrainResult()
    bs = min(cfg.ladd_batch, data.n)

    def step_fn(step):
        size = phase_of(step, cfg.stage1_sizes, cfg.stage1_steps)
        idx = torch.randint(data.n, (bs,), generator=gen)
        cs = data.cond_sizes[int(torch.randint(len(data.cond_sizes), (1,), generator=gen))]
        z0, C = data.batch(idx, size, cs)
        t = stratified_timesteps(bs, model.T, gen)
        eps = torch.randn(z0.shape, generator=gen)
        res.curve.append((step, opt.step(conditional_loss(model, z0, C, t, eps)), size))

    nncore.run_steps(total, step_fn, opt, gen, resume, on_checkpoint, every, {"ladd": model})
    res.state = TrainState(total, opt.state, gen.get_state())
    _assert_unchanged(guarded, snaps)
    return res


@torch.no_grad()
def paired_losses(model: LaddModel, z0, C, seed: int = 0) -> tuple[float, float]:
    """(conditional, unconditional-base) noise MSE on the same latents, timesteps and noise."""
    gen = torch.Generator().manual_seed(seed)
    t = stratified_timesteps(len(z0), model.T, gen)
    eps = torch.randn(z0.shape, generator=gen)
    zt = model.schedule.diffuse(z0, t, eps)
    return (F.mse_loss(model(zt, t, C), eps).item(), F.mse_loss(model.base(zt, t), eps).item())
