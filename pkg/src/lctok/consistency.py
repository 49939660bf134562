"""Few-step decoding: consistency distillation of the conditional decoder and pixel-loss finetuning.

The consistency function uses the usual skip/out parameterisation

    f(z, C, t) = c_skip(t) * z + c_out(t) * x0_hat(z, C, t)

with ``c_skip = s^2 / ((t - b)^2 k^2 + s^2)`` and ``c_out = (t - b) k / sqrt(...)``
(``s`` = 0.5, ``k`` = 10, ``b`` = boundary timestep). For ``t <= b`` the input
is returned as is, so the boundary condition holds exactly by construction.
"""
from __future__ import annotations

import copy
import logging
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from . import nncore
from .errors import ContractViolation, StageOrderError, TrainingDivergence
from .evalkit import PerceptualProxy, get_proxy
from .ladd import ConditionedData, LaddModel, _assert_unchanged, _guarded, conditional_loss
from .latentdm import VAE, stratified_timesteps
from .nncore import TrainResult, TrainState
from .vqtok import VQTokenizer

log = logging.getLogger(__name__)

SIGMA_DATA = 0.5
TIME_SCALE = 10.0
MODES = ("one_step", "two_step")


class ConsistencyDecoder(nn.Module):
    def __init__(self, net: LaddModel, boundary_t: int = 0, step_mode: str = "one_step",
                 t_mid: int | None = None, latent_hw: int = 16, intervals: int = 32):
        super().__init__()
        if step_mode not in MODES:
            raise ContractViolation(f"step_mode must be one of {MODES}")
        self.net = net
        self.boundary_t = boundary_t
        self.step_mode = step_mode
        self.T = net.T
        self.t_mid = self.T // 2 if t_mid is None else t_mid
        self.latent_hw = latent_hw
        self.intervals = intervals
        self.latent_ch = net.base.latent_ch
        self.schedule = net.schedule
        self.register_buffer("distilled", torch.tensor(False))

    def scalings(self, t, like):
        t = torch.as_tensor(t, dtype=like.dtype).expand(like.shape[0]).view(-1, 1, 1, 1)
        u = (t - self.boundary_t).clamp(min=0) * TIME_SCALE
        c_skip = SIGMA_DATA ** 2 / (u ** 2 + SIGMA_DATA ** 2)
        c_out = u / torch.sqrt(u ** 2 + SIGMA_DATA ** 2)
        return c_skip, c_out

    def forward(self, z, C, t):
        t = torch.as_tensor(t, dtype=torch.long).expand(z.shape[0])
        clean = (t <= self.boundary_t).view(-1, 1, 1, 1)
        if bool(clean.all()):
            return z
        x0, _ = self.net.x0_eps(z, t, C)
        c_skip, c_out = self.scalings(t, z)
        return torch.where(clean, z, c_skip * z + c_out * x0)

    def latent_shape(self, n: int) -> tuple[int, int, int, int]:
        return (n, self.latent_ch, self.latent_hw, self.latent_hw)


def decoder_from_teacher(teacher: LaddModel, cfg) -> ConsistencyDecoder:
    """Student initialised from every teacher weight; all of it trainable."""
    net = copy.deepcopy(teacher)
    for p in net.parameters():
        p.requires_grad_(True)
    net.train()
    return ConsistencyDecoder(net, cfg.boundary_t, cfg.mode, cfg.resolved_t_mid(),
                              cfg.decode_size // cfg.vae_factor, cfg.cm_intervals)


@torch.no_grad()
def ema_update(ema: nn.Module, online: nn.Module, decay: float) -> None:
    for pe, po in zip(ema.parameters(), online.parameters()):
        pe.mul_(decay).add_(po.detach(), alpha=1.0 - decay)


def teacher_grid(T: int, intervals: int) -> list[int]:
    return [int(x) for x in np.round(np.linspace(0, T, intervals + 1))]


@torch.no_grad()
def teacher_step(teacher: LaddModel, z, C, t, t_prev):
    """One deterministic DDIM step of the teacher from ``t`` to ``t_prev``."""
    x0, eps = teacher.x0_eps(z, t, C)
    a, b = teacher.schedule.coeffs(t_prev, z)
    return a * x0 + b * eps


def consistency_loss(student: ConsistencyDecoder, target_net: ConsistencyDecoder, teacher: LaddModel,
                     z0, C, k, eps):
    """Self-consistency between adjacent grid points; ``k`` indexes the later point per row."""
    grid = torch.tensor(teacher_grid(student.T, student.intervals))
    t, tp = grid[k], grid[k - 1]
    zt = teacher.schedule.diffuse(z0, t, eps)
    with torch.no_grad():
        target = target_net(teacher_step(teacher, zt, C, t, tp), C, tp)
    return F.mse_loss(student(zt, C, t), target)


@torch.no_grad()
def consistency_residual(dec: ConsistencyDecoder, teacher: LaddModel, z0, C, seed: int = 0,
                         intervals: int = 32) -> float:
    """Mean squared gap between f at adjacent points of the teacher's ODE path."""
    gen = torch.Generator().manual_seed(seed)
    grid = torch.tensor(teacher_grid(dec.T, intervals))
    k = torch.randint(1, intervals + 1, (len(z0),), generator=gen)
    eps = torch.randn(z0.shape, generator=gen)
    t, tp = grid[k], grid[k - 1]
    zt = teacher.schedule.diffuse(z0, t, eps)
    ztp = teacher_step(teacher, zt, C, t, tp)
    return F.mse_loss(dec(zt, C, t), dec(ztp, C, tp)).item()


def init_distill(teacher: LaddModel, cfg) -> tuple[ConsistencyDecoder, ConsistencyDecoder]:
    """(online student, EMA target), both starting from the teacher's weights."""
    student = decoder_from_teacher(teacher, cfg)
    ema = copy.deepcopy(student)
    nncore.freeze(ema)
    return student, ema


def distill(teacher: LaddModel, data: ConditionedData, cfg,
            student: ConsistencyDecoder | None = None, ema: ConsistencyDecoder | None = None,
            resume: TrainState | None = None, on_checkpoint=None, every: int = 0):
    """Latent consistency distillation with an EMA target. Returns ``(decoder, TrainResult)``.

    The returned decoder is the EMA network, marked distilled and made
    trainable for the pixel-loss phase.
    """
    if not bool(teacher.base.trained):
        raise StageOrderError("train-ladd", "distillation needs a trained stage-1 teacher")
    nncore.freeze(teacher)
    torch.manual_seed(cfg.seed + 4)
    gen = torch.Generator().manual_seed(cfg.seed + 4)
    if student is None or ema is None:
        student, ema = init_distill(teacher, cfg)
    opt = nncore.Adam(student, cfg.cm_lr, betas=(cfg.adam_beta1, cfg.adam_beta2),
                      warmup=min(100, cfg.cm_steps // 10), total_steps=cfg.cm_steps)
    res = TrainResult()
    bs = min(cfg.cm_batch, data.n)

    def step_fn(step):
        idx = torch.randint(data.n, (bs,), generator=gen)
        cs = data.cond_sizes[int(torch.randint(len(data.cond_sizes), (1,), generator=gen))]
        z0, C = data.batch(idx, cfg.decode_size, cs)
        k = torch.randint(1, cfg.cm_intervals + 1, (bs,), generator=gen)
        eps = torch.randn(z0.shape, generator=gen)
        loss = opt.step(consistency_loss(student, ema, teacher, z0, C, k, eps))
        ema_update(ema, student, cfg.cm_ema)
        res.curve.append((step, loss))

    nncore.run_steps(cfg.cm_steps, step_fn, opt, gen, resume, on_checkpoint, every,
                     {"student": student, "ema": ema})
    res.state = TrainState(cfg.cm_steps, opt.state, gen.get_state())
    return finalize_distilled(ema, cfg), res


def finalize_distilled(ema: ConsistencyDecoder, cfg) -> ConsistencyDecoder:
    ema.distilled.fill_(True)
    ema.step_mode = cfg.mode
    for p in ema.parameters():
        p.requires_grad_(True)
    ema.train()
    return ema


# -- decoding ----------------------------------------------------------------

def decode_noise(shape: Sequence[int], seeds: int | Sequence[int]):
    """Initial noise and re-noising noise, drawn from one stream per batch row."""
    if isinstance(seeds, int):
        seeds = [seeds * 1_000_003 + i for i in range(shape[0])]
    if len(seeds) != shape[0]:
        raise ContractViolation("need one seed per batch row")
    first, second = [], []
    for s in seeds:
        g = torch.Generator().manual_seed(int(s))
        first.append(torch.randn(tuple(shape[1:]), generator=g))
        second.append(torch.randn(tuple(shape[1:]), generator=g))
    return torch.stack(first), torch.stack(second)


def decode_one_step(dec: ConsistencyDecoder, C, seed: int | Sequence[int] = 0):
    eps, _ = decode_noise(dec.latent_shape(C.shape[0]), seed)
    return dec(eps.to(C.dtype), C, dec.T)


def decode_two_step(dec: ConsistencyDecoder, C, seed: int | Sequence[int] = 0):
    """First application under stop-gradient, re-noise to ``t_mid``, second application."""
    eps, eps2 = decode_noise(dec.latent_shape(C.shape[0]), seed)
    z_mid = nncore.stop_gradient(dec(eps.to(C.dtype), C, dec.T))
    return dec(dec.schedule.diffuse(z_mid, dec.t_mid, eps2.to(C.dtype)), C, dec.t_mid)


def decode(dec: ConsistencyDecoder, C, seed=0, mode: str | None = None):
    mode = mode or dec.step_mode
    if mode not in MODES:
        raise ContractViolation(f"mode must be one of {MODES}")
    return decode_one_step(dec, C, seed) if mode == "one_step" else decode_two_step(dec, C, seed)


def recon_loss(x_hat, x0, w_p: float = 1.0, w_m: float = 0.5, proxy: PerceptualProxy | None = None):
    """``w_p * proxy(x_hat, x0) + w_m * mse(x_hat, x0)``, batch-averaged."""
    proxy = proxy or get_proxy()
    return w_p * proxy.distance(x_hat, x0).mean() + w_m * F.mse_loss(x_hat, x0)


def pixel_recon_loss(dec: ConsistencyDecoder, vae: VAE, C, x0, mode: str | None = None, seed=0,
                     w_p: float = 1.0, w_m: float = 0.5, proxy: PerceptualProxy | None = None):
    z_hat = decode(dec, C, seed, mode)
    return recon_loss(vae.decode(z_hat, clamp=False), x0, w_p, w_m, proxy)


def train_stage2(dec: ConsistencyDecoder, pixels: torch.Tensor, data: ConditionedData,
                 vq: VQTokenizer, vae: VAE, cfg, resume: TrainState | None = None,
                 on_checkpoint=None, every: int = 0, snapshot_every: int = 100) -> TrainResult:
    """Pixel-loss finetuning through the few-step decode.

    ``pixels`` are the training images at ``cfg.decode_size`` (row-aligned
    with ``data``). On a non-finite loss the decoder is restored to its last
    good snapshot and :class:`TrainingDivergence` propagates.
    """
    if not bool(dec.distilled):
        raise StageOrderError("distill-cm", "pixel-loss training needs a distilled decoder")
    guarded = {"vq": vq, "vae": vae}
    snaps = _guarded(guarded)
    torch.manual_seed(cfg.seed + 5)
    gen = torch.Generator().manual_seed(cfg.seed + 5)
    proxy = get_proxy(cfg.proxy_seed)
    dec.step_mode = cfg.mode
    opt = nncore.Adam(dec, cfg.pixel_lr, betas=(cfg.adam_beta1, cfg.adam_beta2),
                      warmup=min(100, cfg.pixel_steps // 10), total_steps=cfg.pixel_steps)
    res = TrainResult()
    bs = min(cfg.pixel_batch, data.n)
    last_good = [nncore.snapshot(dec)]

    def step_fn(step):
        idx = torch.randint(data.n, (bs,), generator=gen)
        cs = data.cond_sizes[int(torch.randint(len(data.cond_sizes), (1,), generator=gen))]
        z0, C = data.batch(idx, cfg.decode_size, cs)
        seeds = torch.randint(0, 2 ** 31 - 1, (bs,), generator=gen).tolist()
        loss = pixel_recon_loss(dec, vae, C, pixels[idx], cfg.mode, seeds, cfg.w_perceptual, cfg.w_mse, proxy)
        if cfg.keep_diffusion_loss_in_stage2:
            t = stratified_timesteps(bs, dec.T, gen)
            loss = loss + conditional_loss(dec.net, z0, C, t, torch.randn(z0.shape, generator=gen))
        try:
            res.curve.append((step, opt.step(loss)))
        except TrainingDivergence:
            dec.load_state_dict(last_good[0])
            raise
        if snapshot_every and step % snapshot_every == 0:
            last_good[0] = nncore.snapshot(dec)

    nncore.run_steps(cfg.pixel_steps, step_fn, opt, gen, resume, on_checkpoint, every, {"dec": dec})
    res.state = TrainState(cfg.pixel_steps, opt.state, gen.get_state())
    _assert_unchanged(guarded, snaps)
    return res
