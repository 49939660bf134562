"""The base latent diffusion model: VAE, noise schedule, denoiser, DDIM sampler.

The denoiser's public output is a noise prediction and it is trained with
the plain noise-regression loss. Internally its last layer produces a
velocity ``v = alpha * eps - beta * z0`` which is converted with
``eps = alpha * v + beta * z_t``; this keeps the clean-latent estimate
``z0 = alpha * z_t - beta * v`` free of any division by ``alpha``, which the
few-step decoders rely on at the noisiest timestep.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from . import nncore
from .errors import ContractViolation, StageOrderError, TrainingFailure
from .layers import (ConvDecoder, ConvEncoder, Downsample, ResBlock, Upsample, norm, resize,
                     timestep_embedding, widths_for)
from .nncore import TrainResult, TrainState

log = logging.getLogger(__name__)


# -- schedule ----------------------------------------------------------------

@dataclass
class NoiseSchedule:
    T: int
    alpha: np.ndarray   # float64, length T + 1
    beta: np.ndarray
    kind: str = "cosine"

    def coeffs(self, t, like: torch.Tensor):
        """(alpha_t, beta_t) broadcastable against the NCHW tensor ``like``."""
        t = torch.as_tensor(t, dtype=torch.long)
        if (t < 0).any() or (t > self.T).any():
            raise ContractViolation(f"timestep outside [0, {self.T}]")
        a = torch.from_numpy(self.alpha)[t].to(like.dtype)
        b = torch.from_numpy(self.beta)[t].to(like.dtype)
        if a.dim() == 1:
            shape = (-1,) + (1,) * (like.dim() - 1)
            a, b = a.view(shape), b.view(shape)
        return a, b

    def diffuse(self, z0: torch.Tensor, t, eps: torch.Tensor) -> torch.Tensor:
        if eps.shape != z0.shape:
            raise ContractViolation("noise must be shaped like z0")
        a, b = self.coeffs(t, z0)
        return a * z0 + b * eps


def cosine_alpha(t, T: int, terminal_alpha: float = 0.04):
    """Cosine schedule ``cos(t/T * arccos(terminal_alpha))``; ends at ``terminal_alpha``."""
    return np.cos(np.asarray(t, dtype=np.float64) / T * math.acos(terminal_alpha))


def make_schedule(T: int = 1000, kind: str = "cosine", terminal_alpha: float = 0.04) -> NoiseSchedule:
    if T < 1:
        raise ContractViolation("T must be >= 1")
    t = np.arange(T + 1, dtype=np.float64)
    if kind == "cosine":
        phi = t / T * math.acos(terminal_alpha)
        return NoiseSchedule(T, np.cos(phi), np.sin(phi), kind)
    if kind == "linear":
        betas = np.clip(np.linspace(1e-4, 0.02, T) * 1000.0 / T, 0.0, 0.999)
        alpha = np.sqrt(np.concatenate([[1.0], np.cumprod(1.0 - betas)]))
        # shift/scale so the last step lands exactly on terminal_alpha
        alpha = terminal_alpha + (alpha - alpha[-1]) * (1.0 - terminal_alpha) / (1.0 - alpha[-1])
        alpha[0] = 1.0
        return NoiseSchedule(T, alpha, np.sqrt(np.clip(1.0 - alpha ** 2, 0.0, None)), kind)
    raise ContractViolation(f"unknown schedule kind {kind!r}")


def diffuse(schedule: NoiseSchedule, z0, t, eps):
    return schedule.diffuse(z0, t, eps)


def gaussian(shape: Sequence[int], seeds: int | Sequence[int], dtype=None) -> torch.Tensor:
    """Unit Gaussian noise; a list of seeds gives each batch row its own stream."""
    dtype = dtype or torch.get_default_dtype()
    if isinstance(seeds, int):
        return torch.randn(tuple(shape), generator=torch.Generator().manual_seed(seeds), dtype=dtype)
    if len(seeds) != shape[0]:
        raise ContractViolation("need one seed per batch row")
    return torch.stack([torch.randn(tuple(shape[1:]), generator=torch.Generator().manual_seed(int(s)),
                                    dtype=dtype) for s in seeds])


# -- VAE ---------------------------------------------------------------------

class VAE(nn.Module):
    def __init__(self, latent_ch: int = 4, factor: int = 4, ch: int = 16):
        super().__init__()
        self.encoder = ConvEncoder(3, 2 * latent_ch, widths_for(factor, ch))
        self.decoder = ConvDecoder(latent_ch, 3, widths_for(factor, ch)[::-1])
        self.factor = factor
        self.latent_ch = latent_ch
        self.register_buffer("scale", torch.tensor(1.0))
        self.register_buffer("trained", torch.tensor(False))

    def posterior(self, image):
        h, w = image.shape[-2:]
        if h % self.factor or w % self.factor:
            raise ContractViolation(f"image size {h}x{w} not divisible by f_vae={self.factor}")
        mean, logvar = self.encoder(image * 2.0 - 1.0).chunk(2, dim=1)
        return mean, logvar.clamp(-20.0, 10.0)

    def decode_raw(self, z):
        return (self.decoder(z / self.scale) + 1.0) * 0.5

    def _require_trained(self):
        if not bool(self.trained):
            raise StageOrderError("train-ldm", "VAE used before stage-0b training")

    def encode(self, image: torch.Tensor) -> torch.Tensor:
        """Posterior mean, scaled to roughly unit variance."""
        self._require_trained()
        return self.posterior(image)[0] * self.scale

    def decode(self, z: torch.Tensor, clamp: bool = True) -> torch.Tensor:
        self._require_trained()
        x = self.decode_raw(z)
        return x.clamp(0.0, 1.0) if clamp else x


def vae_encode(vae: VAE, image):
    return vae.encode(image)


def vae_decode(vae: VAE, z):
    return vae.decode(z)


def train_stage0_vae(images: torch.Tensor, cfg, heldout: torch.Tensor | None = None,
                     model: VAE | None = None, resume: TrainState | None = None,
                     on_checkpoint=None, every: int = 0):
    """Train the VAE on alternating resolutions; fixes the latent scale and freezes it."""
    torch.manual_seed(cfg.seed + 1)
    gen = torch.Generator().manual_seed(cfg.seed + 1)
    vae = model if model is not None else VAE(cfg.vae_latent, cfg.vae_factor, cfg.vae_channels)
    opt = nncore.Adam(vae, cfg.vae_lr, betas=(cfg.adam_beta1, cfg.adam_beta2),
                      warmup=50, total_steps=cfg.vae_steps)
    res = TrainResult()
    sets = {s: resize(images, s) for s in cfg.vae_sizes}
    bs = min(cfg.vae_batch, len(images))

    def step_fn(step):
        size = cfg.vae_sizes[step % len(cfg.vae_sizes)]
        n = bs if size <= 32 else max(1, bs // 4)
        x = sets[size][torch.randint(len(images), (n,), generator=gen)]
        mean, logvar = vae.posterior(x)
        z = mean + torch.exp(0.5 * logvar) * torch.randn(mean.shape, generator=gen)
        rec = F.mse_loss(vae.decode_raw(z), x)
        kl = 0.5 * (mean ** 2 + logvar.exp() - 1.0 - logvar).mean()
        res.curve.append((step, opt.step(rec + cfg.vae_kl * kl)))

    nncore.run_steps(cfg.vae_steps, step_fn, opt, gen, resume, on_checkpoint, every, {"vae": vae})
    res.state = TrainState(cfg.vae_steps, opt.state, gen.get_state())
    with torch.no_grad():
        mu = torch.cat([vae.posterior(sets[cfg.vae_sizes[0]][i:i + 256])[0]
                        for i in range(0, len(images), 256)])
        vae.scale.fill_(1.0 / float(mu.std()))
        vae.trained.fill_(True)
    nncore.freeze(vae)
    ref = resize(heldout if heldout is not None else images[:256], cfg.image_size)
    with torch.no_grad():
        mse = F.mse_loss(vae.decode(vae.encode(ref)), ref).item()
    res.metrics["heldout_psnr"] = 99.0 if mse == 0 else 10 * math.log10(1.0 / mse)
    log.info("stage0 vae: %s", res.metrics)
    if res.metrics["heldout_psnr"] < cfg.vae_target_psnr:
        raise TrainingFailure(f"VAE held-out PSNR {res.metrics['heldout_psnr']:.2f} dB below "
                              f"target {cfg.vae_target_psnr} dB", res.metrics)
    return vae, res


# -- denoiser ----------------------------------------------------------------

class Block(nn.Module):
    """A run of layers where residual blocks also receive the time embedding."""

    def __init__(self, *layers: nn.Module):
        super().__init__()
        self.layers = nn.ModuleList(layers)

    def forward(self, x, temb):
        for layer in self.layers:
            x = layer(x, temb) if isinstance(layer, ResBlock) else layer(x)
        return x


class Denoiser(nn.Module):
    """Two-level UNet over latents; ``forward(z_t, t)`` predicts the noise."""

    def __init__(self, schedule: NoiseSchedule, latent_ch: int = 4, ch: int = 32):
        super().__init__()
        temb = 4 * ch
        self.ch = ch
        self.latent_ch = latent_ch
        self.time_mlp = nn.Sequential(nn.Linear(ch, temb), nn.SiLU(), nn.Linear(temb, temb))
        self.enc_blocks = nn.ModuleList([
            Block(nn.Conv2d(latent_ch, ch, 3, padding=1), ResBlock(ch, ch, temb)),
            Block(Downsample(ch, 2 * ch), ResBlock(2 * ch, 2 * ch, temb)),
        ])
        self.mid = Block(ResBlock(2 * ch, 2 * ch, temb), ResBlock(2 * ch, 2 * ch, temb))
        self.dec1 = ResBlock(4 * ch, 2 * ch, temb)
        self.up = Upsample(2 * ch, ch)
        self.dec0 = ResBlock(2 * ch, ch, temb)
        self.out = nn.Sequential(norm(ch), nn.SiLU(), nn.Conv2d(ch, latent_ch, 3, padding=1))
        self.register_buffer("alpha", torch.from_numpy(schedule.alpha).float())
        self.register_buffer("beta", torch.from_numpy(schedule.beta).float())
        self.register_buffer("trained", torch.tensor(False))
        self.T = schedule.T
        self.schedule = schedule

    # pieces used by the conditional decoder
    def time_embed(self, t: torch.Tensor) -> torch.Tensor:
        return self.time_mlp(timestep_embedding(t, self.ch).to(self.time_mlp[0].weight.dtype))

    def encode_half(self, z, temb) -> list[torch.Tensor]:
        hs, h = [], z
        for blk in self.enc_blocks:
            h = blk(h, temb)
            hs.append(h)
        return hs

    def decode_half(self, hs, m, temb):
        h = self.dec1(torch.cat([m, hs[1]], 1), temb)
        h = self.dec0(torch.cat([self.up(h), hs[0]], 1), temb)
        return self.out(h)

    def _ab(self, t, like):
        t = torch.as_tensor(t, dtype=torch.long).expand(like.shape[0])
        shape = (-1, 1, 1, 1)
        return self.alpha[t].to(like.dtype).view(shape), self.beta[t].to(like.dtype).view(shape)

    def v_to_eps(self, v, z, t):
        a, b = self._ab(t, z)
        return a * v + b * z

    def v_to_x0(self, v, z, t):
        a, b = self._ab(t, z)
        return a * z - b * v

    def predict_v(self, z, t):
        t = torch.as_tensor(t).expand(z.shape[0])
        temb = self.time_embed(t)
        hs = self.encode_half(z, temb)
        return self.decode_half(hs, self.mid(hs[-1], temb), temb)

    def forward(self, z, t, cond=None):
        if cond is not None:
            raise ContractViolation("the base denoiser is unconditional")
        return self.v_to_eps(self.predict_v(z, t), z, t)


def diffusion_loss(model, z0, t, eps, condition=None, schedule: NoiseSchedule | None = None):
    """Mean squared error between predicted and true noise."""
    schedule = schedule or _schedule_of(model)
    zt = schedule.diffuse(z0, t, eps)
    pred = model(zt, t) if condition is None else model(zt, t, condition)
    return F.mse_loss(pred, eps)


def _schedule_of(model) -> NoiseSchedule:
    sched = getattr(model, "schedule", None)
    if sched is None:
        raise ContractViolation("pass schedule= for models that do not carry one")
    return sched


def stratified_timesteps(n: int, T: int, gen: torch.Generator) -> torch.Tensor:
    """One timestep in [1, T] per row, stratified across the batch."""
    u = (torch.arange(n, dtype=torch.float64) + torch.rand(n, generator=gen, dtype=torch.float64)) / n
    t = (u * T).ceil().long().clamp(1, T)
    return t[torch.randperm(n, generator=gen)]


def ddim_timesteps(T: int, steps: int) -> list[int]:
    if steps < 1:
        raise ContractViolation("steps must be >= 1")
    if steps > T:
        raise ContractViolation(f"steps={steps} exceeds T={T}")
    return [int(x) for x in np.round(np.linspace(T, 0, steps + 1))]


@torch.no_grad()
def ddim_sample(model, schedule: NoiseSchedule, steps: int, shape=None, condition=None,
                seed: int | Sequence[int] = 0, x_T: torch.Tensor | None = None) -> torch.Tensor:
    """Deterministic DDIM from ``x_T`` (default: seeded unit noise) down to t = 0."""
    ts = ddim_timesteps(schedule.T, steps)
    z = x_T.clone() if x_T is not None else gaussian(shape, seed)
    for t, tn in zip(ts[:-1], ts[1:]):
        tt = torch.full((z.shape[0],), t, dtype=torch.long)
        eps = model(z, tt) if condition is None else model(z, tt, condition)
        a, b = schedule.coeffs(t, z)
        an, bn = schedule.coeffs(tn, z)
        x0 = (z - b * eps) / a
        z = an * x0 + bn * eps
    return z


@torch.no_grad()
def encode_dataset(vae: VAE, images: torch.Tensor, size: int, bs: int = 128) -> torch.Tensor:
    return torch.cat([vae.encode(resize(images[i:i + bs], size)) for i in range(0, len(images), bs)])


def train_stage0_ldm(images: torch.Tensor, vae: VAE, cfg, schedule: NoiseSchedule | None = None,
                     model: Denoiser | None = None, resume: TrainState | None = None,
                     on_checkpoint=None, every: int = 0):
    """Train the unconditional noise predictor on VAE latents of ``images``."""
    if not bool(vae.trained):
        raise StageOrderError("train-ldm", "LDM training needs a trained VAE")
    schedule = schedule or make_schedule(cfg.timesteps, cfg.schedule, cfg.terminal_alpha)
    torch.manual_seed(cfg.seed + 2)
    gen = torch.Generator().manual_seed(cfg.seed + 2)
    model = model if model is not None else Denoiser(schedule, cfg.vae_latent, cfg.ldm_channels)
    latents = {s: encode_dataset(vae, images, s) for s in cfg.ldm_sizes}
    opt = nncore.Adam(model, cfg.ldm_lr, betas=(cfg.adam_beta1, cfg.adam_beta2),
                      warmup=100, total_steps=cfg.ldm_steps)
    res = TrainResult()
    n = len(images)
    bs = min(cfg.ldm_batch, n)

    def step_fn(step):
        size = cfg.ldm_sizes[step % len(cfg.ldm_sizes)]
        b = bs if size <= 32 else max(1, bs // 4)
        z0 = latents[size][torch.randint(n, (b,), generator=gen)]
        t = stratified_timesteps(b, schedule.T, gen)
        eps = torch.randn(z0.shape, generator=gen)
        res.curve.append((step, opt.step(diffusion_loss(model, z0, t, eps, schedule=schedule)), size))

    nncore.run_steps(cfg.ldm_steps, step_fn, opt, gen, resume, on_checkpoint, every, {"ldm": model})
    res.state = TrainState(cfg.ldm_steps, opt.state, gen.get_state())
    model.trained.fill_(True)
    nncore.freeze(model)
    return model, res
