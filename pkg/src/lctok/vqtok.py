"""Visual encoder, codebook and nearest-code quantizer, plus their pretraining.

Feature grids are NCHW tensors ``(B, D, H/f, W/f)``; token grids are
``(B, H/f, W/f)`` long tensors, flattened in raster order when a sequence
is needed.
"""
from __future__ import annotations

import logging

import torch
import torch.nn.functional as F
from torch import nn

from . import nncore
from .nncore import TrainResult, TrainState
from .errors import ContractViolation, TrainingFailure
from .layers import ConvDecoder, ConvEncoder, resize, widths_for

log = logging.getLogger(__name__)


class VQEncoder(nn.Module):
    def __init__(self, dim: int = 32, ch: int = 16, factor: int = 4):
        super().__init__()
        self.net = ConvEncoder(3, dim, widths_for(factor, ch))
        self.factor = factor

    def forward(self, x):
        return self.net(x * 2.0 - 1.0)


class VQDecoder(nn.Module):
    def __init__(self, dim: int = 32, ch: int = 16, factor: int = 4):
        super().__init__()
        self.net = ConvDecoder(dim, 3, widths_for(factor, ch)[::-1])

    def forward(self, q):
        return (self.net(q) + 1.0) * 0.5


class Codebook(nn.Module):
    def __init__(self, n_codes: int = 512, dim: int = 32):
        super().__init__()
        if n_codes < 2:
            raise ContractViolation("codebook needs at least 2 codes")
        self.codes = nn.Parameter(torch.empty(n_codes, dim).uniform_(-1.0 / n_codes, 1.0 / n_codes))
        self.register_buffer("usage", torch.zeros(n_codes, dtype=torch.long))

    @property
    def n_codes(self) -> int:
        return self.codes.shape[0]

    @property
    def dim(self) -> int:
        return self.codes.shape[1]

    @torch.no_grad()
    def record(self, tokens: torch.Tensor) -> None:
        self.usage += torch.bincount(tokens.flatten(), minlength=self.n_codes)

    @torch.no_grad()
    def reset_usage(self) -> None:
        self.usage.zero_()

    def lookup(self, tokens: torch.Tensor) -> torch.Tensor:
        """Token grid ``(B, h, w)`` -> quantized feature grid ``(B, D, h, w)``."""
        if tokens.min() < 0 or tokens.max() >= self.n_codes:
            raise ContractViolation("token index outside codebook")
        return self.codes[tokens].permute(0, 3, 1, 2)


def nearest_code(flat: torch.Tensor, codes: torch.Tensor) -> torch.Tensor:
    """Index of the nearest code (squared L2) for each row of ``flat``.

    A fast expanded-form pass picks candidates; rows whose best and second
    best distances are within rounding error are re-resolved with exact
    float64 differences so ties go to the lowest index.
    """
    if codes.shape[0] == 0:
        raise ContractViolation("empty codebook")
    if flat.shape[-1] != codes.shape[-1]:
        raise ContractViolation(f"feature dim {flat.shape[-1]} != code dim {codes.shape[-1]}")
    with torch.no_grad():
        f = flat.detach()
        c = codes.detach()
        f2 = (f * f).sum(1, keepdim=True)
        c2 = (c * c).sum(1)
        d = f2 - 2.0 * f @ c.t() + c2[None]
        if c.shape[0] == 1:
            return torch.zeros(f.shape[0], dtype=torch.long)
        best2 = d.topk(2, dim=1, largest=False)
        idx = best2.indices[:, 0].clone()
        tol = 1e-5 * (1e-3 + f2[:, 0] + c2.max())
        close = (best2.values[:, 1] - best2.values[:, 0]) <= tol
        rows = close.nonzero().flatten()
        c64 = c.double()
        for start in range(0, rows.numel(), 256):
            r = rows[start:start + 256]
            dd = ((f[r].double()[:, None, :] - c64[None]) ** 2).sum(-1)
            idx[r] = dd.argmin(1)
        return idx


def quantize(features: torch.Tensor, codebook: Codebook | torch.Tensor):
    """Map every cell of ``features`` (B, D, h, w) to its nearest code.

    Returns ``(tokens, quantized)`` with tokens ``(B, h, w)`` and the code
    vectors laid out like ``features``.
    """
    codes = codebook.codes if isinstance(codebook, Codebook) else codebook
    b, d, h, w = features.shape
    flat = features.permute(0, 2, 3, 1).reshape(-1, d)
    tokens = nearest_code(flat, codes).view(b, h, w)
    q = codes[tokens].permute(0, 3, 1, 2)
    return tokens, q


class _StraightThrough(torch.autograd.Function):
    @staticmethod
    def forward(ctx, features, quantized):
        return quantized.clone()

    @staticmethod
    def backward(ctx, g):
        return g, None


def straight_through(features: torch.Tensor, quantized: torch.Tensor) -> torch.Tensor:
    """Forward value is exactly ``quantized``; the gradient flows to ``features``."""
    if features.shape != quantized.shape:
        raise ContractViolation("straight_through needs matching shapes")
    return _StraightThrough.apply(features, quantized)


def vq_loss_terms(features, quantized, recon, image, beta: float = 0.25):
    """(reconstruction, codebook, commitment) terms; all means over elements."""
    rec = F.mse_loss(recon, image)
    codebook = F.mse_loss(quantized, features.detach())
    commit = F.mse_loss(features, quantized.detach())
    return rec, codebook, beta * commit


def vq_losses(features, quantized, recon, image, beta: float = 0.25) -> torch.Tensor:
    rec, cb, commit = vq_loss_terms(features, quantized, recon, image, beta)
    return rec + cb + commit


class VQTokenizer(nn.Module):
    """Encoder + codebook + pixel decoder; only encoder and codebook survive into later stages."""

    def __init__(self, n_codes: int = 512, dim: int = 32, factor: int = 4, ch: int = 16):
        super().__init__()
        self.encoder = VQEncoder(dim, ch, factor)
        self.codebook = Codebook(n_codes, dim)
        self.decoder = VQDecoder(dim, ch, factor)
        self.factor = factor

    def encode(self, image: torch.Tensor) -> torch.Tensor:
        """Image batch (B, 3, H', W') in [0, 1] -> feature grid (B, D, H'/f, W'/f)."""
        h, w = image.shape[-2:]
        if h % self.factor or w % self.factor:
            raise ContractViolation(f"image size {h}x{w} not divisible by f={self.factor}")
        return self.encoder(image)

    def tokenize(self, image: torch.Tensor, size: int | None = None):
        """Resize to the condition size, encode and quantize -> (tokens, quantized)."""
        if size is not None:
            image = resize(image, size)
        return quantize(self.encode(image), self.codebook)

    def forward(self, image):
        g = self.encode(image)
        tokens, q = quantize(g, self.codebook)
        recon = self.decoder(straight_through(g, q))
        return g, q, tokens, recon


def token_count(size: int, factor: int = 4) -> int:
    if size % factor:
        raise ContractViolation(f"size {size} not divisible by {factor}")
    return (size // factor) ** 2


@torch.no_grad()
def _init_codes(model: VQTokenizer, images: torch.Tensor, gen: torch.Generator) -> None:
    g = model.encode(images)
    flat = g.permute(0, 2, 3, 1).reshape(-1, g.shape[1])
    pick = torch.randint(0, flat.shape[0], (model.codebook.n_codes,), generator=gen)
    model.codebook.codes.copy_(flat[pick] + 1e-3 * torch.randn(model.codebook.codes.shape, generator=gen))


@torch.no_grad()
def reseed_dead_codes(model: VQTokenizer, images: torch.Tensor, gen: torch.Generator) -> int:
    cb = model.codebook
    dead = (cb.usage == 0).nonzero().flatten()
    if dead.numel():
        g = model.encode(images)
        flat = g.permute(0, 2, 3, 1).reshape(-1, g.shape[1])
        pick = torch.randint(0, flat.shape[0], (dead.numel(),), generator=gen)
        cb.codes[dead] = flat[pick]
        log.info("reseeded %d dead codes", dead.numel())
    cb.reset_usage()
    return int(dead.numel())


def train_stage0_vq(images: torch.Tensor, cfg, heldout: torch.Tensor | None = None,
                    model: VQTokenizer | None = None, resume: TrainState | None = None,
                    on_checkpoint=None, every: int = 0):
    """Pretrain the stand-in tokenizer on an image batch tensor (N, 3, S, S).

    Each step resizes its batch to a condition size drawn from
    ``cfg.cond_sizes``; codes unused for an epoch's worth of steps are
    reseeded. Raises :class:`TrainingFailure` when held-out PSNR at the
    native condition size misses ``cfg.vq_target_psnr``.
    Returns ``(model, TrainResult)`` with everything frozen.
    """
    if len(images) == 0:
        raise ContractViolation("empty dataset")
    torch.manual_seed(cfg.seed)
    gen = torch.Generator().manual_seed(cfg.seed)
    images = resize(images, cfg.image_size)
    if model is None:
        model = VQTokenizer(cfg.vq_codes, cfg.vq_dim, cfg.vq_factor, cfg.vq_channels)
    if resume is None:
        _init_codes(model, images[torch.randperm(len(images), generator=gen)[:64]], gen)
    opt = nncore.Adam(model, cfg.vq_lr, betas=(cfg.adam_beta1, cfg.adam_beta2),
                      warmup=50, total_steps=cfg.vq_steps)
    res = TrainResult()
    bs = min(cfg.vq_batch, len(images))
    steps_per_epoch = max(1, len(images) // bs)

    def step_fn(step):
        if step and step % steps_per_epoch == 0 and cfg.vq_dead_reseed:
            reseed_dead_codes(model, images[torch.randint(len(images), (256,), generator=gen)], gen)
        x = images[torch.randint(len(images), (bs,), generator=gen)]
        size = cfg.cond_sizes[int(torch.randint(len(cfg.cond_sizes), (1,), generator=gen))]
        x = resize(x, size)
        g, q, tokens, recon = model(x)
        model.codebook.record(tokens)
        res.curve.append((step, opt.step(vq_losses(g, q, recon, x, cfg.vq_beta))))

    nncore.run_steps(cfg.vq_steps, step_fn, opt, gen, resume, on_checkpoint, every, {"vq": model})
    res.state = TrainState(cfg.vq_steps, opt.state, gen.get_state())
    nncore.freeze(model)
    ref = heldout if heldout is not None else images[:256]
    res.metrics["heldout_psnr"] = vq_psnr(model, resize(ref, cfg.image_size))
    res.metrics["codes_used"] = float(used_codes(model, resize(ref, cfg.image_size)))
    log.info("stage0 vq: %s", res.metrics)
    if res.metrics["heldout_psnr"] < cfg.vq_target_psnr:
        raise TrainingFailure(
            f"VQ held-out PSNR {res.metrics['heldout_psnr']:.2f} dB below target "
            f"{cfg.vq_target_psnr} dB", res.metrics)
    return model, res


@torch.no_grad()
def vq_psnr(model: VQTokenizer, images: torch.Tensor, bs: int = 128) -> float:
    errs = []
    for i in range(0, len(images), bs):
        x = images[i:i + bs]
        errs.append(((model(x)[3].clamp(0, 1) - x) ** 2).flatten(1).mean(1))
    mse = torch.cat(errs).mean().item()
    return 99.0 if mse == 0 else 10.0 * float(torch.log10(torch.tensor(1.0 / mse)))


@torch.no_grad()
def used_codes(model: VQTokenizer, images: torch.Tensor) -> int:
    tokens, _ = model.tokenize(images)
    return int(tokens.unique().numel())
