"""Image metrics, the random-feature perceptual proxy, and evaluation harnesses.

The perceptual proxy and the Frechet-distance proxy share one frozen,
randomly initialised convolutional feature stack. Its seed is part of every
report so numbers are comparable across machines.
"""
from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from skimage.metrics import structural_similarity
from torch import nn

from .errors import ContractViolation

log = logging.getLogger(__name__)

PSNR_CAP = 99.0
SSIM_WINDOW = 7
DEFAULT_PROXY_SEED = 1234


def _as_batch(x) -> np.ndarray:
    """NCHW tensor or HWC / NHWC array -> float64 NHWC array."""
    if isinstance(x, torch.Tensor):
        x = x.detach().cpu()
        x = x.permute(0, 2, 3, 1) if x.dim() == 4 else x.permute(1, 2, 0)[None]
        return x.double().numpy()
    x = np.asarray(x, dtype=np.float64)
    return x[None] if x.ndim == 3 else x


def _as_tensor(x) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        return x if x.dim() == 4 else x[None]
    x = np.asarray(x, dtype=np.float32)
    x = x[None] if x.ndim == 3 else x
    return torch.from_numpy(x).permute(0, 3, 1, 2).contiguous()


def psnr(a, b, cap: float = PSNR_CAP) -> float:
    a, b = _as_batch(a), _as_batch(b)
    if a.shape != b.shape:
        raise ContractViolation(f"shape mismatch {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return cap
    return min(cap, 10.0 * math.log10(1.0 / mse))


def _gray(img: np.ndarray) -> np.ndarray:
    return img[..., 0] * 0.2126 + img[..., 1] * 0.7152 + img[..., 2] * 0.0722


def ssim(a, b, win_size: int = SSIM_WINDOW) -> float:
    """Mean local SSIM on luminance with a uniform window, averaged over the batch."""
    a, b = _as_batch(a), _as_batch(b)
    if a.shape != b.shape:
        raise ContractViolation(f"shape mismatch {a.shape} vs {b.shape}")
    if min(a.shape[1:3]) < win_size:
        raise ContractViolation(f"image smaller than the {win_size}x{win_size} SSIM window")
    vals = [structural_similarity(_gray(x), _gray(y), win_size=win_size, data_range=1.0)
            for x, y in zip(a, b)]
    return float(np.mean(vals))


def ssim_constant(mu_a: float, mu_b: float) -> float:
    """SSIM of two constant images: only the luminance term survives."""
    c1 = (0.01 * 1.0) ** 2
    return (2 * mu_a * mu_b + c1) / (mu_a ** 2 + mu_b ** 2 + c1)


class PerceptualProxy(nn.Module):
    """Frozen random conv stack; distance = summed per-layer mean squared feature difference."""

    def __init__(self, seed: int = DEFAULT_PROXY_SEED, widths=(16, 32, 64)):
        super().__init__()
        gen = torch.Generator().manual_seed(seed)
        convs, c = [], 3
        for i, w in enumerate(widths):
            conv = nn.Conv2d(c, w, 3, stride=1 if i == 0 else 2, padding=1)
            with torch.no_grad():
                conv.weight.copy_(torch.randn(conv.weight.shape, generator=gen) * math.sqrt(2.0 / (9 * c)))
                conv.bias.copy_(0.1 * torch.randn(w, generator=gen))
            convs.append(conv)
            c = w
        self.convs = nn.ModuleList(convs)
        self.seed = seed
        for p in self.parameters():
            p.requires_grad_(False)

    def features(self, x: torch.Tensor) -> list[torch.Tensor]:
        h = x * 2.0 - 1.0
        feats = [h]
        for conv in self.convs:
            h = F.relu(conv(h))
            feats.append(h)
        return feats

    def distance(self, a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
        """Per-image distance, shape (B,)."""
        if a.shape != b.shape:
            raise ContractViolation(f"shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")
        total = 0.0
        for fa, fb in zip(self.features(a), self.features(b)):
            total = total + ((fa - fb) ** 2).flatten(1).mean(1)
        return total

    def pooled(self, x: torch.Tensor) -> torch.Tensor:
        return torch.cat([f.mean((2, 3)) for f in self.features(x)], 1)


_PROXIES: dict[int, PerceptualProxy] = {}


def get_proxy(seed: int = DEFAULT_PROXY_SEED) -> PerceptualProxy:
    if seed not in _PROXIES:
        _PROXIES[seed] = PerceptualProxy(seed)
    return _PROXIES[seed]


def perceptual_proxy(a, b, seed: int = DEFAULT_PROXY_SEED) -> float:
    with torch.no_grad():
        return float(get_proxy(seed).distance(_as_tensor(a).float(), _as_tensor(b).float()).mean())


def frechet_distance(mu1, cov1, mu2, cov2) -> float:
    """Frechet distance between Gaussians, matrix root via symmetric eigendecomposition."""
    mu1, mu2 = np.atleast_1d(mu1).astype(np.float64), np.atleast_1d(mu2).astype(np.float64)
    cov1, cov2 = np.atleast_2d(cov1).astype(np.float64), np.atleast_2d(cov2).astype(np.float64)
    if min(np.linalg.eigvalsh(cov1).min(), np.linalg.eigvalsh(cov2).min()) <= 1e-12:
        log.info("singular feature covariance; adding 1e-6 to the diagonal")
        eye = np.eye(cov1.shape[0])
        cov1, cov2 = cov1 + 1e-6 * eye, cov2 + 1e-6 * eye
    w, v = np.linalg.eigh(cov1)
    root1 = (v * np.sqrt(np.clip(w, 0.0, None))) @ v.T
    inner = root1 @ cov2 @ root1
    wi = np.linalg.eigvalsh((inner + inner.T) * 0.5)
    tr_root = np.sqrt(np.clip(wi, 0.0, None)).sum()
    d = float(((mu1 - mu2) ** 2).sum() + np.trace(cov1) + np.trace(cov2) - 2.0 * tr_root)
    return max(d, 0.0)


def fid_from_features(fa: np.ndarray, fb: np.ndarray) -> float:
    fa = np.asarray(fa, dtype=np.float64).reshape(len(fa), -1)
    fb = np.asarray(fb, dtype=np.float64).reshape(len(fb), -1)
    return frechet_distance(fa.mean(0), np.cov(fa, rowvar=False), fb.mean(0), np.cov(fb, rowvar=False))


@torch.no_grad()
def proxy_features(images, seed: int = DEFAULT_PROXY_SEED, bs: int = 256) -> np.ndarray:
    x = _as_tensor(images).float()
    proxy = get_proxy(seed)
    return torch.cat([proxy.pooled(x[i:i + bs]) for i in range(0, len(x), bs)]).double().numpy()


def fid_proxy(set_a, set_b, seed: int = DEFAULT_PROXY_SEED, min_size: int = 32) -> float:
    if len(set_a) < min_size or len(set_b) < min_size:
        raise ContractViolation(f"fid_proxy needs at least {min_size} images per set")
    return fid_from_features(proxy_features(set_a, seed), proxy_features(set_b, seed))


# -- reports -----------------------------------------------------------------

@dataclass
class EvalReport:
    metrics: dict[str, float]
    n: int
    config_hash: str = ""
    seeds: list[int] = field(default_factory=list)
    proxy_seed: int = DEFAULT_PROXY_SEED
    extra: dict = field(default_factory=dict)
    per_image: list[dict] = field(default_factory=list)

    def __post_init__(self):
        if self.n <= 0:
            raise ContractViolation("report needs at least one sample")
        bad = [k for k, v in self.metrics.items() if not math.isfinite(v)]
        if bad:
            raise ContractViolation(f"non-finite metrics: {bad}")

    def to_dict(self) -> dict:
        return {"metrics": self.metrics, "n": self.n, "config_hash": self.config_hash,
                "seeds": list(self.seeds), "proxy_seed": self.proxy_seed, "extra": self.extra}

    def write(self, json_path: Path | str, csv_path: Path | str | None = None) -> None:
        Path(json_path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")
        if csv_path is not None and self.per_image:
            write_csv(csv_path, self.per_image)


def write_csv(path: Path | str, rows: Sequence[dict]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]), lineterminator="\n")
        w.writeheader()
        w.writerows(rows)


@torch.no_grad()
def per_image_metrics(recon: torch.Tensor, ref: torch.Tensor, seed: int = DEFAULT_PROXY_SEED) -> list[dict]:
    proxy = get_proxy(seed)
    dist = proxy.distance(recon.float(), ref.float())
    rows = []
    for i in range(len(ref)):
        rows.append({
            "index": i,
            "mse": float(((recon[i].double() - ref[i].double()) ** 2).mean()),
            "psnr": psnr(recon[i:i + 1], ref[i:i + 1]),
            "ssim": ssim(recon[i:i + 1], ref[i:i + 1]) if min(ref.shape[-2:]) >= SSIM_WINDOW else float("nan"),
            "proxy": float(dist[i]),
            "color_err": float((recon[i].double().mean((1, 2)) - ref[i].double().mean((1, 2))).abs().mean()),
        })
    return rows


def summarize(rows: Sequence[dict], recon=None, ref=None, seed: int = DEFAULT_PROXY_SEED) -> dict[str, float]:
    keys = ("mse", "psnr", "ssim", "proxy", "color_err")
    out = {k: float(np.mean([r[k] for r in rows])) for k in keys}
    if recon is not None and len(recon) >= 32:
        out["fid_proxy"] = fid_proxy(recon, ref, seed)
    return out


def eval_reconstruction(reconstruct: Callable[[torch.Tensor, list[int]], torch.Tensor],
                        images: torch.Tensor, seeds: Sequence[int] | None = None,
                        proxy_seed: int = DEFAULT_PROXY_SEED, config_hash: str = "",
                        extra: dict | None = None) -> EvalReport:
    """Run ``reconstruct(images, seeds)`` and score it against ``images``."""
    seeds = list(range(len(images))) if seeds is None else list(seeds)
    with torch.no_grad():
        recon = reconstruct(images, seeds)
    rows = per_image_metrics(recon, images, proxy_seed)
    return EvalReport(summarize(rows, recon, images, proxy_seed), len(images), config_hash,
                      seeds, proxy_seed, dict(extra or {}), rows)


def eval_generation(generate_images: Callable[[list[list[str]], float, list[int]], torch.Tensor],
                    captions: Sequence[Sequence[str]], refs: torch.Tensor, s: float,
                    seeds: Sequence[int] | None = None, proxy_seed: int = DEFAULT_PROXY_SEED,
                    config_hash: str = "") -> EvalReport:
    """Generate one image per caption at guidance scale ``s`` and score against the caption's source image."""
    seeds = list(range(len(captions))) if seeds is None else list(seeds)
    with torch.no_grad():
        out = generate_images([list(c) for c in captions], s, seeds)
    rows = per_image_metrics(out, refs, proxy_seed)
    for r, c in zip(rows, captions):
        r["caption"] = " ".join(c)
    report = EvalReport(summarize(rows, out, refs, proxy_seed), len(captions), config_hash, seeds,
                        proxy_seed, {"cfg_scale": s}, rows)
    return report


def sweep_tokens(make_reconstruct: Callable[[int], Callable], images: torch.Tensor,
                 budgets: Sequence[int], seed_sets: Sequence[int], proxy_seed: int = DEFAULT_PROXY_SEED,
                 config_hash: str = "", token_count: Callable[[int], int] | None = None,
                 refs: torch.Tensor | None = None) -> dict[int, EvalReport]:
    """Reconstruction metrics per condition size, averaged over several noise-seed offsets.

    ``make_reconstruct(size)`` returns a ``reconstruct(images, seeds)`` callable;
    outputs are scored against ``refs`` (default: the inputs themselves).
    """
    refs = images if refs is None else refs
    out = {}
    for size in budgets:
        recon = make_reconstruct(size)
        reports = []
        for base in seed_sets:
            seeds = [base * 100_003 + i for i in range(len(images))]
            reports.append(eval_reconstruction(lambda _r, sd: recon(images, sd), refs, seeds, proxy_seed))
        metrics = {k: float(np.mean([r.metrics[k] for r in reports])) for k in reports[0].metrics}
        out[size] = EvalReport(metrics, len(images), config_hash, list(seed_sets), proxy_seed,
                               {"cond_size": size, "tokens": token_count(size) if token_count else None})
    return out


def sweep_cfg(generate_images, captions, refs, scales: Sequence[float], seeds=None,
              proxy_seed: int = DEFAULT_PROXY_SEED, config_hash: str = "") -> dict[float, EvalReport]:
    return {float(s): eval_generation(generate_images, captions, refs, float(s), seeds, proxy_seed, config_hash)
            for s in scales}


def plot_sweep(results: dict, metric_keys: Sequence[str], xlabel: str, path: Path | str) -> None:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    xs = sorted(results)
    fig, axes = plt.subplots(1, len(metric_keys), figsize=(3.2 * len(metric_keys), 3))
    axes = np.atleast_1d(axes)
    for ax, key in zip(axes, metric_keys):
        ax.plot(xs, [results[x].metrics[key] for x in xs], marker="o")
        ax.set_xlabel(xlabel)
        ax.set_title(key)
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
