"""Staged experiment driver over a run directory.

Layout of a run directory::

    run.lock  run.log
    data/train/  data/heldout/         PNG corpora with manifest.tsv
    data/tokens.bin                    tokenized AR training set
    checkpoints/<stage>.ckpt           final checkpoint per training stage
    checkpoints/<stage>.partial.ckpt   periodic checkpoint while a stage runs
    curves/<stage>.csv                 training curves
    reports/                           JSON reports, per-image CSVs, plots

Training stages form a chain; each one refuses to start unless the
checkpoint of the stage before it is present.
"""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from torch import nn

from . import argen, checkpoint as ckpt, consistency as cm, data, evalkit, ladd, latentdm, nncore, vqtok
from .config import RunConfig
from .errors import ContractViolation, StageOrderError
from .layers import resize
from .nncore import OptimizerState, TrainState

log = logging.getLogger(__name__)

TRAIN_STAGES = ("train-vq", "train-ldm", "train-ladd", "distill-cm", "train-pixel", "train-argen")
PREREQ = {
    "gen-data": None,
    "train-vq": "gen-data",
    "train-ldm": "train-vq",
    "train-ladd": "train-ldm",
    "distill-cm": "train-ladd",
    "train-pixel": "distill-cm",
    "train-argen": "train-pixel",
    "reconstruct": "train-pixel",
    "sweep-tokens": "train-pixel",
    "generate": "train-argen",
    "eval": "train-argen",
    "sweep-cfg": "train-argen",
}


def chain(stage: str) -> list[str]:
    """Prerequisites of ``stage``, nearest first."""
    out, cur = [], PREREQ[stage]
    while cur is not None:
        out.append(cur)
        cur = PREREQ[cur]
    return out


# -- train-state (de)serialisation --------------------------------------------

def state_arrays(prefix: str, st: TrainState) -> dict[str, torch.Tensor]:
    """Optimizer moments and RNG state, kept apart from module weights under ``state.``."""
    out = ckpt.prefixed(f"state.{prefix}.opt", st.opt.arrays())
    out[f"state.{prefix}.rng"] = st.rng
    return out


def state_meta(st: TrainState) -> dict:
    return {"step": st.step, "opt": st.opt.meta()}


def state_from(c: ckpt.Checkpoint, prefix: str) -> TrainState:
    meta = c.metadata["train_state"][prefix]
    return TrainState(meta["step"], OptimizerState.from_parts(meta["opt"], c.subset(f"state.{prefix}.opt")),
                      c.arrays[f"state.{prefix}.rng"])


def module_arrays(modules: dict[str, nn.Module]) -> dict[str, torch.Tensor]:
    out = {}
    for name, mod in modules.items():
        out.update(ckpt.prefixed(name, mod.state_dict()))
    return out


def write_curve(path: Path, rows: Sequence[tuple], header: Sequence[str]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(",".join(header) + "\n")
        for r in rows:
            fh.write(",".join(repr(x) if isinstance(x, float) else str(x) for x in r) + "\n")


def batched(fn, n: int, bs: int = 32):
    """Concatenate ``fn(slice)`` over consecutive slices of ``range(n)``."""
    return torch.cat([fn(slice(i, min(n, i + bs))) for i in range(0, n, bs)])


@dataclass
class Models:
    vq: vqtok.VQTokenizer | None = None
    vae: latentdm.VAE | None = None
    ldm: latentdm.Denoiser | None = None
    ladd: ladd.LaddModel | None = None
    dec: cm.ConsistencyDecoder | None = None
    ar: argen.ArModel | None = None


class Run:
    def __init__(self, out: Path | str, cfg: RunConfig):
        self.out = Path(out)
        self.cfg = cfg
        self.schedule = latentdm.make_schedule(cfg.timesteps, cfg.schedule, cfg.terminal_alpha)
        for sub in ("checkpoints", "curves", "reports"):
            (self.out / sub).mkdir(parents=True, exist_ok=True)
        self._images: dict[str, tuple[torch.Tensor, list]] = {}

    # -- paths and ordering ----------------------------------------------------
    @property
    def data_dir(self) -> Path:
        return Path(self.cfg.data_dir) if self.cfg.data_dir else self.out / "data"

    def ckpt_path(self, stage: str, partial: bool = False) -> Path:
        return self.out / "checkpoints" / f"{stage}{'.partial' if partial else ''}.ckpt"

    def done(self, stage: str) -> bool:
        if stage == "gen-data":
            return (self.data_dir / "train" / data.MANIFEST).exists()
        return self.ckpt_path(stage).exists()

    def require(self, stage: str) -> None:
        for pre in chain(stage):
            if not self.done(pre):
                raise StageOrderError(pre, f"cannot run {stage!r} before {pre!r}")

    # -- data ------------------------------------------------------------------
    def gen_data(self) -> dict:
        """Render the corpus, inject low-contrast corruptions, filter, and write PNG corpora."""
        cfg = self.cfg
        n_bad = int(round(cfg.n_train * cfg.corrupt_frac))
        raw = data.gen_dataset(cfg.n_train + n_bad, cfg.data_resolution, cfg.seed)
        bad = sorted(np.random.default_rng([cfg.seed, 7]).choice(len(raw), n_bad, replace=False).tolist())
        for i in bad:
            raw[i].image = data.degrade_contrast(raw[i].image)
            raw[i].quality_score = data.quality_score(raw[i].image)
        kept = data.filter_samples(raw, data.sample_score, cfg.quality_threshold)
        removed = [i for i, s in enumerate(raw) if not s.quality_score >= cfg.quality_threshold]
        held = data.gen_dataset(cfg.n_heldout, cfg.data_resolution, cfg.seed + 1_000_000)
        data.write_corpus(self.data_dir / "train", kept)
        data.write_corpus(self.data_dir / "heldout", held)
        report = {"generated": len(raw), "injected_corruptions": n_bad, "kept": len(kept),
                  "removed": len(removed), "removed_exactly_injected": removed == bad,
                  "threshold": cfg.quality_threshold, "heldout": len(held)}
        (self.data_dir / "filter_report.json").write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
        return report

    def images(self, split: str) -> tuple[torch.Tensor, list[list[str]]]:
        if split not in self._images:
            samples = data.read_corpus(self.data_dir / split)
            if not samples:
                raise ContractViolation(f"empty corpus {self.data_dir / split}")
            self._images[split] = (data.to_tensor(samples), [s.caption for s in samples])
        return self._images[split]

    def heldout(self, n: int | None = None):
        x, caps = self.images("heldout")
        n = n or self.cfg.eval_n
        return x[:n], caps[:n]

    # -- checkpoints -------------------------------------------------------------
    def _parent_hash(self, stage: str) -> str:
        pre = PREREQ[stage]
        if pre is None or pre == "gen-data":
            return ""
        return ckpt.file_hash(self.ckpt_path(pre))

    def _save(self, stage: str, arrays: dict, states: dict[str, TrainState], partial: bool = False,
              **extra) -> str:
        step = max((st.step for st in states.values()), default=0)
        for prefix, st in states.items():
            arrays.update(state_arrays(prefix, st))
        meta = {"stage": stage, "step": step, "config_hash": self.cfg.hash(),
                "parent_hash": self._parent_hash(stage), "complete": not partial,
                "train_state": {p: state_meta(st) for p, st in states.items()}}
        meta.update(extra)
        h = ckpt.save_checkpoint(self.ckpt_path(stage, partial), arrays, meta)
        if not partial:
            self.ckpt_path(stage, True).unlink(missing_ok=True)
        return h

    def load(self, stage: str) -> ckpt.Checkpoint:
        path = self.ckpt_path(stage)
        if not path.exists():
            raise StageOrderError(stage)
        c = ckpt.load_checkpoint(path, stage)
        if c.metadata.get("config_hash") != self.cfg.hash():
            log.info("%s checkpoint was written under config %s (current %s)",
                     stage, c.metadata.get("config_hash"), self.cfg.hash())
        return c

    def _resume(self, stage: str, resume) -> ckpt.Checkpoint | None:
        if resume is None:
            return None
        c = ckpt.load_checkpoint(resume, stage)
        if c.metadata.get("complete"):
            raise ContractViolation(f"{resume} is a finished {stage} checkpoint; nothing to resume")
        return c

    def _periodic(self, stage: str, prefix: str, fixed: dict[str, nn.Module] | None = None,
                  carry: dict[str, TrainState] | None = None, **extra):
        """Checkpoint callback for ``run_steps`` plus its interval."""
        if not self.cfg.checkpoint_every:
            return None, 0

        def cb(st: TrainState, modules: dict[str, nn.Module]):
            arrays = module_arrays({**(fixed or {}), **modules})
            self._save(stage, arrays, {**(carry or {}), prefix: st}, partial=True, **extra)
        return cb, self.cfg.checkpoint_every

    # -- building and loading models ---------------------------------------------
    def build_vq(self) -> vqtok.VQTokenizer:
        c = self.cfg
        return vqtok.VQTokenizer(c.vq_codes, c.vq_dim, c.vq_factor, c.vq_channels)

    def build_vae(self) -> latentdm.VAE:
        return latentdm.VAE(self.cfg.vae_latent, self.cfg.vae_factor, self.cfg.vae_channels)

    def build_ldm(self) -> latentdm.Denoiser:
        return latentdm.Denoiser(self.schedule, self.cfg.vae_latent, self.cfg.ldm_channels)

    def build_ar(self) -> argen.ArModel:
        c = self.cfg
        return argen.ArModel(c.vq_codes, (c.ar_budget // c.vq_factor) ** 2, c.ar_width, c.ar_layers,
                             c.ar_heads, c.text_dim)

    def models(self, upto: str) -> Models:
        """Every trained component up to and including stage ``upto``, frozen."""
        need = TRAIN_STAGES[: TRAIN_STAGES.index(upto) + 1]
        m = Models()
        m.vq = self.build_vq()
        ckpt.load_into(m.vq, self.load("train-vq").subset("vq"))
        nncore.freeze(m.vq)
        if "train-ldm" in need:
            c = self.load("train-ldm")
            m.vae, m.ldm = self.build_vae(), self.build_ldm()
            ckpt.load_into(m.vae, c.subset("vae"))
            ckpt.load_into(m.ldm, c.subset("ldm"))
            nncore.freeze(m.vae)
            nncore.freeze(m.ldm)
        if "train-ladd" in need:
            m.ladd = ladd.build_ladd(m.ldm, self.cfg.vq_dim)
            ckpt.load_into(m.ladd, self.load("train-ladd").subset("ladd"))
            nncore.freeze(m.ladd)
        if "distill-cm" in need:
            stage = "train-pixel" if "train-pixel" in need else "distill-cm"
            m.dec = cm.decoder_from_teacher(m.ladd, self.cfg)
            ckpt.load_into(m.dec, self.load(stage).subset("dec"))
            nncore.freeze(m.dec)
        if "train-argen" in need:
            m.ar = self.build_ar()
            ckpt.load_into(m.ar, self.load("train-argen").subset("ar"))
            nncore.freeze(m.ar)
        return m

    # -- training stages -----------------------------------------------------------
    def train_vq(self, resume=None) -> dict:
        self.require("train-vq")
        x, _ = self.images("train")
        h, _ = self.heldout()
        r = self._resume("train-vq", resume)
        model = st = None
        if r is not None:
            model = self.build_vq()
            ckpt.load_into(model, r.subset("vq"))
            st = state_from(r, "vq")
        cb, every = self._periodic("train-vq", "vq")
        vq, res = vqtok.train_stage0_vq(x, self.cfg, h, model, st, cb, every)
        self._save("train-vq", module_arrays({"vq": vq}), {"vq": res.state}, metrics=res.metrics)
        write_curve(self.out / "curves" / "train-vq.csv", res.curve, ("step", "loss"))
        return res.metrics

    def train_ldm(self, resume=None) -> dict:
        """VAE first, then the base denoiser on its latents; one checkpoint holds both."""
        self.require("train-ldm")
        cfg = self.cfg
        x, _ = self.images("train")
        h, _ = self.heldout()
        r = self._resume("train-ldm", resume)
        phase = r.metadata.get("phase") if r is not None else None
        metrics: dict = {}
        if phase == "ldm":
            vae = self.build_vae()
            ckpt.load_into(vae, r.subset("vae"))
            nncore.freeze(vae)
            vae_state = state_from(r, "vae")
            metrics.update(r.metadata.get("metrics", {}))
        else:
            model = st = None
            if phase == "vae":
                model = self.build_vae()
                ckpt.load_into(model, r.subset("vae"))
                st = state_from(r, "vae")
            cb, every = self._periodic("train-ldm", "vae", phase="vae")
            vae, vres = latentdm.train_stage0_vae(x, cfg, h, model, st, cb, every)
            vae_state = vres.state
            metrics.update({f"vae_{k}": v for k, v in vres.metrics.items()})
            write_curve(self.out / "curves" / "train-vae.csv", vres.curve, ("step", "loss"))
        model = st = None
        if phase == "ldm":
            model = self.build_ldm()
            ckpt.load_into(model, r.subset("ldm"))
            st = state_from(r, "ldm")
        cb, every = self._periodic("train-ldm", "ldm", fixed={"vae": vae}, carry={"vae": vae_state},
                                   phase="ldm", metrics=metrics)
        ldm, lres = latentdm.train_stage0_ldm(x, vae, cfg, self.schedule, model, st, cb, every)
        write_curve(self.out / "curves" / "train-ldm.csv", lres.curve, ("step", "loss", "resolution"))
        metrics["ldm_final_loss"] = float(np.mean([row[1] for row in lres.curve[-100:]]))
        self._save("train-ldm", module_arrays({"vae": vae, "ldm": ldm}),
                   {"vae": vae_state, "ldm": lres.state}, metrics=metrics)
        return metrics

    def _conditioned(self, m: Models, split: str, latent_sizes) -> ladd.ConditionedData:
        x, _ = self.images(split) if split == "train" else self.heldout()
        return ladd.ConditionedData(x, m.vq, m.vae, latent_sizes, self.cfg.cond_sizes)

    def train_ladd(self, resume=None) -> dict:
        self.require("train-ladd")
        cfg = self.cfg
        m = self.models("train-ldm")
        x, _ = self.images("train")
        model = ladd.build_ladd(m.ldm, cfg.vq_dim)
        r = self._resume("train-ladd", resume)
        st = None
        if r is not None:
            ckpt.load_into(model, r.subset("ladd"))
            st = state_from(r, "ladd")
        cb, every = self._periodic("train-ladd", "ladd")
        res = ladd.train_stage1(model, x, m.vq, m.vae, cfg, self._conditioned(m, "train", cfg.stage1_sizes),
                                st, cb, every)
        hd = self._conditioned(m, "heldout", [cfg.decode_size])
        z0, C = hd.batch(torch.arange(hd.n), cfg.decode_size, cfg.cond_size)
        cond, uncond = ladd.paired_losses(model, z0, C, cfg.seed)
        metrics = {"heldout_cond_loss": cond, "heldout_base_loss": uncond}
        self._save("train-ladd", module_arrays({"ladd": model}), {"ladd": res.state}, metrics=metrics)
        write_curve(self.out / "curves" / "train-ladd.csv", res.curve, ("step", "loss", "resolution"))
        return metrics

    def distill_cm(self, resume=None) -> dict:
        self.require("distill-cm")
        cfg = self.cfg
        m = self.models("train-ladd")
        student, ema = cm.init_distill(m.ladd, cfg)
        r = self._resume("distill-cm", resume)
        st = None
        if r is not None:
            ckpt.load_into(student, r.subset("student"))
            ckpt.load_into(ema, r.subset("ema"))
            st = state_from(r, "cm")
        hd = self._conditioned(m, "heldout", [cfg.decode_size])
        z0, C = hd.batch(torch.arange(hd.n), cfg.decode_size, cfg.cond_size)
        before = cm.consistency_residual(ema, m.ladd, z0, C, cfg.seed, cfg.cm_intervals)
        cb, every = self._periodic("distill-cm", "cm")
        dec, res = cm.distill(m.ladd, self._conditioned(m, "train", [cfg.decode_size]), cfg,
                              student, ema, st, cb, every)
        after = cm.consistency_residual(dec, m.ladd, z0, C, cfg.seed, cfg.cm_intervals)
        metrics = {"residual_before": before, "residual_after": after}
        self._save("distill-cm", module_arrays({"dec": dec, "student": student}), {"cm": res.state},
                   metrics=metrics)
        write_curve(self.out / "curves" / "distill-cm.csv", res.curve, ("step", "loss"))
        return metrics

    def train_pixel(self, resume=None) -> dict:
        self.require("train-pixel")
        cfg = self.cfg
        m = self.models("distill-cm")
        dec = m.dec
        for p in dec.parameters():
            p.requires_grad_(True)
        dec.train()
        r = self._resume("train-pixel", resume)
        st = None
        if r is not None:
            ckpt.load_into(dec, r.subset("dec"))
            st = state_from(r, "pixel")
        x, _ = self.images("train")
        cb, every = self._periodic("train-pixel", "pixel")
        res = cm.train_stage2(dec, resize(x, cfg.decode_size), self._conditioned(m, "train", [cfg.decode_size]),
                              m.vq, m.vae, cfg, st, cb, every)
        nncore.freeze(dec)
        metrics = {"final_loss": float(np.mean([row[1] for row in res.curve[-50:]]))}
        self._save("train-pixel", module_arrays({"dec": dec}), {"pixel": res.state}, metrics=metrics,
                   mode=cfg.mode)
        write_curve(self.out / "curves" / "train-pixel.csv", res.curve, ("step", "loss"))
        return metrics

    def tokenize_corpus(self, m: Models) -> Path:
        """Write the AR training set (token grids at ``ar_budget``, raster order) to disk."""
        x, caps = self.images("train")
        toks = ladd.tokenize_images(m.vq, x, self.cfg.ar_budget).reshape(len(x), -1)
        path = self.data_dir / "tokens.bin"
        argen.write_tokenized(path, toks, self.cfg.vq_codes, caps)
        return path

    def train_argen(self, resume=None) -> dict:
        self.require("train-argen")
        cfg = self.cfg
        m = self.models("train-vq")
        tokens, _, caps = argen.read_tokenized(self.tokenize_corpus(m))
        ids = data.caption_tensor(caps)
        torch.manual_seed(cfg.seed + 6)
        model = self.build_ar()
        r = self._resume("train-argen", resume)
        st = None
        if r is not None:
            ckpt.load_into(model, r.subset("ar"))
            st = state_from(r, "ar")
        cb, every = self._periodic("train-argen", "ar")
        res = argen.train_argen(model, tokens, ids, cfg, resume=st, on_checkpoint=cb, every=every)
        metrics = {"final_loss": float(np.mean([row[1] for row in res.curve[-50:]]))}
        self._save("train-argen", module_arrays({"ar": model}), {"ar": res.state}, metrics=metrics)
        write_curve(self.out / "curves" / "train-argen.csv", res.curve, ("step", "loss"))
        return metrics

    # -- reconstruction and generation -------------------------------------------------
    def seeds(self, n: int, offset: int = 0) -> list[int]:
        return [(self.cfg.seed + offset) * 100_003 + i for i in range(n)]

    @torch.no_grad()
    def reconstruct(self, m: Models, images: torch.Tensor, seeds: Sequence[int], cond_size: int | None = None,
                    mode: str | None = None) -> torch.Tensor:
        """Few-step reconstruction at ``decode_size`` from the condition at ``cond_size``."""
        cs = cond_size or self.cfg.cond_size

        def one(sl):
            C = ladd.make_condition(m.vq, images[sl], cs)
            return m.vae.decode(cm.decode(m.dec, C, list(seeds[sl]), mode))
        return batched(one, len(images))

    @torch.no_grad()
    def reconstruct_ddim(self, m: Models, images: torch.Tensor, seeds: Sequence[int],
                         cond_size: int | None = None) -> torch.Tensor:
        """Stage-1 baseline: LADD with multi-step deterministic DDIM."""
        cs = cond_size or self.cfg.cond_size
        hw = self.cfg.decode_size // self.cfg.vae_factor

        def one(sl):
            C = ladd.make_condition(m.vq, images[sl], cs)
            shape = (len(C), self.cfg.vae_latent, hw, hw)
            z = latentdm.ddim_sample(m.ladd, self.schedule, self.cfg.ddim_steps, shape, condition=C,
                                     seed=list(seeds[sl]))
            return m.vae.decode(z)
        return batched(one, len(images))

    @torch.no_grad()
    def decode_tokens(self, m: Models, tokens: torch.Tensor, seeds: Sequence[int]) -> torch.Tensor:
        g = self.cfg.ar_budget // self.cfg.vq_factor
        grid = tokens.reshape(len(tokens), g, g)

        def one(sl):
            C = ladd.condition_from_tokens(m.vq, grid[sl])
            return m.vae.decode(cm.decode(m.dec, C, list(seeds[sl])))
        return batched(one, len(tokens))

    @torch.no_grad()
    def generate_images(self, m: Models, captions: Sequence[Sequence[str]], s: float,
                        seeds: Sequence[int], sampling: str | None = None) -> torch.Tensor:
        cfg = self.cfg
        ids = data.caption_tensor(captions)
        toks = argen.generate(m.ar, ids, None, s, sampling or cfg.sampling, list(seeds), cfg.top_k,
                              cfg.temperature)
        return self.decode_tokens(m, toks, seeds)

    # -- evaluation commands ---------------------------------------------------------------
    def _ref(self, images):
        return resize(images, self.cfg.decode_size).clamp(0, 1)

    def eval(self) -> dict:
        self.require("eval")
        cfg = self.cfg
        m = self.models("train-argen")
        x, caps = self.heldout()
        ref = self._ref(x)
        seeds = self.seeds(len(x))
        rec = evalkit.eval_reconstruction(lambda _x, s: self.reconstruct(m, x, s), ref, seeds,
                                          cfg.proxy_seed, cfg.hash(), {"mode": cfg.mode})
        base = evalkit.eval_reconstruction(lambda _x, s: self.reconstruct_ddim(m, x, s), ref, seeds,
                                           cfg.proxy_seed, cfg.hash(), {"ddim_steps": cfg.ddim_steps})
        gen = evalkit.eval_generation(lambda c, s, sd: self.generate_images(m, c, s, sd), caps, ref,
                                      cfg.cfg_scale, seeds, cfg.proxy_seed, cfg.hash())
        rand = torch.randint(cfg.vq_codes, (len(x), (cfg.ar_budget // cfg.vq_factor) ** 2),
                             generator=torch.Generator().manual_seed(cfg.seed))
        rand_fid = evalkit.fid_proxy(self.decode_tokens(m, rand, seeds), ref, cfg.proxy_seed) \
            if len(x) >= 32 else float("nan")
        report = {"config_hash": cfg.hash(), "proxy_seed": cfg.proxy_seed, "n": len(x), "seeds": seeds,
                  "reconstruction": rec.to_dict(), "stage1_ddim_baseline": base.to_dict(),
                  "generation": gen.to_dict(), "random_token_fid_proxy": rand_fid}
        rep = self.out / "reports"
        (rep / "eval.json").write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
        evalkit.write_csv(rep / "eval_recon.csv", rec.per_image)
        evalkit.write_csv(rep / "eval_gen.csv", gen.per_image)
        return report

    def reconstruct_dir(self, input_dir: Path | str, out_dir: Path | str | None = None) -> Path:
        """Reconstruct every PNG in ``input_dir``; writes PNGs and a per-image CSV."""
        self.require("reconstruct")
        m = self.models("train-pixel")
        files = sorted(Path(input_dir).glob("*.png"))
        if not files:
            raise ContractViolation(f"no PNG files in {input_dir}")
        out = Path(out_dir) if out_dir else self.out / "reconstruct"
        out.mkdir(parents=True, exist_ok=True)
        imgs = torch.cat([resize(data.to_tensor([data.load_png(f)]), self.cfg.data_resolution) for f in files])
        seeds = self.seeds(len(files))
        recon = self.reconstruct(m, imgs, seeds)
        rows = evalkit.per_image_metrics(recon, self._ref(imgs), self.cfg.proxy_seed)
        for f, img, row, sd in zip(files, data.to_images(recon), rows, seeds):
            data.save_png(out / f.name, img)
            row["index"] = f.name
            row["seed"] = sd
        evalkit.write_csv(out / "reconstruct.csv", rows)
        return out

    def generate(self, captions: Sequence[Sequence[str]] | None = None, out_dir=None,
                 s: float | None = None) -> Path:
        self.require("generate")
        m = self.models("train-argen")
        if not captions:
            captions = self.heldout()[1]
        out = Path(out_dir) if out_dir else self.out / "generate"
        out.mkdir(parents=True, exist_ok=True)
        seeds = self.seeds(len(captions))
        imgs = self.generate_images(m, captions, self.cfg.cfg_scale if s is None else s, seeds)
        with open(out / "captions.tsv", "w", encoding="utf-8") as fh:
            for i, (img, cap) in enumerate(zip(data.to_images(imgs), captions)):
                name = f"{i:04d}.png"
                data.save_png(out / name, img)
                fh.write(f"{name}\t{' '.join(cap)}\n")
        return out

    def sweep_tokens(self) -> dict:
        self.require("sweep-tokens")
        cfg = self.cfg
        m = self.models("train-pixel")
        x, _ = self.heldout()
        ref = self._ref(x)
        out = evalkit.sweep_tokens(lambda cs: (lambda imgs, sd: self.reconstruct(m, imgs, sd, cs)), x,
                                   cfg.cond_sizes, [cfg.seed + 1 + k for k in cfg.eval_seeds], cfg.proxy_seed,
                                   cfg.hash(), lambda cs: vqtok.token_count(cs, cfg.vq_factor), refs=ref)
        self._write_sweep("sweep_tokens", out, "tokens", lambda k: out[k].extra["tokens"])
        return {k: v.to_dict() for k, v in out.items()}

    def sweep_cfg(self) -> dict:
        self.require("sweep-cfg")
        cfg = self.cfg
        m = self.models("train-argen")
        x, caps = self.heldout()
        ref = self._ref(x)
        out = evalkit.sweep_cfg(lambda c, s, sd: self.generate_images(m, c, s, sd), caps, ref, cfg.cfg_scales,
                                self.seeds(len(x)), cfg.proxy_seed, cfg.hash())
        self._write_sweep("sweep_cfg", out, "cfg_scale", lambda k: k)
        return {k: v.to_dict() for k, v in out.items()}

    def _write_sweep(self, name: str, results: dict, xname: str, xval) -> None:
        rep = self.out / "reports"
        doc = {"config_hash": self.cfg.hash(), "proxy_seed": self.cfg.proxy_seed, "x": xname,
               "points": [{xname: xval(k), **results[k].to_dict()} for k in sorted(results)]}
        (rep / f"{name}.json").write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
        rows = [{xname: xval(k), **results[k].metrics} for k in sorted(results)]
        evalkit.write_csv(rep / f"{name}.csv", rows)
        plot_report(rep / f"{name}.json", rep / f"{name}.png")


def plot_report(json_path: Path | str, png_path: Path | str,
                keys: Sequence[str] = ("mse", "psnr", "ssim", "proxy")) -> None:
    """Render metric curves from a sweep report written by :meth:`Run._write_sweep`."""
    doc = json.loads(Path(json_path).read_text(encoding="utf-8"))
    xname = doc["x"]
    pts = {p[xname]: evalkit.EvalReport(p["metrics"], p["n"]) for p in doc["points"]}
    evalkit.plot_sweep(pts, [k for k in keys if k in doc["points"][0]["metrics"]], xname, png_path)
