"""The twelve numbered acceptance criteria, one test each.

Every test prints a ``criterion N PASS|FAIL`` line; the lines are repeated
in the pytest terminal summary. Criteria 6, 7, 9 and 10 use the session's
trained acceptance run (see ``conftest.trained``); 12 runs the smoke
pipeline twice.
"""
import copy
import json
import math

import numpy as np
import torch

from lctok import argen, checkpoint, consistency as cm, data, evalkit, ladd, latentdm, vqtok
from lctok.evalkit import PerceptualProxy

from conftest import run_smoke
from oracles import (OracleEps, autograd_at, brute_force_tokens, central_diff, grad_check, micro_ar,
                     micro_denoiser, micro_ladd, micro_vae, pick_coords, randomize, rel_err)
from verdicts import verdict


def _micro_dec(mode="one_step"):
    return cm.ConsistencyDecoder(micro_ladd(), 0, mode, 500, latent_hw=4, intervals=32)


def test_criterion_01_gradients_match_finite_differences():
    g = torch.Generator().manual_seed(0)
    z0 = torch.randn(3, 2, 8, 8, generator=g)
    eps = torch.randn(3, 2, 8, 8, generator=g)
    t = torch.tensor([40, 420, 910])
    C = torch.randn(3, 4, 2, 2, generator=g)

    def df_base(m):
        dt = next(m.parameters()).dtype
        return lambda: latentdm.diffusion_loss(m, z0.to(dt), t, eps.to(dt))

    def df_cond(m):
        dt = next(m.parameters()).dtype
        return lambda: ladd.conditional_loss(m, z0.to(dt), C.to(dt), t, eps.to(dt))

    vae = micro_vae()
    vae.requires_grad_(False)
    x0 = torch.rand(2, 3, 16, 16, generator=g)

    def pr(m):
        dt = next(m.parameters()).dtype
        v, proxy = copy.deepcopy(vae).to(dt), PerceptualProxy(1234).to(dt)
        return lambda: cm.pixel_recon_loss(m, v, C[:2].to(dt), x0.to(dt), "one_step", [3, 4], proxy=proxy)

    toks = torch.randint(16, (3, 6), generator=g)
    ids = data.caption_tensor([["one", "large", "red", "circle", "at", "top"]] * 3)

    def ce(m):
        return lambda: argen.ar_loss(m, toks, ids, drop=torch.tensor([False, True, False]))

    cases = {"L_DF base": (df_base, randomize(micro_denoiser(), 1)),
             "L_DF conditional": (df_cond, micro_ladd()),
             "L_PR": (pr, _micro_dec()),
             "L_CE": (ce, micro_ar())}
    errs = {name: grad_check(make, module, n=100) for name, (make, module) in cases.items()}
    ok = all(e64 < 1e-6 and e32 < 1e-3 for e64, e32 in errs.values())
    detail = "; ".join(f"{k} fp64 {a:.1e} fp32 {b:.1e}" for k, (a, b) in errs.items())
    verdict(1, "gradient correctness", ok, detail)


def test_criterion_02_zero_conv_init_equivalence():
    model = ladd.build_ladd(randomize(micro_denoiser(), 3), 4)
    g = torch.Generator().manual_seed(1)
    worst = 0.0
    with torch.no_grad():
        for _ in range(100):
            z = torch.randn(1, 2, 8, 8, generator=g)
            t = torch.randint(0, 1001, (1,), generator=g)
            side = int(torch.randint(1, 5, (1,), generator=g))
            C = torch.randn(1, 4, side, side, generator=g)
            worst = max(worst, (model(z, t, C) - model.base(z, t)).abs().max().item())
    verdict(2, "zero-conv init property", worst <= 1e-6, f"max |diff| {worst:.2e} over 100 triples")


def test_criterion_03_schedule_and_ddim_exactness():
    s = latentdm.make_schedule(1000)
    ident = float(np.max(np.abs(s.alpha ** 2 + s.beta ** 2 - 1.0)))
    g = torch.Generator().manual_seed(0)
    z0 = torch.randn(2, 4, 8, 8, generator=g, dtype=torch.float64)
    eps = torch.randn(2, 4, 8, 8, generator=g, dtype=torch.float64)
    exact0 = torch.equal(s.diffuse(z0, 0, eps), z0)
    out = latentdm.ddim_sample(OracleEps(s, z0), s, 1000, x_T=s.diffuse(z0, 1000, eps))
    inv = (out - z0).abs().max().item()
    ok = ident <= 1e-6 and exact0 and inv <= 1e-4
    verdict(3, "schedule and diffusion exactness", ok,
            f"max |a^2+b^2-1| {ident:.1e}, diffuse(z0,0)==z0 {exact0}, DDIM inversion {inv:.1e}")


def test_criterion_04_vq_matches_brute_force():
    g = torch.Generator().manual_seed(7)
    codes = torch.randn(512, 32, generator=g)
    flat = torch.randn(10_000, 32, generator=g)
    pairs = torch.randint(512, (500, 2), generator=g)
    flat[:500] = 0.5 * (codes[pairs[:, 0]] + codes[pairs[:, 1]])
    codes[300] = codes[12]
    flat[500:600] = codes[12] + 1e-3 * torch.randn(100, 32, generator=g)
    got = vqtok.nearest_code(flat, codes).numpy()
    want = brute_force_tokens(flat.numpy(), codes.numpy())
    agree = float((got == want).mean())
    ok = agree == 1.0 and bool((got[500:600] != 300).all())
    verdict(4, "VQ oracle equivalence", ok, f"agreement {agree:.2%} on 10^4 embeddings incl. 600 ties")


def test_criterion_05_stop_gradient_bitwise():
    dec = _micro_dec("two_step")
    g = torch.Generator().manual_seed(2)
    C = torch.randn(2, 4, 2, 2, generator=g)
    target = torch.randn(2, 2, 4, 4, generator=g)
    params = [p for p in dec.parameters() if p.requires_grad]
    got = torch.autograd.grad(((cm.decode_two_step(dec, C, [5, 6]) - target) ** 2).sum(), params,
                              allow_unused=True)
    eps, eps2 = cm.decode_noise(dec.latent_shape(2), [5, 6])
    with torch.no_grad():
        z_mid = dec(eps, C, dec.T).clone()
    ref_out = dec(dec.schedule.diffuse(z_mid, dec.t_mid, eps2), C, dec.t_mid)
    ref = torch.autograd.grad(((ref_out - target) ** 2).sum(), params, allow_unused=True)
    same = all((a is None and b is None) or (a is not None and b is not None and torch.equal(a, b))
               for a, b in zip(got, ref))
    verdict(5, "stop-gradient contract", same, f"{len(params)} parameter tensors compared bitwise")


def test_criterion_06_stage2_beats_ddim_baseline(eval_report):
    new = eval_report["reconstruction"]["metrics"]
    base = eval_report["stage1_ddim_baseline"]["metrics"]
    gains = {k: 1 - new[k] / base[k] for k in ("mse", "proxy")}
    ok = all(v >= 0.05 for v in gains.values())
    verdict(6, "stage-2 vs 25-step DDIM baseline", ok,
            ", ".join(f"{k} {base[k]:.4f} -> {new[k]:.4f} ({gains[k]:+.1%})" for k in gains))


def test_criterion_07_token_budget_trend(token_sweep):
    pts = sorted(token_sweep["points"], key=lambda p: p["tokens"])
    mse = [p["metrics"]["mse"] for p in pts]
    ok = len(mse) == 3 and all(b <= a for a, b in zip(mse, mse[1:])) and len(token_sweep["points"][0]["seeds"]) > 0
    verdict(7, "token-budget trend", ok,
            ", ".join(f"{p['tokens']} tokens mse {p['metrics']['mse']:.5f}" for p in pts))


def test_criterion_08_cfg_exactness():
    g = torch.Generator().manual_seed(0)
    lc, lu = torch.randn(64, 512, generator=g), torch.randn(64, 512, generator=g)
    a, b = lc.double().numpy(), lu.double().numpy()
    exact = {s: np.array_equal(argen.cfg_logits(lc, lu, s).numpy(), (b + s * (a - b)).astype(np.float32))
             for s in (0.0, 1.0, 1.5, 2.0, 3.0, 7.0)}
    pc, pu = torch.randn(10_000, 512, generator=g), torch.randn(10_000, 512, generator=g)
    argmax_ok = torch.equal(argen.cfg_logits(pc, pu, 1.0).argmax(-1), pc.argmax(-1))
    ok = all(exact.values()) and argmax_ok
    verdict(8, "CFG exactness", ok, f"bitwise per scale {exact}, s=1 argmax agrees on 10^4 pairs {argmax_ok}")


def test_criterion_09_ar_memorization(trained, corpus64, memorized_ar):
    tokens, ids, _ = corpus64
    model, _ = memorized_ar
    loss = argen.corpus_loss(model, tokens, ids)
    out = argen.generate(model, ids, None, 1.0, "greedy", 0)
    acc = (out == tokens).double().mean().item()
    verdict(9, "AR memorization", loss < 0.1 and acc >= 0.9,
            f"loss {loss:.4f} nats/token, greedy s=1 reproduces {acc:.1%} of positions")


def test_criterion_10_true_condition_beats_degenerate(trained, models, heldout):
    x = heldout[0]
    ref = trained._ref(x)
    seeds = trained.seeds(len(x))
    C = ladd.make_condition(models.vq, x, trained.cfg.cond_size)
    with torch.no_grad():
        good = models.vae.decode(cm.decode(models.dec, C, seeds))
        bad = models.vae.decode(cm.decode(models.dec, ladd.degenerate_condition(models.vq, C), seeds))
    mse = lambda y: ((y - ref) ** 2).flatten(1).mean(1)
    frac = (mse(good) < mse(bad)).double().mean().item()
    verdict(10, "conditioning effectiveness", len(x) == 64 and frac >= 0.8,
            f"true condition wins on {frac:.1%} of {len(x)} held-out images")


def test_criterion_11_metric_self_tests():
    imgs = np.stack([s.image for s in data.gen_dataset(64, 32, seed=0)])
    a = imgs[0]
    checks = {
        "psnr(a,a)=cap": evalkit.psnr(a, a) == evalkit.PSNR_CAP,
        "ssim(a,a)=1": abs(evalkit.ssim(a, a) - 1.0) <= 1e-12,
        "proxy(a,a)=0": evalkit.perceptual_proxy(a, a) == 0.0,
        "fid(S,S)<=1e-4": evalkit.fid_proxy(imgs, imgs) <= 1e-4,
    }
    rng = np.random.default_rng(4)
    za, zb = rng.standard_normal((2, 5_000, 1))
    for delta in (0.5, 1.0, 3.0):
        fa = (za - za.mean()) / za.std(ddof=1)
        fb = delta + (zb - zb.mean()) / zb.std(ddof=1)
        got = evalkit.fid_from_features(fa, fb)
        checks[f"1-D delta={delta}"] = math.isclose(got, delta ** 2, rel_tol=0.01)
    verdict(11, "metric self-tests", all(checks.values()), ", ".join(f"{k} {v}" for k, v in checks.items()))


def test_criterion_12_pipeline_determinism_and_persistence(smoke_run, tmp_path):
    again = run_smoke(tmp_path / "again")
    first = json.loads((smoke_run / "reports" / "eval.json").read_text())
    second = json.loads((again / "reports" / "eval.json").read_text())
    same_report = first == second
    src = checkpoint.load_checkpoint(smoke_run / "checkpoints" / "train-pixel.ckpt")
    path = tmp_path / "copy.ckpt"
    checkpoint.save_checkpoint(path, src.arrays, src.metadata)
    back = checkpoint.load_checkpoint(path)
    same_ckpt = back.arrays.keys() == src.arrays.keys() and all(
        back.arrays[k].dtype == v.dtype and torch.equal(back.arrays[k], v) for k, v in src.arrays.items())
    verdict(12, "pipeline determinism and persistence", same_report and same_ckpt,
            f"eval.json identical across two runs {same_report}, "
            f"checkpoint round-trip bitwise over {len(src.arrays)} arrays {same_ckpt}")
