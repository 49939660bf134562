"""Shared fixtures.

``trained`` runs the whole staged pipeline once per session at the
acceptance budget (roughly a quarter of an hour on one CPU core). Point
``ACCEPT_RUN_DIR`` at a directory to keep that run between sessions;
completed stages are then reused.
"""
from __future__ import annotations

import json
import os
from importlib import resources
from pathlib import Path

import pytest
import torch

from lctok import argen, cli, data, ladd
from lctok.checkpoint import load_checkpoint
from lctok.config import RunConfig
from lctok.pipeline import TRAIN_STAGES, Run

import verdicts

# Stage budgets for the acceptance run: large enough for every directional
# check to be meaningful, small enough for the suite's time limits.
ACCEPT = dict(
    n_train=2000, n_heldout=64, eval_n=64,
    vq_steps=400, vae_steps=600, ldm_steps=1500,
    stage1_steps=[2500, 1000], cm_steps=2000, pixel_steps=500,
    ar_steps=400, ar_batch=64,
)


@pytest.fixture(autouse=True)
def _single_thread():
    torch.set_num_threads(1)


@pytest.fixture(scope="session")
def accept_cfg() -> RunConfig:
    return RunConfig().replace(**ACCEPT)


@pytest.fixture(scope="session")
def trained(tmp_path_factory, accept_cfg) -> Run:
    cached = os.environ.get("ACCEPT_RUN_DIR")
    out = Path(cached) if cached else tmp_path_factory.mktemp("accept")
    run = Run(out, accept_cfg)
    if run.done("train-vq"):
        got = load_checkpoint(run.ckpt_path("train-vq")).metadata["config_hash"]
        if got != accept_cfg.hash():
            pytest.fail(f"{out} holds a run with config {got}; delete it or unset ACCEPT_RUN_DIR")
    if not run.done("gen-data"):
        run.gen_data()
    for stage in TRAIN_STAGES:
        if not run.done(stage):
            getattr(run, stage.replace("-", "_"))()
    return run


def _cached_report(run: Run, name: str, make):
    path = run.out / "reports" / name
    if path.exists():
        doc = json.loads(path.read_text())
        if doc.get("config_hash") == run.cfg.hash():
            return doc
    make()
    return json.loads(path.read_text())


@pytest.fixture(scope="session")
def eval_report(trained) -> dict:
    return _cached_report(trained, "eval.json", trained.eval)


@pytest.fixture(scope="session")
def token_sweep(trained) -> dict:
    return _cached_report(trained, "sweep_tokens.json", trained.sweep_tokens)


@pytest.fixture(scope="session")
def models(trained):
    return trained.models("train-argen")


@pytest.fixture(scope="session")
def heldout(trained):
    x, caps = trained.heldout()
    return x, caps


@pytest.fixture(scope="session")
def corpus64(trained, models):
    """64 training images with distinct captions, their token sequences and caption ids."""
    x, caps = trained.images("train")
    seen, idx = set(), []
    for i, c in enumerate(caps):
        key = " ".join(c)
        if key not in seen:
            seen.add(key)
            idx.append(i)
        if len(idx) == 64:
            break
    sel = torch.tensor(idx)
    tokens = ladd.tokenize_images(models.vq, x[sel], trained.cfg.ar_budget).reshape(64, -1)
    ids = data.caption_tensor([caps[i] for i in idx])
    return tokens, ids, [caps[i] for i in idx]


@pytest.fixture(scope="session")
def memorized_ar(trained, corpus64):
    """An AR model trained to convergence on the 64-sequence corpus."""
    tokens, ids, _ = corpus64
    cfg = trained.cfg
    torch.manual_seed(cfg.seed)
    model = trained.build_ar()
    res = argen.train_argen(model, tokens, ids, cfg, steps=300)
    model.eval()
    return model, res


def smoke_config() -> Path:
    return Path(str(resources.files("lctok.configs").joinpath("smoke.conf")))


def run_smoke(out: Path) -> Path:
    """Full ``lctok all`` at minimum budgets; about a minute on one core."""
    code = cli.main(["all", "--config", str(smoke_config()), "--out", str(out)])
    assert code == 0, f"smoke pipeline exited with {code}"
    return out


@pytest.fixture(scope="session")
def smoke_run(tmp_path_factory) -> Path:
    return run_smoke(tmp_path_factory.mktemp("smoke"))


def pytest_terminal_summary(terminalreporter):
    if verdicts.LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(verdicts.LINES):
            terminalreporter.write_line(line)
