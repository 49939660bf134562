"""``lctok`` command line.

Every command takes ``--config``, ``--seed``, ``--out`` and (for training
stages) ``--resume``. Settings resolve in this order: reference defaults,
the config file, ``LCTOK_<KEY>`` environment variables, then ``--seed``.
Errors exit with the status code of their category (see ``lctok.errors``).
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import torch
from filelock import FileLock, Timeout

from .config import load_config
from .errors import LctokError, RunLocked
from .pipeline import TRAIN_STAGES, Run, plot_report

log = logging.getLogger("lctok")

COMMANDS = ("gen-data",) + TRAIN_STAGES + (
    "reconstruct", "generate", "eval", "sweep-tokens", "sweep-cfg", "all", "plot")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="run config file (key = value lines)")
    common.add_argument("--seed", type=int, help="override the config seed")
    common.add_argument("--out", type=Path, default=Path("runs/default"), help="run directory")

    p = argparse.ArgumentParser(prog="lctok", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("gen-data", parents=[common], help="render, corrupt and filter the synthetic corpus")
    for stage in TRAIN_STAGES:
        sp = sub.add_parser(stage, parents=[common], help=f"run training stage {stage}")
        sp.add_argument("--resume", type=Path, help="partial checkpoint of this stage to continue from")
    sp = sub.add_parser("reconstruct", parents=[common], help="reconstruct a directory of PNGs")
    sp.add_argument("--input", type=Path, required=True)
    sp.add_argument("--output", type=Path)
    sp = sub.add_parser("generate", parents=[common], help="caption-to-image generation")
    sp.add_argument("--caption", action="append", default=[], help="caption text; repeatable")
    sp.add_argument("--scale", type=float, help="CFG scale (default: cfg_scale)")
    sp.add_argument("--output", type=Path)
    sub.add_parser("eval", parents=[common], help="held-out reconstruction and generation report")
    sub.add_parser("sweep-tokens", parents=[common], help="reconstruction quality per token budget")
    sub.add_parser("sweep-cfg", parents=[common], help="generation quality per CFG scale")
    sub.add_parser("all", parents=[common], help="every stage in order, then eval and both sweeps")
    sp = sub.add_parser("plot", parents=[common], help="redraw a sweep plot from its JSON report")
    sp.add_argument("report", type=Path)
    sp.add_argument("--png", type=Path)
    return p


def _setup_logging(out: Path) -> None:
    root = logging.getLogger("lctok")
    root.setLevel(logging.INFO)
    for h in list(root.handlers):
        root.removeHandler(h)
        h.close()
    fmt = logging.Formatter("%(asctime)s %(levelname)s %(name)s: %(message)s")
    fh = logging.FileHandler(out / "run.log", encoding="utf-8")
    fh.setFormatter(fmt)
    sh = logging.StreamHandler(sys.stderr)
    sh.setFormatter(fmt)
    root.addHandler(fh)
    root.addHandler(sh)


def dispatch(run: Run, args) -> object:
    cmd = args.command
    resume = getattr(args, "resume", None)
    if cmd == "gen-data":
        return run.gen_data()
    if cmd == "train-vq":
        return run.train_vq(resume)
    if cmd == "train-ldm":
        return run.train_ldm(resume)
    if cmd == "train-ladd":
        return run.train_ladd(resume)
    if cmd == "distill-cm":
        return run.distill_cm(resume)
    if cmd == "train-pixel":
        return run.train_pixel(resume)
    if cmd == "train-argen":
        return run.train_argen(resume)
    if cmd == "reconstruct":
        return str(run.reconstruct_dir(args.input, args.output))
    if cmd == "generate":
        return str(run.generate([c.split() for c in args.caption], args.output, args.scale))
    if cmd == "eval":
        return run.eval()["reconstruction"]["metrics"]
    if cmd == "sweep-tokens":
        return {k: v["metrics"] for k, v in run.sweep_tokens().items()}
    if cmd == "sweep-cfg":
        return {k: v["metrics"] for k, v in run.sweep_cfg().items()}
    if cmd == "all":
        run.gen_data()
        for stage in TRAIN_STAGES:
            getattr(run, stage.replace("-", "_"))()
        run.sweep_tokens()
        run.sweep_cfg()
        return run.eval()["reconstruction"]["metrics"]
    raise AssertionError(cmd)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "plot":
            png = args.png or args.report.with_suffix(".png")
            plot_report(args.report, png)
            print(png)
            return 0
        cfg = load_config(args.config)
        cfg = cfg.replace(stage=args.command, **({"seed": args.seed} if args.seed is not None else {}))
        args.out.mkdir(parents=True, exist_ok=True)
        lock = FileLock(str(args.out / "run.lock"))
        try:
            lock.acquire(timeout=0)
        except Timeout:
            raise RunLocked(f"run directory {args.out} is in use by another process") from None
        try:
            _setup_logging(args.out)
            torch.set_num_threads(cfg.threads)
            torch.use_deterministic_algorithms(True)
            log.info("command %s, config hash %s", args.command, cfg.hash())
            log.info("resolved config:\n%s", cfg.dumps())
            result = dispatch(Run(args.out, cfg), args)
            log.info("%s finished", args.command)
        finally:
            lock.release()
    except LctokError as exc:
        print(f"lctok: {type(exc).__name__}: {exc}", file=sys.stderr)
        return exc.exit_code
    print(json.dumps(result, indent=2, sort_keys=True, default=str))
    return 0


if __name__ == "__main__":
    sys.exit(main())
