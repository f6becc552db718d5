"""Command-line entry point.

Every subcommand takes ``--out`` and writes exactly one ``run_manifest.json``
there. Exit status: 0 success, 1 usage error, 2 runtime failure.

The optional ``--config`` YAML file uses the same sections as
``ExperimentConfig``: ``phantom``, ``counts``, ``stage1``, ``stage2``,
``surrogate`` and ``n_bins``. Each command reads only the sections it needs.
Command-line flags override file values.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
import time
from dataclasses import asdict
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np
import yaml

from .checkpoint import CheckpointError, load_checkpoint
from .data_io import DatasetError, load_dataset, load_eval_split, load_segmentation_split, read_rgb
from .evalkit import (
    MetricsReport,
    SurrogateConfig,
    evaluate_methods,
    load_surrogate,
    pixel_accuracy,
    plot_report,
    save_surrogate,
    train_surrogate_sb,
)
from .networks import apply_generator
from .phantom import MANIFEST_NAME, CorpusCounts, PhantomConfig, PackingError, export_corpus, to_uint8, write_png
from .pipeline import ExperimentConfig, build_methods, run_experiment
from .stain_space import StainMatrixError
from .trainer import DivergenceError, TrainConfig, network_from_checkpoint, set_single_thread, train_stage1, train_stage2

logger = logging.getLogger("ihcbridge")

RUN_MANIFEST = "run_manifest.json"
EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2
METHODS = ("identity", "proposed", "analytic", "oracle")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _load_config(path: Optional[str]) -> ExperimentConfig:
    if path is None:
        return ExperimentConfig()
    raw = yaml.safe_load(Path(path).read_text()) or {}
    if not isinstance(raw, dict):
        raise UsageError(f"config {path} must be a mapping")
    unknown = set(raw) - {"phantom", "counts", "stage1", "stage2", "surrogate", "n_bins"}
    if unknown:
        raise UsageError(f"unknown config sections: {sorted(unknown)}")
    try:
        return ExperimentConfig(**raw)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid config {path}: {exc}") from exc


def _write_manifest(out: Path, args, config: dict, inputs: Dict[str, str], artifacts: Sequence[Path],
                    started: float) -> Path:
    hashes = {str(p.relative_to(out)) if p.is_relative_to(out) else str(p): _sha256(p) for p in sorted(artifacts)}
    manifest = {
        "command": args.command,
        "argv": sys.argv[1:],
        "config": config,
        "seed": args.seed,
        "inputs": inputs,
        "output": str(out),
        "artifacts": hashes,
        "wall_time_s": time.perf_counter() - started,
    }
    path = out / RUN_MANIFEST
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def _need_dir(path: str, what: str) -> Path:
    p = Path(path)
    if not p.is_dir():
        raise UsageError(f"{what} {p} is not a directory")
    return p


# subcommands ---------------------------------------------------------------

def cmd_gen_data(args, cfg: ExperimentConfig, out: Path):
    phantom = cfg.phantom
    if args.seed is not None:
        phantom = PhantomConfig.from_dict({**asdict(phantom), "seed": args.seed})
    counts = cfg.counts
    for name in ("A", "B", "C", "eval", "sb"):
        value = getattr(args, f"n_{name.lower()}")
        if value is not None:
            counts = CorpusCounts(**{**asdict(counts), name: value})
    if counts.total() == 0:
        raise UsageError("empty corpus: every split count is zero")
    export_corpus(phantom, out, counts)
    config = {"phantom": asdict(phantom), "counts": asdict(counts)}
    return config, {}, [out / MANIFEST_NAME]


def cmd_train(args, cfg: ExperimentConfig, out: Path):
    if args.stage == 2 and args.stage1_ckpt is None:
        raise UsageError("stage 2 requires --stage1-ckpt")
    base = cfg.stage1 if args.stage == 1 else cfg.stage2
    overrides = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.steps is not None:
        overrides["steps"] = args.steps
    if args.single_thread:
        overrides["single_thread"] = True
    train_cfg = TrainConfig.from_dict({**base.to_dict(), **overrides, "out_dir": str(out)})
    data = _need_dir(args.data, "data dir")
    if args.stage == 1:
        datasets = tuple(load_dataset(data, d) for d in ("A", "B", "C"))
        ckpt = train_stage1(train_cfg, datasets, resume_from=args.resume, out_dir=out)
    else:
        datasets = tuple(load_dataset(data, d) for d in ("A", "B"))
        ckpt = train_stage2(train_cfg, datasets, args.stage1_ckpt, resume_from=args.resume, out_dir=out)
    inputs = {"data": str(data)}
    if args.stage1_ckpt:
        inputs["stage1_ckpt"] = str(args.stage1_ckpt)
    if args.resume:
        inputs["resume"] = str(args.resume)
    print(ckpt)
    return train_cfg.to_dict(), inputs, [ckpt, ckpt.parent.parent / "log.jsonl"]


def cmd_translate(args, cfg: ExperimentConfig, out: Path):
    src = _need_dir(args.input, "input dir")
    ckpt = load_checkpoint(args.ckpt)
    g_ab = network_from_checkpoint(ckpt, args.network)
    files = sorted(src.glob("*.png"))
    if not files:
        logger.warning("no PNG files in %s; nothing to translate", src)
    written: List[Path] = []
    for f in files:
        patch = read_rgb(f).astype(np.float32) / np.float32(255.0)
        y = apply_generator(g_ab, patch[None])[0]
        write_png(out / f.name, to_uint8(y))
        written.append(out / f.name)
    return {"network": args.network}, {"ckpt": str(args.ckpt), "input": str(src)}, written


def cmd_train_sb(args, cfg: ExperimentConfig, out: Path):
    sconf = cfg.surrogate if args.seed is None else SurrogateConfig(**{**asdict(cfg.surrogate), "seed": args.seed})
    data = _need_dir(args.data, "data dir")
    images, masks = load_segmentation_split(data)
    model = train_surrogate_sb(images, masks, sconf)
    path = save_surrogate(model, out, sconf)
    acc = pixel_accuracy(model, images, masks)
    logger.info("surrogate pixel accuracy on its training split: %.4f", acc)
    return {"surrogate": asdict(sconf), "train_pixel_accuracy": acc}, {"data": str(data)}, [path]


def cmd_evaluate(args, cfg: ExperimentConfig, out: Path):
    names = [m.strip() for m in args.methods.split(",") if m.strip()]
    bad = [m for m in names if m not in METHODS]
    if bad or not names:
        raise UsageError(f"methods must be drawn from {METHODS}, got {args.methods!r}")
    if "proposed" in names and args.ckpt is None:
        raise UsageError("method 'proposed' needs --ckpt")
    items = load_eval_split(_need_dir(args.data, "data dir"))
    sb = load_surrogate(args.sb)
    stage2 = load_checkpoint(args.ckpt) if "proposed" in names else None
    available = build_methods(stage2)
    report = evaluate_methods(items, {m: available[m] for m in names}, sb, args.bins or cfg.n_bins)
    report_path = report.save(out / "metrics.json")
    plot_path = plot_report(report, out / "metrics.png")
    inputs = {"data": str(args.data), "sb": str(args.sb)}
    if args.ckpt:
        inputs["ckpt"] = str(args.ckpt)
    return {"methods": names, "n_bins": report.n_bins}, inputs, [report_path, plot_path]


def cmd_plot(args, cfg: ExperimentConfig, out: Path):
    path = Path(args.report)
    if path.is_dir():
        path = path / "metrics.json"
    report = MetricsReport.load(path)
    fig = plot_report(report, out / "metrics.png")
    return {}, {"report": str(path)}, [fig]


def cmd_experiment(args, cfg: ExperimentConfig, out: Path):
    if args.seed is not None:
        cfg = ExperimentConfig(
            phantom=PhantomConfig.from_dict({**asdict(cfg.phantom), "seed": args.seed}),
            counts=cfg.counts,
            stage1=TrainConfig.from_dict({**cfg.stage1.to_dict(), "seed": args.seed}),
            stage2=TrainConfig.from_dict({**cfg.stage2.to_dict(), "seed": args.seed}),
            surrogate=SurrogateConfig(**{**asdict(cfg.surrogate), "seed": args.seed}),
            n_bins=cfg.n_bins,
        )
    summary = run_experiment(out, cfg, single_thread=True)
    print(json.dumps(summary["metrics"], indent=2, sort_keys=True))
    return cfg.to_dict(), {}, [out / "summary.json", out / "metrics.json"]


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "translate": cmd_translate,
    "train-sb": cmd_train_sb,
    "evaluate": cmd_evaluate,
    "plot": cmd_plot,
    "experiment": cmd_experiment,
}


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="YAML config file")
    common.add_argument("--seed", type=int, help="override the configured seed")
    common.add_argument("--out", required=True, help="output directory")
    common.add_argument("--single-thread", action="store_true", help="one torch thread, deterministic kernels")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = _Parser(prog="ihcbridge", description="Duplex-to-monoplex IHC translation on a synthetic phantom.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen-data", parents=[common], help="render a phantom corpus")
    for name in ("a", "b", "c", "eval", "sb"):
        p.add_argument(f"--n-{name}", type=int, help=f"number of {name} scenes")

    p = sub.add_parser("train", parents=[common], help="train stage 1 or stage 2")
    p.add_argument("--stage", type=int, choices=(1, 2), required=True)
    p.add_argument("--data", required=True, help="corpus directory (with manifest.csv)")
    p.add_argument("--stage1-ckpt", help="frozen stage-1 checkpoint (stage 2 only)")
    p.add_argument("--resume", help="checkpoint to resume from")
    p.add_argument("--steps", type=int, help="total step count")

    p = sub.add_parser("translate", parents=[common], help="apply a trained generator to a directory of PNGs")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--network", default="g_ab")

    p = sub.add_parser("train-sb", parents=[common], help="train the surrogate nucleus posterior model")
    p.add_argument("--data", required=True)

    p = sub.add_parser("evaluate", parents=[common], help="score translation methods with the surrogate")
    p.add_argument("--data", required=True, help="corpus directory with an eval split")
    p.add_argument("--sb", required=True, help="surrogate checkpoint")
    p.add_argument("--ckpt", help="stage-2 checkpoint, for the 'proposed' method")
    p.add_argument("--methods", default="identity,proposed,oracle")
    p.add_argument("--bins", type=int)

    p = sub.add_parser("plot", parents=[common], help="render metrics.json as cumulative histograms")
    p.add_argument("--report", required=True, help="metrics.json or the directory holding it")

    sub.add_parser("experiment", parents=[common], help="run the whole phantom experiment")
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    started = time.perf_counter()
    try:
        cfg = _load_config(args.config)
        if args.single_thread:
            set_single_thread()
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        config, inputs, artifacts = COMMANDS[args.command](args, cfg, out)
        _write_manifest(out, args, config, inputs, artifacts, started)
    except UsageError as exc:
        print(f"ihcbridge {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DatasetError, CheckpointError, DivergenceError, PackingError, StainMatrixError, ValueError, OSError) as exc:
        print(f"ihcbridge {args.command}: failed: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
