"""``wavestack`` command line: gen-data, train, eval, stability, plot.

Output directory precedence: ``--out``, then ``$WAVESTACK_OUT``, then the
config's ``output_dir``. Exit codes: 0 ok, 2 config error, 3 data error,
4 numeric divergence.
"""
from __future__ import annotations

import argparse
import logging
import os
import sys
import time
from pathlib import Path
from typing import List, Optional


from . import pipeline
from .analysis import build_report
from .channel_sim import SimulationDiverged
from .config import ConfigError, RunConfig, load_config
from .dataset import FORMAT_VERSION, DatasetError, DatasetManifest, dataset_paths
from .learners.nn import TrainingDiverged
from .persistence import ArtifactError, atomic_directory, load_stacked, read_extra, save_stacked

ENV_OUT = "WAVESTACK_OUT"
EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_DIVERGED = 0, 2, 3, 4

log = logging.getLogger("wavestack")


def _out_dir(args, cfg: RunConfig) -> Path:
    if args.out:
        return Path(args.out)
    if os.environ.get(ENV_OUT):
        return Path(os.environ[ENV_OUT])
    return Path(cfg.output_dir)


def _load(args) -> RunConfig:
    cfg = load_config(args.config)
    if getattr(args, "deterministic", False):
        cfg.n_jobs = 1
    return cfg


def _data_dir(args, out: Path) -> Path:
    return Path(args.data) if getattr(args, "data", None) else out / "data"


def _model_dir(args, out: Path) -> Path:
    return Path(args.model) if getattr(args, "model", None) else out / "model"


def _check_versions(model_dir: Path, data_dir: Path):
    extra = read_extra(model_dir)
    manifest = DatasetManifest.load(dataset_paths(data_dir)["manifest"])
    want = extra.get("data_format_version")
    if want is not None and want != manifest.format_version:
        raise DatasetError(f"model expects dataset format {want}, dataset is format {manifest.format_version}")
    if manifest.format_version != FORMAT_VERSION:
        raise DatasetError(f"dataset format {manifest.format_version} is not supported")


# --------------------------------------------------------------------------- verbs


def cmd_gen_data(args) -> int:
    cfg = _load(args)
    if args.seed is not None:
        cfg.seeds.data = args.seed
    out = _out_dir(args, cfg)
    t0 = time.perf_counter()
    paths = pipeline.write_dataset(cfg, out / "data")
    (out / "data" / "config.yaml").write_text(cfg.to_yaml())
    print(f"wrote {paths['csv']} ({time.perf_counter() - t0:.1f}s)")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _load(args)
    if args.seed is not None:
        cfg.seeds.train = args.seed
    out = _out_dir(args, cfg)
    data_dir = _data_dir(args, out)
    _, data = pipeline.read_dataset(data_dir, cfg)
    model = pipeline.build_stack(cfg, n_jobs=cfg.n_jobs)
    t0 = time.perf_counter()
    pipeline.fit_stack(model, data)
    total = time.perf_counter() - t0
    metrics, _ = pipeline.evaluate(model, data, "test")
    timings = {name: {"train_s": float(s)} for name, s in model.fit_seconds_.items()}
    for name in timings:
        timings[name]["inference_s"] = metrics.timings.get(name, {}).get("inference_s", float("nan"))
    report = build_report(metrics, None, timings)
    extra = {"data_format_version": 1, "dataset": str(data_dir.resolve()),
             "norm_stats": data.stats.to_dict(), "config": cfg.to_dict()}
    with atomic_directory(_model_dir(args, out)) as tmp:
        save_stacked(model, tmp, extra)
        data.stats.save(tmp / "norm_stats.json")
    report.write(out / "reports", "train")
    for name, t in model.fit_seconds_.items():
        print(f"train time {name}: {t:.1f}s")
    print(f"total training time: {total:.1f}s")
    print(report.to_text(), end="")
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = _load(args)
    out = _out_dir(args, cfg)
    if args.split == "train" and not args.allow_train_split:
        print("error: evaluating on the training split requires --allow-train-split", file=sys.stderr)
        return EXIT_CONFIG
    model_dir, data_dir = _model_dir(args, out), _data_dir(args, out)
    model = load_stacked(model_dir)
    _check_versions(model_dir, data_dir)
    _, data = pipeline.read_dataset(data_dir, cfg)
    metrics, _ = pipeline.evaluate(model, data, args.split)
    timings = {name: {"train_s": float(s)} for name, s in model.fit_seconds_.items()}
    report = build_report(metrics, None, timings)
    report.write(out / "reports", f"eval_{args.split}")
    print(report.to_text(), end="")
    return EXIT_OK


def cmd_stability(args) -> int:
    cfg = _load(args)
    out = _out_dir(args, cfg)
    seed = cfg.seeds.stability if args.seed is None else args.seed
    budget = cfg.stability.pair_budget if args.budget is None else args.budget
    model_dir, data_dir = _model_dir(args, out), _data_dir(args, out)
    model = load_stacked(model_dir)
    _check_versions(model_dir, data_dir)
    _, data = pipeline.read_dataset(data_dir, cfg)
    rep = pipeline.stability(model, data, budget, seed, cfg.stability.power_iters, cfg.stability.epsilon)
    report = build_report(None, rep, None)
    report.write(out / "reports", "stability")
    print(report.to_text(), end="")
    return EXIT_OK


def cmd_plot(args) -> int:
    cfg = _load(args)
    out = _out_dir(args, cfg)
    model_dir, data_dir = _model_dir(args, out), _data_dir(args, out)
    model = load_stacked(model_dir)
    _check_versions(model_dir, data_dir)
    _, data = pipeline.read_dataset(data_dir, cfg)
    text = pipeline.overlay_csv(model, data, cfg.plant.dt)
    target = out / "plots" / "overlay.csv"
    target.parent.mkdir(parents=True, exist_ok=True)
    target.write_text(text)
    print(f"wrote {target} ({text.count(chr(10)) - 1} rows)")
    return EXIT_OK


# --------------------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="wavestack", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="YAML run configuration (defaults when omitted)")
        p.add_argument("--seed", type=int, default=None, help="override the relevant seed")
        p.add_argument("--out", help=f"output directory (else ${ENV_OUT}, else config output_dir)")
        p.add_argument("--deterministic", action="store_true", help="force sequential execution")
        return p

    common(sub.add_parser("gen-data", help="simulate scenarios and write the dataset")).set_defaults(fn=cmd_gen_data)

    p = common(sub.add_parser("train", help="fit the stacked model"))
    p.add_argument("--data", help="dataset directory (default <out>/data)")
    p.add_argument("--model", help="model archive directory (default <out>/model)")
    p.set_defaults(fn=cmd_train)

    p = common(sub.add_parser("eval", help="metrics on the test split"))
    p.add_argument("--data")
    p.add_argument("--model")
    p.add_argument("--split", choices=("test", "train"), default="test")
    p.add_argument("--allow-train-split", action="store_true")
    p.set_defaults(fn=cmd_eval)

    p = common(sub.add_parser("stability", help="Lipschitz and passivity analysis of the meta-model"))
    p.add_argument("--data")
    p.add_argument("--model")
    p.add_argument("--budget", type=int, default=None, help="number of sampled pairs")
    p.set_defaults(fn=cmd_stability)

    p = common(sub.add_parser("plot", help="write prediction/truth overlay CSVs"))
    p.add_argument("--data")
    p.add_argument("--model")
    p.set_defaults(fn=cmd_plot)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.fn(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DatasetError, ArtifactError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (SimulationDiverged, TrainingDiverged, FloatingPointError) as exc:
        print(f"numeric divergence: {exc}", file=sys.stderr)
        return EXIT_DIVERGED


if __name__ == "__main__":
    sys.exit(main())
