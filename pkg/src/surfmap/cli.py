"""Command line: collect, train, eval, race, export-map.

Exit codes: 0 success, 1 usage or configuration error, 2 data error
(missing, empty or inconsistent inputs, missing prerequisite stage),
3 numerical failure (diverged training, non-finite state, aborted race).
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import subprocess
import sys
from pathlib import Path

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
METRICS = ("l2", "laps", "progressive", "map")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _global_flags(defaults):
    p = argparse.ArgumentParser(add_help=False)
    kw = {} if defaults else {"default": argparse.SUPPRESS}
    p.add_argument("--config", help="experiment config JSON (defaults built in)", **kw)
    p.add_argument("--seed", type=int, help="override the config seed", **kw)
    p.add_argument("--deterministic", action="store_true",
                   help="single-threaded numerics and synchronous mapping (bit-reproducible)", **kw)
    return p


def build_parser():
    parser = _Parser(prog="surfmap", description="Surface-aware latent maps for model-based driving.",
                     parents=[_global_flags(True)])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    g = [_global_flags(False)]

    p = sub.add_parser("collect", parents=g, help="simulate expert driving and write datasets")
    p.add_argument("--minutes", type=float, required=True, help="training minutes, split over training worlds")
    p.add_argument("--out", required=True, help="output directory")

    p = sub.add_parser("train", parents=g, help="run training stages")
    p.add_argument("--stage", choices=("1", "2", "3", "all"), required=True)
    p.add_argument("--data", required=True, help="directory written by collect")
    p.add_argument("--out", required=True, help="model directory (earlier stages are read from here)")

    p = sub.add_parser("eval", parents=g, help="compute a metric over the variant matrix")
    p.add_argument("--models", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--metric", choices=METRICS, required=True)
    p.add_argument("--variants", help="comma-separated override of the config variant list")
    p.add_argument("--out", help="output directory (default: config output_dir)")

    p = sub.add_parser("race", parents=g, help="closed-loop laps with online mapping")
    p.add_argument("--models", required=True)
    p.add_argument("--laps", type=int, required=True)
    p.add_argument("--variant", default="AIS")
    p.add_argument("--out", help="output directory (default: config output_dir)")

    p = sub.add_parser("export-map", parents=g, help="build a map from a dataset and export it with pc1/var")
    p.add_argument("--models", required=True)
    p.add_argument("--data", required=True, help="directory written by collect (uses test.csv)")
    p.add_argument("--variant", default="AIS")
    p.add_argument("--out", required=True, help="output directory")
    return parser


def file_hash(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def describe_version():
    from . import __version__

    try:
        res = subprocess.run(["git", "describe", "--tags", "--always", "--dirty"], cwd=Path(__file__).parent,
                             capture_output=True, text=True, timeout=5)
        if res.returncode == 0 and res.stdout.strip():
            return f"{__version__}-{res.stdout.strip()}"
    except (OSError, subprocess.SubprocessError):
        pass
    return __version__


def write_manifest(out_dir, command, cfg, seed, deterministic, artifacts, extra=None):
    out = Path(out_dir)
    arts = {}
    for p in artifacts:
        p = Path(p)
        if p.name == "manifest.json":
            continue
        arts[str(p.relative_to(out)) if p.is_relative_to(out) else str(p)] = file_hash(p)
    manifest = {
        "command": command,
        "config_hash": cfg.hash(),
        "seed": seed,
        "deterministic": deterministic,
        "version": describe_version(),
        "artifacts": dict(sorted(arts.items())),
    }
    if extra:
        manifest.update(extra)
    (out / "manifest.json").write_text(json.dumps(manifest, indent=1) + "\n")
    return manifest


def _writable_dir(path):
    out = Path(path)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        from .experiments import DataError

        raise DataError(f"cannot create output directory {out}: {exc}") from exc
    if not os.access(out, os.W_OK):
        from .experiments import DataError

        raise DataError(f"output directory is not writable: {out}")
    return out


def _cmd_collect(args, cfg, seed):
    from . import experiments as ex

    out = _writable_dir(args.out)
    data = ex.collect(cfg, args.minutes, out, seed=seed)
    s = data.summary
    print(f"collected {s['transitions']} transitions, {s['cells']} cells, {s['traversals']} traversals, "
          f"{s['slip_events']} slip events; test set {s['test_transitions']} transitions -> {out}")
    files = sorted(p for p in out.rglob("*") if p.is_file())
    cfg.save(out / "config.json")
    write_manifest(out, "collect", cfg, seed, args.deterministic, files + [out / "config.json"], {"summary": s})


def _cmd_train(args, cfg, seed):
    from . import experiments as ex

    data = ex.load_data(args.data, cfg, need_test=False)
    out = _writable_dir(args.out)
    if args.stage == "all":
        models = ex.train_all(cfg, data)
        stages = (1, 2, 3)
    else:
        stage = int(args.stage)
        models = ex.load_models(out) if stage > 1 else ex.Models()
        if stage == 3:
            for v in cfg.eval.variants:
                if v in ex.MAPPED_VARIANTS and v not in models.mappers:
                    raise ex.PrerequisiteError(f"stage 3 needs stage 2 artifacts for variant {v} "
                                               f"(missing {out / 'stage2' / v}); run train --stage 2 first")
        step = {1: ex.train_stage1, 2: ex.train_stage2, 3: ex.train_stage3}[stage]
        models = step(cfg, data, models) if stage > 1 else step(cfg, data)
        stages = (stage,)
    ex.save_models(models, out, stages)
    merged = []
    for st in (1, 2, 3):
        f = out / f"train_log_stage{st}.csv"
        if f.is_file():
            lines = f.read_text().splitlines()
            merged += lines if not merged else lines[1:]
    (out / "train_log.csv").write_text("\n".join(merged) + "\n")
    for st in stages:
        rows = models.logs[st].rows
        if rows:
            last = rows[-1]
            print(f"stage {st}: {len(rows)} log rows, final losses dyn={last[2]:.6g} "
                  f"smooth={last[3]:.6g} mapper={last[4]:.6g}")
    files = sorted(p for p in out.rglob("*") if p.is_file())
    write_manifest(out, f"train --stage {args.stage}", cfg, seed, args.deterministic, files)


def _variants_override(args, cfg):
    if getattr(args, "variants", None):
        from .config import EvalConfig

        names = tuple(v.strip() for v in args.variants.split(",") if v.strip())
        e = cfg.eval
        cfg.eval = EvalConfig(e.n_steps, e.n_hypotheses, names, e.laps, e.max_interventions)
    return cfg


def _cmd_eval(args, cfg, seed):
    from . import experiments as ex

    cfg = _variants_override(args, cfg)
    models = ex.load_models(args.models)
    data = ex.load_data(args.data, cfg, need_test=args.metric in ("l2", "map"))
    out = _writable_dir(args.out or cfg.output_dir)
    rows = ex.evaluate(cfg, models, data, args.metric, out, seed=seed, synchronous=args.deterministic)
    for metric, variant, s, value in rows:
        print(f"{metric:28s} {variant:7s} seed={s} {value:.6g}")
    files = [out / "metrics.csv"] + sorted(out.glob("map_*.csv"))
    write_manifest(out, f"eval --metric {args.metric}", cfg, seed, args.deterministic, files)


def _cmd_race(args, cfg, seed):
    from . import experiments as ex
    from .control import TooManyInterventions
    from .gridmap import export_csv

    if args.laps < 1:
        raise UsageError("--laps must be >= 1")
    models = ex.load_models(args.models)
    out = _writable_dir(args.out or cfg.output_dir)
    try:
        run, metrics, lmap = ex.race(cfg, models, args.variant, args.laps, seed=seed, synchronous=args.deterministic)
    except TooManyInterventions as exc:
        if exc.runlog is not None:
            exc.runlog.to_csv(out / "runlog_aborted.csv")
            print(f"partial run log written to {out / 'runlog_aborted.csv'}", file=sys.stderr)
        raise
    run.to_csv(out / "runlog.csv")
    files = [out / "runlog.csv"]
    if lmap is not None:
        export_csv(lmap.snapshot(), out / "race_map.csv")
        files.append(out / "race_map.csv")
    s = metrics.summary()
    print(f"{s['laps']} laps  lap time {s['lap_times_mean']:.3f} +- {s['lap_times_std']:.3f} s  "
          f"cte {s['cte_mean']:.3f} +- {s['cte_std']:.3f} m  violations {s['violations_mean']:.2f} "
          f"+- {s['violations_std']:.2f}  interventions {s['interventions']}  mapper calls {run.mapper_calls}")
    write_manifest(out, "race", cfg, seed, args.deterministic, files,
                   {"variant": args.variant, "laps": s["laps"], "runlog_digest": run.digest()})


def _cmd_export_map(args, cfg, seed):
    from . import experiments as ex
    from .evaluation import pca_export

    models = ex.load_models(args.models)
    data = ex.load_data(args.data, cfg)
    if len(data.test) == 0:
        raise ex.DataError("test dataset is empty")
    out = _writable_dir(args.out)
    ms = ex.map_structure(cfg, models, data.test, args.variant, seed=seed)
    pca_export(ms.snapshot, out / f"map_{args.variant}.csv")
    print(f"map for {args.variant}: {int(ms.snapshot.visited.sum())} visited cells, interior purity "
          f"{ms.purity:.3f}, median variance boundary {ms.var_boundary:.4g} / interior {ms.var_interior:.4g}")
    write_manifest(out, "export-map", cfg, seed, args.deterministic, [out / f"map_{args.variant}.csv"])


COMMANDS = {"collect": _cmd_collect, "train": _cmd_train, "eval": _cmd_eval, "race": _cmd_race,
            "export-map": _cmd_export_map}


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    if args.deterministic:
        for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
            os.environ[var] = "1"
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")

    from .autodiff import NonFiniteError
    from .config import ConfigError, ExperimentConfig
    from .control import TooManyInterventions
    from .experiments import DataError
    from .training import TrainingDivergence

    try:
        cfg = ExperimentConfig.load(args.config) if args.config else ExperimentConfig()
        seed = cfg.seed if args.seed is None else args.seed
        cfg.seed = seed
        COMMANDS[args.command](args, cfg, seed)
    except (UsageError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (TrainingDivergence, NonFiniteError, TooManyInterventions, FloatingPointError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
