"""Command-line entry point: ``htcl <command> [flags]``.

Every command validates its inputs before writing anything, writes its
artifacts under ``--out`` together with ``manifest.json``, and reports failures
as one JSON object on stderr with a nonzero exit code (2 for usage errors).
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import os
import platform
import sys
import warnings
from dataclasses import asdict
from importlib import metadata
from pathlib import Path

import numpy as np
import torch

from .dataset import (DatasetSchemaError, GenConfig, class_stats, gen_config_from_dict, generate,
                      load_split, save_split)
from .experiment import compare_models, gradient_suite, standard_gen_config, standard_train_config
from .metrics import evaluate_ranked, save_predictions
from .trainer import (ConfigError, TrainConfig, TrainingDiverged, TrainResult, ablation_table,
                      fit_pipeline, load, predict_ranked, run_ablation, save, train)

logger = logging.getLogger("htcl")

USAGE = 2
FAILURE = 1


class UsageError(Exception):
    def __init__(self, message: str, field: str | None = None):
        super().__init__(message)
        self.field = field


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


# ---------------------------------------------------------------------------
# helpers

def _read_json(path: str, what: str) -> dict:
    p = Path(path)
    if not p.is_file():
        raise FileNotFoundError(path)
    try:
        doc = json.loads(p.read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise UsageError(f"{what} {path}: invalid JSON ({e})", "$") from None
    if not isinstance(doc, dict):
        raise UsageError(f"{what} {path}: expected a JSON object", "$")
    return doc


def _parse_overrides(items: list[str]) -> dict:
    out = {}
    for item in items or []:
        key, sep, raw = item.partition("=")
        if not sep or not key:
            raise UsageError(f"--set {item!r}: expected KEY=VALUE", "--set")
        try:
            out[key] = json.loads(raw)
        except json.JSONDecodeError:
            out[key] = raw
    return out


def _parse_ks(text: str | None):
    if text is None:
        return None
    try:
        ks = tuple(int(k) for k in text.split(","))
    except ValueError:
        raise UsageError(f"--k: expected comma-separated integers, got {text!r}", "--k") from None
    if not ks or any(k < 0 for k in ks):
        raise UsageError(f"--k: expected non-negative integers, got {text!r}", "--k")
    return ks


def _seed(args, default: int | None) -> int | None:
    if args.seed is not None:
        return args.seed
    env = os.environ.get("HTCL_SEED")
    if env is not None:
        try:
            return int(env)
        except ValueError:
            raise UsageError(f"HTCL_SEED: expected an integer, got {env!r}", "HTCL_SEED") from None
    return default


def _train_config(args, base: TrainConfig | None = None) -> TrainConfig:
    """Config file, then flags and ``--set`` overrides, then the seed fallback chain."""
    d = (base or TrainConfig()).to_dict()
    if getattr(args, "config", None):
        d.update(_read_json(args.config, "config"))
    d.update(_parse_overrides(getattr(args, "set", None)))
    ks = _parse_ks(getattr(args, "k", None))
    if ks is not None:
        d["Ks"] = list(ks)
    if getattr(args, "graph_constraint", None) is not None:
        d["graph_constraint"] = args.graph_constraint == "on"
    d["seed"] = _seed(args, d.get("seed", 0))
    return TrainConfig.from_dict(d)


def config_hash(config: dict) -> str:
    return hashlib.sha256(json.dumps(config, sort_keys=True).encode("utf-8")).hexdigest()


def _version(dist: str) -> str:
    try:
        return metadata.version(dist)
    except metadata.PackageNotFoundError:
        return "unknown"


def write_manifest(out: Path, command: str, argv: list[str], config: dict, seed,
                   artifacts: list[Path], extra: dict | None = None) -> Path:
    doc = {
        "command": command,
        "argv": list(argv),
        "config": config,
        "config_hash": config_hash(config),
        "seed": seed,
        "versions": {"python": platform.python_version(), "numpy": np.__version__,
                     "torch": torch.__version__, "htcl": _version("htcl")},
        "artifacts": sorted(str(Path(a).relative_to(out)) for a in artifacts),
        **(extra or {}),
    }
    path = out / "manifest.json"
    path.write_text(json.dumps(doc, indent=2, sort_keys=True), encoding="utf-8")
    return path


def _load_data(data_dir: str, split: str):
    path = Path(data_dir) / f"{split}.json"
    if not path.is_file():
        raise FileNotFoundError(str(path))
    scenes, meta = load_split(path)
    return scenes, meta


def _out(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_json(path: Path, doc) -> Path:
    path.write_text(json.dumps(doc, indent=2, sort_keys=True), encoding="utf-8")
    return path


def _write_eval(out: Path, net, scenes, config: TrainConfig, prefix: str = "") -> list[Path]:
    ranked = predict_ranked(net, scenes, config)
    report = evaluate_ranked(ranked, [s.relations for s in scenes], net.C, config.Ks,
                             config.task, config.graph_constraint)
    paths = [out / f"{prefix}report.csv", out / f"{prefix}report.json", out / f"{prefix}predictions.json"]
    report.write_csv(paths[0])
    _write_json(paths[1], report.to_json())
    save_predictions(paths[2], [s.image_id for s in scenes], ranked)
    k = config.Ks[0]
    logger.info("R@%d %.4f mR@%d %.4f F@%d %.4f", k, report.R[k], k, report.mR[k], k, report.F[k])
    return paths


# ---------------------------------------------------------------------------
# commands

def cmd_generate(args, argv):
    d = asdict(GenConfig())
    if args.config:
        d.update(_read_json(args.config, "config"))
    d.update(_parse_overrides(args.set))
    d["seed"] = _seed(args, d["seed"])
    cfg = gen_config_from_dict(d)
    out = _out(args)
    splits = generate(cfg)
    paths = []
    for name in ("train", "test"):
        p = out / f"{name}.json"
        save_split(p, splits[name], cfg)
        paths.append(p)
    write_manifest(out, "generate", argv, asdict(cfg), cfg.seed, paths)
    return 0


def _dims(meta):
    return meta["C"], meta["N_obj"], meta["d_v"]


def cmd_train(args, argv):
    config = _train_config(args)
    scenes, meta = _load_data(args.data, "train")
    C, N_obj, d_v = _dims(meta)
    out = _out(args)
    try:
        result = train(config, scenes, C, N_obj, d_v)
    except TrainingDiverged as e:
        path = out / "last_good.json"
        save(path, e.last_good, config, class_stats(scenes, C, config.beta, config.h))
        write_manifest(out, "train", argv, config.to_dict(), config.seed, [path], {"status": "diverged"})
        raise
    paths = [out / "model.json", out / "loss_curve.csv"]
    save(paths[0], result.net, config, result.stats)
    result.write_loss_curve(paths[1])
    if result.val_reports:
        p = out / "val_metrics.json"
        _write_json(p, [r.to_json() for r in result.val_reports])
        paths.append(p)
    write_manifest(out, "train", argv, config.to_dict(), config.seed, paths)
    return 0


def cmd_finetune(args, argv):
    ckpt = Path(args.checkpoint)
    if not ckpt.is_file():
        raise FileNotFoundError(str(ckpt))
    net, base, stats, _ = load(ckpt)
    config = _train_config(args, base)
    if args.which == "TPC" and config.branch_mode == "hp_only":
        raise UsageError("--which: TPC fine-tuning needs a model with a tail-prefer branch", "--which")
    scenes, meta = _load_data(args.data, "train")
    C, N_obj, d_v = _dims(meta)
    if (C, N_obj, d_v) != (net.C, net.N_obj, net.d_v):
        raise UsageError(f"--data: dataset dims {(C, N_obj, d_v)} do not match the checkpoint", "--data")
    tuned, _ = fit_pipeline(config, scenes, C, N_obj, d_v, finetune=args.which,
                            trained=TrainResult(net, stats, config))
    out = _out(args)
    path = out / "model.json"
    save(path, tuned, config, stats, {"finetuned": args.which})
    write_manifest(out, "finetune", argv, config.to_dict(), config.seed, [path],
                   {"checkpoint": str(ckpt), "which": args.which})
    return 0


def cmd_evaluate(args, argv):
    ckpt = Path(args.checkpoint)
    if not ckpt.is_file():
        raise FileNotFoundError(str(ckpt))
    net, base, _, _ = load(ckpt)
    config = _train_config(args, base)
    scenes, _ = _load_data(args.data, args.split)
    out = _out(args)
    paths = _write_eval(out, net, scenes, config)
    write_manifest(out, "evaluate", argv, config.to_dict(), config.seed, paths,
                   {"checkpoint": str(ckpt), "split": args.split})
    return 0


def cmd_ablate(args, argv):
    config = _train_config(args)
    train_scenes, meta = _load_data(args.data, "train")
    test_scenes, _ = _load_data(args.data, "test")
    only = args.only.split(",") if args.only else None
    rows = run_ablation(config, train_scenes, test_scenes, *_dims(meta), only=only)
    out = _out(args)
    k = config.Ks[0]
    table = ablation_table(rows, k)
    csv_path = out / "ablation.csv"
    with open(csv_path, "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=list(table[0]))
        w.writeheader()
        w.writerows(table)
    json_path = _write_json(out / "ablation.json", {r.name: r.report.to_json() for r in rows})
    write_manifest(out, "ablate", argv, config.to_dict(), config.seed, [csv_path, json_path])
    return 0


def cmd_bias_report(args, argv):
    config = _train_config(args, standard_train_config())
    if args.data:
        train_scenes, meta = _load_data(args.data, "train")
        test_scenes, _ = _load_data(args.data, "test")
        gen_doc = meta
    else:
        gen = standard_gen_config()
        splits = generate(gen)
        train_scenes, test_scenes = splits["train"], splits["test"]
        meta = {"C": gen.C, "N_obj": gen.N_obj, "d_v": gen.d_v}
        gen_doc = asdict(gen)
    cmp = compare_models(config, train_scenes, test_scenes, *_dims(meta))
    out = _out(args)
    paths = []
    for k in config.Ks:
        sub = out / f"K{k}"
        sub.mkdir(exist_ok=True)
        paths += cmp.bias(k).write(sub)
    for name, rep in cmp.reports.items():
        p = out / f"{name}_report.csv"
        rep.write_csv(p)
        paths.append(p)
    write_manifest(out, "bias-report", argv, config.to_dict(), config.seed, paths, {"data": gen_doc})
    return 0


def cmd_gradcheck(args, argv):
    seed = _seed(args, 0)
    seeds = range(seed, seed + args.seeds)
    report = gradient_suite(seeds, step=args.step, tol=args.tol)
    out = Path(args.out) if args.out else None
    if out:
        out.mkdir(parents=True, exist_ok=True)
        p = _write_json(out / "gradcheck.json", report)
        write_manifest(out, "gradcheck", argv, {"step": args.step, "tol": args.tol,
                                                "seeds": list(seeds)}, seed, [p])
    print(json.dumps({"max_rel_err": report["max_rel_err"], "passed": report["passed"],
                      "checks": len(report["checks"])}))
    return 0 if report["passed"] else FAILURE


# ---------------------------------------------------------------------------
# parser

def _common(p, out_required=True, config=True):
    if config:
        p.add_argument("--config", metavar="PATH", help="JSON config file")
    p.add_argument("--seed", type=int, help="random seed (falls back to $HTCL_SEED, then the config)")
    p.add_argument("--out", metavar="DIR", required=out_required, help="artifact directory")


def _eval_flags(p):
    p.add_argument("--k", metavar="K1,K2", help="recall cut-offs, default 20,50")
    p.add_argument("--graph-constraint", choices=("on", "off"))
    p.add_argument("--set", action="append", metavar="KEY=VALUE",
                   help="override one config field (JSON value); repeatable")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="htcl", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("generate", help="write synthetic train/test splits")
    _common(p)
    p.add_argument("--set", action="append", metavar="KEY=VALUE")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("train", help="train a model")
    _common(p)
    _eval_flags(p)
    p.add_argument("--data", required=True, metavar="DIR")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("finetune", help="re-fit HPC or TPC on a balanced resample")
    _common(p, config=False)
    _eval_flags(p)
    p.add_argument("--checkpoint", required=True, metavar="PATH")
    p.add_argument("--data", required=True, metavar="DIR")
    p.add_argument("--which", required=True, choices=("HPC", "TPC"))
    p.set_defaults(func=cmd_finetune)

    p = sub.add_parser("evaluate", help="score a checkpoint on a split")
    _common(p, config=False)
    _eval_flags(p)
    p.add_argument("--checkpoint", required=True, metavar="PATH")
    p.add_argument("--data", required=True, metavar="DIR")
    p.add_argument("--split", default="test", choices=("train", "test"))
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("ablate", help="train and score the ablation grid")
    _common(p)
    _eval_flags(p)
    p.add_argument("--data", required=True, metavar="DIR")
    p.add_argument("--only", metavar="NAMES", help="comma-separated variant names")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("bias-report", help="baseline vs HPC-ft vs HTCL per-class recall")
    _common(p)
    _eval_flags(p)
    p.add_argument("--data", metavar="DIR", help="default: the standard synthetic experiment")
    p.set_defaults(func=cmd_bias_report)

    p = sub.add_parser("gradcheck", help="finite-difference check of every layer and loss")
    _common(p, out_required=False, config=False)
    p.add_argument("--seeds", type=int, default=10, help="number of consecutive seeds")
    p.add_argument("--step", type=float, default=1e-5)
    p.add_argument("--tol", type=float, default=1e-4)
    p.set_defaults(func=cmd_gradcheck)
    return parser


def _fail(kind: str, message: str, code: int, **extra) -> int:
    print(json.dumps({"error": kind, "message": message, **extra}), file=sys.stderr)
    return code


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args = build_parser().parse_args(argv)
    except UsageError as e:
        return _fail("usage", str(e), USAGE)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if not args.verbose:
        warnings.simplefilter("ignore", UserWarning)
    try:
        return args.func(args, argv)
    except UsageError as e:
        return _fail("usage", str(e), USAGE, field=e.field)
    except FileNotFoundError as e:
        return _fail("missing_file", f"no such file: {e.filename or e.args[0]}", USAGE,
                     path=str(e.filename or e.args[0]))
    except (ConfigError, DatasetSchemaError) as e:
        field = str(e).split(":", 1)[0]
        return _fail("invalid_config" if isinstance(e, ConfigError) else "invalid_data", str(e),
                     USAGE, field=field)
    except TrainingDiverged as e:
        return _fail("diverged", str(e), FAILURE)
    except (ValueError, TypeError) as e:
        return _fail("invalid_config", str(e), USAGE, field=str(e).split(":", 1)[0])


if __name__ == "__main__":
    sys.exit(main())
