"""Command-line entry point: ``ssar <command> [--config FILE] [flags]``.

Every command reads one JSON experiment config (validated, unknown keys
rejected), applies flag overrides on top, copies the config into its output
directory and writes its artifacts there. Exit codes: 0 success, 2 missing
input, 3 config or file-format violation, 4 non-finite training, 1 anything
else. Failures print a single JSON line to stderr.
"""

from __future__ import annotations

import argparse
import copy
import json
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path

import jsonschema
import numpy as np

from . import evaluation as ev
from . import model as mdl
from .data import SessionFormatError, load_session, save_session, split_target
from .losses import Hyper
from .synth import DriftSchedule, Scenario
from .train import PRESETS, TrainConfig, TrainingDiverged, pretrain_source, recalibrate

log = logging.getLogger("ssar")

EXIT_OK, EXIT_FAIL, EXIT_MISSING, EXIT_SCHEMA, EXIT_NONFINITE = 0, 1, 2, 3, 4
OUTPUT_ENV = "SSAR_OUTPUT_DIR"
SWEEP_DEFAULTS = {
    "labeled_fraction": [0.0, 0.01, 0.05, 0.1, 0.3, 0.5],
    "time_span": [1, 2, 3],
}


class ConfigError(ValueError):
    pass


class MissingInput(FileNotFoundError):
    pass


def _synth_defaults() -> dict:
    d = Scenario().to_dict()
    d.update(days=4, target_day=1)
    return d


DEFAULT_CONFIG = {
    "data": {"source": None, "target": None, "synth": _synth_defaults()},
    "split": {"labeled_fraction": 0.1, "eval_fraction": 0.0, "seed": 0},
    "model": {"input_dim": None, "relu_last": True},
    "hyper": {
        "alpha": 1.0,
        "beta": 0.1,
        "gamma": 1.0,
        "theta": 0.01,
        "n_subdomains": 8,
        "bandwidth": "median",
        "ccc_feature_bandwidth": 1.0,
        "ccc_label_bandwidth": 1.0,
    },
    "train": {
        "epochs": 500,
        "batch_size": 128,
        "optimizer": {"name": "adam", "lr": 1e-4, "betas": [0.9, 0.999], "weight_decay": 5e-4},
        "normalize_labels": True,
        "warm_start": False,
        "checkpoint_every": 0,
    },
    "run": {"seeds": [0], "output_dir": None, "n_jobs": 1},
}


def _obj(props: dict) -> dict:
    return {"type": "object", "properties": props, "additionalProperties": False}


_NUM = {"type": "number"}
_NONNEG = {"type": "number", "minimum": 0}
_POS = {"type": "number", "exclusiveMinimum": 0}
_FRAC = {"type": "number", "minimum": 0, "exclusiveMaximum": 1}
_RANGE = {"type": "array", "items": _NONNEG, "minItems": 2, "maxItems": 2}

CONFIG_SCHEMA = _obj({
    "data": _obj({
        "source": {"type": ["string", "null"]},
        "target": {"type": ["string", "null"]},
        "synth": _obj({
            "n_channels": {"type": "integer", "minimum": 1},
            "source_bins": {"type": "integer", "minimum": 2},
            "target_bins": {"type": "integer", "minimum": 2},
            "task": {"enum": ["center_out", "random_target"]},
            "bin_width": _POS,
            "smoothing_sd": _POS,
            "baseline_range": _RANGE,
            "depth_range": _RANGE,
            "exponent_range": {"type": "array", "items": _POS, "minItems": 2, "maxItems": 2},
            "speed_ref": _POS,
            "drift": _obj({
                "rotation": _NUM,
                "speed_gain_scale": _NONNEG,
                "dropout": {"type": "number", "minimum": 0, "maximum": 1},
                "baseline_shift_scale": _NONNEG,
                "direction_jitter": _NONNEG,
                "turnover": {"type": "number", "minimum": 0, "maximum": 1},
                "seed": {"type": "integer"},
            }),
            "days": {"type": "integer", "minimum": 1},
            "target_day": {"type": "integer", "minimum": 1},
        }),
    }),
    "split": _obj({"labeled_fraction": _FRAC, "eval_fraction": _FRAC, "seed": {"type": "integer"}}),
    "model": _obj({
        "input_dim": {"type": ["integer", "null"], "minimum": 1},
        "relu_last": {"type": "boolean"},
    }),
    "hyper": _obj({
        "alpha": _NONNEG,
        "beta": _NONNEG,
        "gamma": _NONNEG,
        "theta": _NONNEG,
        "n_subdomains": {"type": "integer", "minimum": 1},
        "bandwidth": {"oneOf": [{"const": "median"}, _POS]},
        "ccc_feature_bandwidth": _POS,
        "ccc_label_bandwidth": _POS,
    }),
    "train": _obj({
        "epochs": {"type": "integer", "minimum": 1},
        "batch_size": {"type": "integer", "minimum": 2},
        "optimizer": _obj({
            "name": {"const": "adam"},
            "lr": _POS,
            "betas": {"type": "array", "items": _FRAC, "minItems": 2, "maxItems": 2},
            "weight_decay": _NONNEG,
        }),
        "normalize_labels": {"type": "boolean"},
        "warm_start": {"type": "boolean"},
        "checkpoint_every": {"type": "integer", "minimum": 0},
    }),
    "run": _obj({
        "seeds": {"type": "array", "items": {"type": "integer"}, "minItems": 1},
        "output_dir": {"type": ["string", "null"]},
        "n_jobs": {"type": "integer"},
    }),
})


def validate_config(cfg: dict) -> None:
    try:
        jsonschema.validate(cfg, CONFIG_SCHEMA)
    except jsonschema.ValidationError as exc:
        where = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        raise ConfigError(f"config {where}: {exc.message}") from None


def _merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def load_config(path) -> tuple[dict, str | None]:
    """Validated config merged onto the defaults, plus the raw file text."""
    if path is None:
        return copy.deepcopy(DEFAULT_CONFIG), None
    p = Path(path)
    if not p.exists():
        raise MissingInput(f"config file not found: {p}")
    text = p.read_text()
    try:
        user = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}") from None
    validate_config(user)
    return _merge(DEFAULT_CONFIG, user), text


# flag dest -> config path
_OVERRIDES = {
    "epochs": ("train", "epochs"),
    "batch_size": ("train", "batch_size"),
    "lr": ("train", "optimizer", "lr"),
    "alpha": ("hyper", "alpha"),
    "beta": ("hyper", "beta"),
    "gamma": ("hyper", "gamma"),
    "theta": ("hyper", "theta"),
    "subdomains": ("hyper", "n_subdomains"),
    "labeled_fraction": ("split", "labeled_fraction"),
    "eval_fraction": ("split", "eval_fraction"),
    "split_seed": ("split", "seed"),
    "seeds": ("run", "seeds"),
    "n_jobs": ("run", "n_jobs"),
    "output_dir": ("run", "output_dir"),
    "source": ("data", "source"),
    "target": ("data", "target"),
    "days": ("data", "synth", "days"),
    "target_day": ("data", "synth", "target_day"),
}


def apply_overrides(cfg: dict, args: argparse.Namespace) -> dict:
    cfg = copy.deepcopy(cfg)
    for dest, path in _OVERRIDES.items():
        val = getattr(args, dest, None)
        if val is None:
            continue
        node = cfg
        for key in path[:-1]:
            node = node[key]
        node[path[-1]] = val
    bw = getattr(args, "bandwidth", None)
    if bw is not None:
        cfg["hyper"]["bandwidth"] = "median" if bw == "median" else _positive_float(bw)
    preset = getattr(args, "preset", None)
    if preset:
        cfg["hyper"].update(PRESETS[preset])
    validate_config(cfg)
    return cfg


def _positive_float(text: str) -> float:
    try:
        val = float(text)
    except ValueError:
        raise ConfigError(f"bandwidth must be 'median' or a positive number, got {text!r}") from None
    if not val > 0:
        raise ConfigError("bandwidth must be positive")
    return val


def train_config(cfg: dict, seed: int) -> TrainConfig:
    h, t = cfg["hyper"], cfg["train"]
    opt = t["optimizer"]
    hyper = Hyper(
        alpha=h["alpha"],
        beta=h["beta"],
        gamma=h["gamma"],
        theta=h["theta"],
        n_subdomains=h["n_subdomains"],
        bandwidth=None if h["bandwidth"] == "median" else float(h["bandwidth"]),
        ccc_feature_bandwidth=h["ccc_feature_bandwidth"],
        ccc_label_bandwidth=h["ccc_label_bandwidth"],
    )
    return TrainConfig(
        epochs=t["epochs"],
        batch_size=t["batch_size"],
        lr=opt["lr"],
        betas=tuple(opt["betas"]),
        weight_decay=opt["weight_decay"],
        hyper=hyper,
        seed=int(seed),
        warm_start=t["warm_start"],
        relu_last=cfg["model"]["relu_last"],
        normalize_labels=t["normalize_labels"],
        checkpoint_every=t["checkpoint_every"],
        log_every=1,
    )


def scenario(cfg: dict) -> Scenario:
    s = {k: v for k, v in cfg["data"]["synth"].items() if k not in ("days", "target_day")}
    return Scenario.from_dict(s)


def _load(path: str):
    base = str(path)
    for suffix in (".meta.json", ".csv"):
        if base.endswith(suffix):
            base = base[: -len(suffix)]
    for part in (base + ".meta.json", base + ".csv"):
        if not Path(part).exists():
            raise MissingInput(f"session file not found: {part}")
    return load_session(base)


def sessions(cfg: dict, seed: int, need_target: bool = True):
    """(source, target) from files when configured, else from the simulator."""
    d = cfg["data"]
    if d["source"] is not None:
        source = _load(d["source"])
        target = None
        if need_target:
            if d["target"] is None:
                raise MissingInput("data.target is required alongside data.source")
            target = _load(d["target"])
    else:
        scen = scenario(cfg)
        source = scen.day(seed, 0)
        target = scen.day(seed, d["synth"]["target_day"]) if need_target else None
    dim = cfg["model"]["input_dim"]
    for s in (source, target):
        if s is not None and dim is not None and s.n_channels != dim:
            raise ConfigError(f"model.input_dim={dim} but session {s.day_id} has {s.n_channels} channels")
    if target is not None and target.n_channels != source.n_channels:
        raise ConfigError("source and target sessions have different channel counts")
    return source, target


def _task(cfg: dict, seed: int):
    source, target = sessions(cfg, seed)
    sp = cfg["split"]
    return split_target(source, target, sp["labeled_fraction"], sp["eval_fraction"], [sp["seed"], seed])


def output_dir(cfg: dict, command: str) -> Path:
    if cfg["run"]["output_dir"]:
        return Path(cfg["run"]["output_dir"])
    root = os.environ.get(OUTPUT_ENV)
    return Path(root or "ssar_runs") / command


def _prepare(out: Path, cfg: dict, raw_text: str | None) -> None:
    out.mkdir(parents=True, exist_ok=True)
    if raw_text is not None:
        (out / "config.json").write_text(raw_text)
    (out / "config.resolved.json").write_text(json.dumps(cfg, indent=1))


# -- commands ------------------------------------------------------------------

def cmd_generate(cfg: dict, args, out: Path) -> dict:
    synth = cfg["data"]["synth"]
    days = synth["days"]
    names = [f"day{k}" for k in range(days)]
    existing = [n for n in names if (out / f"{n}.csv").exists()] + (
        ["manifest.json"] if (out / "manifest.json").exists() else []
    )
    if existing and not args.force:
        raise FileExistsError(f"{out} already holds {existing[0]}; pass --force to overwrite")
    scen = scenario(cfg)
    seed = cfg["run"]["seeds"][0]
    if days == 1:
        # a single day is the undrifted reference session
        scen = replace(scen, drift=DriftSchedule())
    files = []
    for k, name in enumerate(names):
        meta, csv_path = save_session(scen.day(seed, k), out / name)
        files.append({"day": k, "name": name, "meta": meta.name, "csv": csv_path.name})
    manifest = {
        "schema": "ssar-manifest-v1",
        "seed": seed,
        "days": files,
        "drift": scen.drift_for(seed).to_dict(),
        "scenario": scen.to_dict(),
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=1))
    return {"files": len(files)}


def cmd_train(cfg: dict, args, out: Path) -> dict:
    seed = cfg["run"]["seeds"][0]
    source, _ = sessions(cfg, seed, need_target=False)
    tc = train_config(cfg, seed)
    res = pretrain_source(source, tc, out / "checkpoints")
    mdl.save_params(res.params, out / "decoder.json")
    res.write_log(out / "train_log.jsonl")
    fit = ev.metric_report(source.velocity, mdl.predict(res.params, source.features))
    (out / "metrics.json").write_text(json.dumps({"train": fit.to_dict()}, indent=1))
    return {"train_cc": fit.cc}


def cmd_recalibrate(cfg: dict, args, out: Path) -> dict:
    seed = cfg["run"]["seeds"][0]
    task = _task(cfg, seed)
    tc = train_config(cfg, seed)
    init = None
    if args.init is not None:
        if not Path(args.init).exists():
            raise MissingInput(f"decoder file not found: {args.init}")
        init = mdl.load_params(args.init)
        tc = replace(tc, warm_start=True)
    res = recalibrate(task, tc, init, out / "checkpoints")
    mdl.save_params(res.params, out / "decoder.json")
    res.write_log(out / "train_log.jsonl")
    (out / "split.json").write_text(json.dumps({k: v.tolist() for k, v in task.rows.items()}))
    rep = ev.evaluate(res.params, task)
    name = args.preset or "ssar"
    ev.Report([ev.ResultRow(name, seed, rep.cc, rep.r2)], {"kind": "recalibrate"}).write(out, "report")
    return {"cc": rep.cc, "r2": rep.r2}


def cmd_evaluate(cfg: dict, args, out: Path) -> dict:
    if not Path(args.decoder).exists():
        raise MissingInput(f"decoder file not found: {args.decoder}")
    params = mdl.load_params(args.decoder)
    rows = []
    for seed in cfg["run"]["seeds"]:
        task = _task(cfg, seed)
        rep = ev.evaluate(params, task)
        rows.append(ev.ResultRow(Path(args.decoder).stem, seed, rep.cc, rep.r2))
    ev.Report(rows, {"kind": "evaluate", "decoder": str(args.decoder)}).write(out, "report")
    return {"cc": float(np.median([r.cc for r in rows]))}


def cmd_ablate(cfg: dict, args, out: Path) -> dict:
    seeds = cfg["run"]["seeds"]
    tasks = {s: _task(cfg, s) for s in seeds}
    report = ev.run_ablation(tasks, train_config(cfg, seeds[0]), n_jobs=cfg["run"]["n_jobs"])
    report.write(out, "ablation")
    return {v: report.median(v) for v in report.variants()}


class _FileScenario:
    """Sweep source for the labeled-fraction axis when sessions come from files."""

    def __init__(self, cfg):
        self.cfg = cfg

    def pair(self, seed, day):
        return sessions(self.cfg, seed)


def cmd_sweep(cfg: dict, args, out: Path) -> dict:
    axis = args.axis
    values = args.values if args.values is not None else SWEEP_DEFAULTS[axis]
    if cfg["data"]["source"] is not None:
        if axis == "time_span":
            raise ConfigError("time_span sweeps need the simulator (leave data.source unset)")
        source = _FileScenario(cfg)
    else:
        source = scenario(cfg)
    seeds = cfg["run"]["seeds"]
    sp = cfg["split"]
    report = ev.run_sweep(
        axis, values, source, train_config(cfg, seeds[0]), seeds,
        labeled_fraction=sp["labeled_fraction"], eval_fraction=sp["eval_fraction"],
        n_jobs=cfg["run"]["n_jobs"],
    )
    report.write(out, f"sweep_{axis}")
    return {"cells": len(report.rows)}


def cmd_probe(cfg: dict, args, out: Path) -> dict:
    seed = cfg["run"]["seeds"][0]
    tc = train_config(cfg, seed)
    source, target = sessions(cfg, seed)
    if args.decoder is not None:
        if not Path(args.decoder).exists():
            raise MissingInput(f"decoder file not found: {args.decoder}")
        source_params = mdl.load_params(args.decoder)
    else:
        source_params = pretrain_source(source, tc).params
    recal = {}
    for item in args.recalibrated or []:
        tag, sep, path = item.partition("=")
        if not sep:
            raise ConfigError(f"--recalibrated expects TAG=PATH, got {item!r}")
        if not Path(path).exists():
            raise MissingInput(f"decoder file not found: {path}")
        recal[f"recalibrated-{tag}"] = mdl.load_params(path)
    if not recal:
        sp = cfg["split"]
        task = split_target(source, target, sp["labeled_fraction"], sp["eval_fraction"], [sp["seed"], seed])
        for preset in ("ssar", "mmd"):
            recal[f"recalibrated-{preset}"] = recalibrate(task, tc.with_preset(preset)).params
    arts = ev.pattern_probe(source_params, target, tc, recal)
    ev.write_probe_csv(arts, out / "probe.csv")
    scores = {
        a.tag: {
            "consistency": a.consistency,
            "speed_consistency": a.speed_consistency,
            "explained_variance": a.explained_variance.tolist(),
        }
        for a in arts
    }
    (out / "probe.json").write_text(json.dumps(scores, indent=1))
    return {tag: s["consistency"] for tag, s in scores.items()}


COMMANDS = {
    "generate": cmd_generate,
    "train": cmd_train,
    "recalibrate": cmd_recalibrate,
    "evaluate": cmd_evaluate,
    "ablate": cmd_ablate,
    "sweep": cmd_sweep,
    "probe": cmd_probe,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    g = common.add_argument_group("config and output")
    g.add_argument("--config", help="experiment config JSON (defaults used when omitted)")
    g.add_argument("--output-dir", help=f"output directory (default: ${OUTPUT_ENV}/<command>)")
    g.add_argument("--seeds", type=int, nargs="+", help="experiment seeds (run.seeds)")
    g.add_argument("--n-jobs", type=int, help="parallel jobs for ablation and sweep cells")
    g.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    d = common.add_argument_group("data")
    d.add_argument("--source", help="source session path (without .csv/.meta.json)")
    d.add_argument("--target", help="target session path (without .csv/.meta.json)")
    d.add_argument("--target-day", type=int, help="simulated target day when no files are given")
    d.add_argument("--labeled-fraction", type=float, help="share of target rows with labels")
    d.add_argument("--eval-fraction", type=float, help="share of target rows held out for evaluation")
    d.add_argument("--split-seed", type=int, help="seed of the target row split")
    t = common.add_argument_group("training")
    t.add_argument("--epochs", type=int)
    t.add_argument("--batch-size", type=int)
    t.add_argument("--lr", type=float, help="Adam learning rate")
    t.add_argument("--alpha", type=float, help="global alignment weight")
    t.add_argument("--beta", type=float, help="speed-conditional alignment weight")
    t.add_argument("--gamma", type=float, help="overall alignment weight")
    t.add_argument("--theta", type=float, help="feature-label consistency weight")
    t.add_argument("--subdomains", type=int, help="number of speed bins")
    t.add_argument("--bandwidth", help="MMD kernel bandwidth: 'median' or a positive number")
    t.add_argument("--preset", choices=sorted(PRESETS), help="baseline weight mask applied after other flags")

    parser = argparse.ArgumentParser(prog="ssar", description="Speed-aware cross-day decoder recalibration.")
    sub = parser.add_subparsers(dest="command", required=True)
    p = sub.add_parser("generate", parents=[common], help="write simulated sessions and a manifest")
    p.add_argument("--days", type=int, help="number of days to write (day0..)")
    p.add_argument("--force", action="store_true", help="overwrite existing files")
    sub.add_parser("train", parents=[common], help="fit a decoder on the source day")
    p = sub.add_parser("recalibrate", parents=[common], help="recalibrate on source + target")
    p.add_argument("--init", help="decoder JSON to warm-start from")
    p = sub.add_parser("evaluate", parents=[common], help="score a decoder on the target eval split")
    p.add_argument("--decoder", required=True, help="decoder JSON")
    sub.add_parser("ablate", parents=[common], help="train all 8 component on/off variants")
    p = sub.add_parser("sweep", parents=[common], help="labeled-fraction or time-span sweep")
    p.add_argument("--axis", choices=sorted(SWEEP_DEFAULTS), default="labeled_fraction")
    p.add_argument("--values", type=float, nargs="+", help="axis values (defaults per axis)")
    p = sub.add_parser("probe", parents=[common], help="PCA probe of target-day features")
    p.add_argument("--decoder", help="source decoder JSON (trained on the source day if omitted)")
    p.add_argument("--recalibrated", action="append", metavar="TAG=PATH",
                   help="recalibrated decoder to include (repeatable)")
    return parser


def _fail(code: int, kind: str, exc: BaseException) -> int:
    msg = str(exc).replace("\n", " ")
    print(json.dumps({"error": kind, "exit_code": code, "message": msg}), file=sys.stderr)
    return code


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
    if getattr(args, "values", None) is not None and args.axis == "time_span":
        args.values = [int(v) for v in args.values]
    try:
        cfg, raw = load_config(args.config)
        cfg = apply_overrides(cfg, args)
        out = output_dir(cfg, args.command)
        _prepare(out, cfg, raw)
        summary = COMMANDS[args.command](cfg, args, out)
    except (MissingInput, FileNotFoundError) as exc:
        return _fail(EXIT_MISSING, "missing_input", exc)
    except (ConfigError, SessionFormatError) as exc:
        return _fail(EXIT_SCHEMA, "schema", exc)
    except (TrainingDiverged, FloatingPointError) as exc:
        return _fail(EXIT_NONFINITE, "non_finite", exc)
    except FileExistsError as exc:
        return _fail(EXIT_FAIL, "exists", exc)
    except ValueError as exc:
        return _fail(EXIT_FAIL, "invalid", exc)
    print(json.dumps({"command": args.command, "output_dir": str(out), **summary}))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
