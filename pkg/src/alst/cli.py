"""Command-line entry point: ``alst <subcommand> [flags]``.

Exit codes: 0 success, 1 validation or configuration error, 2 numeric abort.
"""

from __future__ import annotations

import argparse
import configparser
import csv
import dataclasses
import hashlib
import io
import json
import logging
import os
import sys
from pathlib import Path
from typing import Optional

from . import analysis as an
from . import metrics as mx
from . import numcore as nc
from .data import DataError, SynthConfig, load_manifest, split_by_patient, synthesize_cohort
from .model import AlstConfig, load_checkpoint
from .train import ConfigError, TrainConfig, TrainingAborted, evaluate, predictions, train

CONFIG_ENV = "ALST_CONFIG"
SECTIONS = ("synth", "model", "train", "data", "baseline", "sweep", "layer_manifests")


@dataclasses.dataclass(frozen=True)
class DataConfig:
    test_fraction: float = 0.2
    split_seed: int = 0


@dataclasses.dataclass(frozen=True)
class SweepConfig:
    axis: str = "lambda_ce"
    values: tuple = ("0.0", "1.0")  # converted once the axis is known
    seeds: tuple = (0,)
    branch: str = "regression"


SECTION_TYPES = {
    "synth": SynthConfig,
    "model": AlstConfig,
    "train": TrainConfig,
    "data": DataConfig,
    "baseline": an.BaselineConfig,
    "sweep": SweepConfig,
}


class UsageError(Exception):
    pass


# ---------------------------------------------------------------------------
# config files
# ---------------------------------------------------------------------------


def _fields(cls):
    return [f for f in dataclasses.fields(cls) if not (cls is TrainConfig and f.name == "model")]


def _default(f):
    if f.default is not dataclasses.MISSING:
        return f.default
    return f.default_factory()


def _coerce(text: str, default, key: str):
    text = text.strip()
    try:
        if isinstance(default, bool):
            low = text.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(text)
            return low in ("true", "1", "yes")
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
        if isinstance(default, tuple):
            items = [t.strip() for t in text.split(",") if t.strip()]
            kind = type(default[0]) if default else str
            return tuple(kind(t) for t in items)
    except ValueError:
        raise ConfigError(f"config key {key!r}: cannot parse {text!r}") from None
    return text


def _format(value) -> str:
    if isinstance(value, tuple):
        return ", ".join(str(v) for v in value)
    return str(value)


@dataclasses.dataclass
class RunConfig:
    """Every section resolved to typed values."""

    sections: dict

    def get(self, name):
        return self.sections[name]

    def train_config(self) -> TrainConfig:
        return dataclasses.replace(self.sections["train"], model=self.sections["model"])

    def to_ini(self, names) -> str:
        cp = configparser.ConfigParser(interpolation=None)
        for name in names:
            obj = self.sections[name]
            cp.add_section(name)
            if name == "layer_manifests":
                for k in sorted(obj):
                    cp.set(name, k, obj[k])
                continue
            for f in _fields(type(obj)):
                value = getattr(obj, f.name)
                cp.set(name, f.name, "" if value is None else _format(value))
        buf = io.StringIO()
        cp.write(buf)
        return buf.getvalue()


def read_config(paths) -> RunConfig:
    """Merge INI files (later files win) over the defaults; unknown keys are errors."""
    raw: dict = {s: {} for s in SECTIONS}
    for path in paths:
        cp = configparser.ConfigParser(interpolation=None)
        try:
            with open(path, encoding="utf-8") as fh:
                cp.read_file(fh)
        except (OSError, configparser.Error) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        for section in cp.sections():
            if section not in SECTIONS:
                raise ConfigError(f"{path}: unknown section [{section}]; expected one of {list(SECTIONS)}")
            raw[section].update(cp.items(section))
    sections = {}
    for name, cls in SECTION_TYPES.items():
        known = {f.name: f for f in _fields(cls)}
        unknown = sorted(set(raw[name]) - set(known))
        if unknown:
            raise ConfigError(f"unknown key(s) in [{name}]: {unknown}; allowed: {sorted(known)}")
        values = {}
        for key, text in raw[name].items():
            default = _default(known[key])
            if default is None:
                values[key] = text.strip() or None
            else:
                values[key] = _coerce(text, default, f"{name}.{key}")
        try:
            sections[name] = cls(**values)
        except TypeError as exc:
            raise ConfigError(f"[{name}]: {exc}") from None
    sections["layer_manifests"] = dict(raw["layer_manifests"])
    sw = sections["sweep"]
    if sw.axis == "lambda_ce":
        sections["sweep"] = dataclasses.replace(sw, values=tuple(float(v) for v in sw.values))
    else:
        sections["sweep"] = dataclasses.replace(sw, values=tuple(str(v) for v in sw.values))
    return RunConfig(sections)


def resolve_config(args) -> RunConfig:
    paths = []
    env = os.environ.get(CONFIG_ENV)
    if env:
        paths.append(env)
    if args.config:
        paths.append(args.config)
    if getattr(args, "spec", None):
        paths.append(args.spec)
    cfg = read_config(paths)
    if args.seed is not None:
        s = cfg.sections
        s["synth"] = dataclasses.replace(s["synth"], seed=args.seed)
        s["train"] = dataclasses.replace(s["train"], seed=args.seed)
        s["baseline"] = dataclasses.replace(s["baseline"], seed=args.seed)
    if getattr(args, "test_fraction", None) is not None:
        cfg.sections["data"] = dataclasses.replace(cfg.sections["data"], test_fraction=args.test_fraction)
    return cfg


# ---------------------------------------------------------------------------
# output directories
# ---------------------------------------------------------------------------


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def finish_run(out: Path, command: str, cfg: RunConfig, sections, inputs: dict) -> None:
    """Write the config echo and ``run.json`` (inputs, seed, artifact hashes)."""
    (out / "config.ini").write_text(cfg.to_ini(sections), encoding="utf-8")
    artifacts = {str(p.relative_to(out)): _sha256(p) for p in sorted(out.rglob("*"))
                 if p.is_file() and p.name != "run.json"}
    seeds = {name: getattr(cfg.sections[name], "seed") for name in sections if hasattr(cfg.sections[name], "seed")}
    record = {"command": command, "format_version": 1, "inputs": inputs, "seeds": seeds, "artifacts": artifacts}
    (out / "run.json").write_text(json.dumps(record, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _out_dir(args) -> Path:
    if not args.out:
        raise UsageError("--out DIR is required for this subcommand")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _split(manifest_path, cfg: RunConfig, which: str):
    manifest = load_manifest(manifest_path)
    data = cfg.get("data")
    if which == "all" or data.test_fraction == 0:
        return manifest, manifest
    tr, te = split_by_patient(manifest, data.test_fraction, data.split_seed)
    return tr, te


def _pick(pair, which):
    tr, te = pair
    return tr if which == "train" else te


def _write_report(out: Path, report: mx.MetricReport) -> None:
    (out / "metrics.json").write_text(report.to_json(), encoding="utf-8")
    (out / "metrics.csv").write_text(report.to_csv(), encoding="utf-8")
    an.emit_confusion(report, out / "confusion.csv")


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def cmd_synth(args, cfg):
    out = _out_dir(args)
    m = synthesize_cohort(cfg.get("synth"), out)
    finish_run(out, "synth", cfg, ["synth"], {})
    print(f"wrote {len(m)} utterances from {len(m.patients)} patients to {out}")


def cmd_validate(args, cfg):
    m = load_manifest(args.manifest)
    print(f"ok: {len(m)} utterances, {len(m.patients)} patients, feature dim {m.feature_dim()}, "
          f"{len(m.phoneme_vocab)} phoneme labels")


def cmd_train(args, cfg):
    out = _out_dir(args)
    tr, te = _split(args.manifest, cfg, "train" if cfg.get("data").test_fraction else "all")
    tcfg = cfg.train_config()
    train(tr, tcfg, out, eval_manifest=te if tcfg.eval_every else None)
    split = {"train_patients": sorted(tr.patients), "test_patients": sorted(te.patients) if te is not tr else []}
    (out / "split.json").write_text(json.dumps(split, indent=2) + "\n", encoding="utf-8")
    finish_run(out, "train", cfg, ["model", "train", "data"], {"manifest": args.manifest})
    print(f"trained {tcfg.epochs} epochs on {len(tr.patients)} patients; checkpoint in {out}")


def cmd_eval(args, cfg):
    out = _out_dir(args)
    manifest = _pick(_split(args.manifest, cfg, args.split), args.split)
    ckpt = load_checkpoint(args.checkpoint)
    report = evaluate(ckpt, manifest, args.branch)
    _write_report(out, report)
    rows = predictions(ckpt.params, manifest)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["patient_id", "date_days", "true_score", "pred_score"] + [f"p_{c}" for c in range(5)])
    for p in rows:
        w.writerow([p.patient_id, p.date_days, p.true_score, repr(p.pred_score)] + [repr(v) for v in p.pred_probs])
    (out / "predictions.csv").write_text(buf.getvalue(), encoding="utf-8")
    finish_run(out, "eval", cfg, ["data"], {"manifest": args.manifest, "checkpoint": args.checkpoint,
                                            "branch": args.branch, "split": args.split})
    print(report.to_csv(), end="")


def cmd_sweep(args, cfg):
    out = _out_dir(args)
    sw, data = cfg.get("sweep"), cfg.get("data")
    spec = an.SweepSpec(sw.axis, sw.values, cfg.train_config(), sw.seeds, sw.branch,
                        cfg.get("layer_manifests"), data.test_fraction, data.split_seed)
    if sw.axis != "layer" and not args.manifest:
        raise UsageError("--manifest is required unless the sweep axis is layer")
    result = an.run_sweep(spec, out, args.manifest, threads=args.threads)
    finish_run(out, "sweep", cfg, ["sweep", "model", "train", "data", "layer_manifests"],
               {"manifest": args.manifest})
    print(result.summary_csv(), end="")


def cmd_phoneme_importance(args, cfg):
    out = _out_dir(args)
    manifest = _pick(_split(args.manifest, cfg, args.split), args.split)
    result = an.phoneme_importance(args.checkpoint, manifest, args.policy, args.branch)
    (out / "phoneme_importance.csv").write_text(result.to_csv(), encoding="utf-8")
    finish_run(out, "phoneme-importance", cfg, ["data"],
               {"manifest": args.manifest, "checkpoint": args.checkpoint, "policy": args.policy,
                "branch": args.branch, "split": args.split})
    print(result.to_csv(), end="")


def cmd_baseline(args, cfg):
    out = _out_dir(args)
    tr, te = _split(args.manifest, cfg, "test")
    report = an.linear_baseline(tr, te, cfg.get("baseline"))
    _write_report(out, report)
    finish_run(out, "baseline", cfg, ["baseline", "data"], {"manifest": args.manifest})
    print(report.to_csv(), end="")


def cmd_report(args, cfg):
    out = _out_dir(args)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["source"] + list(mx.CSV_FIELDS))
    for path in args.reports:
        try:
            rep = mx.MetricReport.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))
        except (OSError, ValueError, TypeError) as exc:
            raise ConfigError(f"cannot read metric report {path}: {exc}") from None
        row = rep.csv_row()
        w.writerow([path] + [row[k] for k in mx.CSV_FIELDS])
    (out / "comparison.csv").write_text(buf.getvalue(), encoding="utf-8")
    finish_run(out, "report", cfg, [], {"reports": list(args.reports)})
    print(buf.getvalue(), end="")


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _defaults_epilog(sections) -> Optional[str]:
    if not sections:
        return None
    lines = ["config file sections and defaults:"]
    for name in sections:
        if name == "layer_manifests":
            lines.append("  [layer_manifests]  <layer value> = <manifest path>")
            continue
        cls = SECTION_TYPES[name]
        lines.append(f"  [{name}]")
        for f in _fields(cls):
            lines.append(f"    {f.name} = {_format(_default(f))}")
    return "\n".join(lines)


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    g = common.add_argument_group("global flags")
    g.add_argument("--config", metavar="PATH", default=None,
                   help=f"INI config file (merged over ${CONFIG_ENV} if set)")
    g.add_argument("--seed", type=int, default=None, help="override every seed in the config")
    g.add_argument("--out", metavar="DIR", default=None, help="output directory")
    g.add_argument("--threads", type=int, default=1, help="parallel training runs (sweep only)")
    g.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")

    fmt = argparse.RawDescriptionHelpFormatter

    class Fmt(argparse.ArgumentDefaultsHelpFormatter, fmt):
        pass

    parser = _Parser(prog="alst", description="Longitudinal speech transformer for ALSFRS-R speech scores.")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND")
    sub.required = True

    def add(name, func, help_, sections):
        p = sub.add_parser(name, parents=[common], help=help_, description=help_, formatter_class=Fmt,
                           epilog=_defaults_epilog(sections))
        p.set_defaults(func=func)
        return p

    add("synth", cmd_synth, "write a synthetic cohort", ["synth"])

    p = add("validate", cmd_validate, "check a manifest and its feature files", [])
    p.add_argument("manifest", help="manifest path")

    p = add("train", cmd_train, "train a model on the training split", ["model", "train", "data"])
    p.add_argument("--manifest", required=True, help="manifest path")
    p.add_argument("--test-fraction", type=float, default=None,
                   help="override [data] test_fraction; 0 trains on every patient")

    p = add("eval", cmd_eval, "evaluate a checkpoint", ["data"])
    p.add_argument("--checkpoint", required=True, help="checkpoint path")
    p.add_argument("--manifest", required=True, help="manifest path")
    p.add_argument("--branch", choices=["regression", "classification"], default="regression",
                   help="readout branch")
    p.add_argument("--split", choices=["test", "train", "all"], default="test", help="patients to evaluate")

    p = add("sweep", cmd_sweep, "train and evaluate one model per (axis value, seed)",
            ["sweep", "model", "train", "data", "layer_manifests"])
    p.add_argument("--spec", metavar="PATH", default=None,
                   help="sweep spec file; same format as --config and merged after it")
    p.add_argument("--manifest", default=None, help="manifest path (not needed for the layer axis)")

    p = add("phoneme-importance", cmd_phoneme_importance, "macro F1 with one phoneme segment kept", ["data"])
    p.add_argument("--checkpoint", required=True, help="checkpoint trained with phoneme tokens")
    p.add_argument("--manifest", required=True, help="manifest path")
    p.add_argument("--policy", choices=list(an.POLICIES), default="first", help="segment selection policy")
    p.add_argument("--branch", choices=["regression", "classification"], default="regression",
                   help="readout branch")
    p.add_argument("--split", choices=["test", "train", "all"], default="test", help="patients to evaluate")

    p = add("baseline", cmd_baseline, "linear hinge-loss baseline on utterance mean features",
            ["baseline", "data"])
    p.add_argument("--manifest", required=True, help="manifest path")

    p = add("report", cmd_report, "merge metric reports into one comparison table", [])
    p.add_argument("reports", nargs="+", help="metrics.json files")
    return parser


def main(argv: Optional[list] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.threads < 1:
            raise UsageError("--threads must be >= 1")
        cfg = resolve_config(args)
        args.func(args, cfg)
    except (TrainingAborted, nc.NumericError) as exc:
        print(f"numeric abort: {exc}", file=sys.stderr)
        return 2
    except (UsageError, ConfigError, DataError, nc.ContractError, mx.MetricError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
