"""Train, compare and diagnose progressive-focus runs from JSON experiment files.

    pyrofocus train    --spec exp.json [overrides]
    pyrofocus compare  --spec exp.json [overrides]
    pyrofocus diagnose runs/exp/hpf/trace.csv [--t 0.05]

Experiment files are JSON (see README for the schema). Values are resolved
as: command-line flag, then arm entry, then the experiment file's ``focus`` block, then
built-in defaults. The seed falls back to ``PYROFOCUS_SEED`` when neither the
flag nor the file sets it.

Exit codes: 0 success, 1 configuration or input error, 2 training diverged.
"""

from __future__ import annotations

import argparse
import csv
import json
import math
import os
import sys
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Optional

import numpy as np

from . import diagnostics as dg
from .scheduler import ConfigError, FocusConfig
from .sim import DivergenceError, OptimConfig, StreamConfig, TrainingTrace, tail_mean, train

SCHEMA_VERSION = 1
SEED_ENV = "PYROFOCUS_SEED"

_TOP_KEYS = {"schema_version", "name", "seed", "out", "t", "stream", "focus", "arms", "optim"}
_STREAM_KEYS = {f.name for f in fields(StreamConfig)} - {"seed"}
_OPTIM_KEYS = {f.name for f in fields(OptimConfig)}
# spec / flag name -> FocusConfig field
_FOCUS_KEYS = {
    "alpha": "alpha_base",
    "gamma": "gamma_base",
    "w": "w",
    "delta": "delta",
    "mode": "sampling_mode",
    "loss": "loss_kind",
}

COMPARISON_COLUMNS = (
    "arm",
    "loss",
    "mode",
    "final_loss",
    "final_accuracy",
    "tail_hard_share",
    "mean_gamma_ad",
)


@dataclass
class Arm:
    name: str
    focus: FocusConfig


@dataclass
class ExperimentSpec:
    name: str
    stream: StreamConfig
    arms: list
    optim: OptimConfig
    out: Path
    t: Optional[float] = None
    keep_losses: bool = field(default=False, repr=False)


def _check_keys(block: dict, allowed, where: str):
    if not isinstance(block, dict):
        raise ConfigError(f"{where}: expected an object")
    for key in block:
        if key not in allowed:
            raise ConfigError(f"{where}.{key}: unknown field")


def _focus(base: dict, where: str, num_levels: int) -> FocusConfig:
    kwargs = {_FOCUS_KEYS[k]: v for k, v in base.items()}
    try:
        return FocusConfig(num_levels=num_levels, **kwargs)
    except ConfigError as exc:
        raise ConfigError(f"{where}: {exc}") from None
    except TypeError as exc:
        raise ConfigError(f"{where}: {exc}") from None


def _resolve_seed(flag: Optional[int], spec_seed, env=None) -> int:
    env = os.environ if env is None else env
    if flag is not None:
        return int(flag)
    if spec_seed is not None:
        return int(spec_seed)
    if env.get(SEED_ENV):
        try:
            return int(env[SEED_ENV])
        except ValueError:
            raise ConfigError(f"{SEED_ENV}: not an integer: {env[SEED_ENV]!r}") from None
    return 0


def build_experiment(raw: dict, overrides: Optional[dict] = None, env=None) -> ExperimentSpec:
    """Validate a parsed spec file and apply flag overrides.

    ``overrides`` uses flag names (``seed``, ``iters``, ``lr``, ``alpha``,
    ``gamma``, ``w``, ``delta``, ``mode``, ``loss``, ``t``, ``out``); None
    values are ignored.
    """
    ov = {k: v for k, v in (overrides or {}).items() if v is not None}
    _check_keys(raw, _TOP_KEYS, "spec")
    version = raw.get("schema_version")
    if version != SCHEMA_VERSION:
        raise ConfigError(f"schema_version: expected {SCHEMA_VERSION}, got {version!r}")
    name = raw.get("name")
    if not isinstance(name, str) or not name.strip():
        raise ConfigError("name: must be a non-empty string")

    stream_raw = dict(raw.get("stream", {}))
    _check_keys(stream_raw, _STREAM_KEYS, "stream")
    seed = _resolve_seed(ov.get("seed"), raw.get("seed"), env)
    try:
        stream = StreamConfig(seed=seed, **stream_raw)
    except (ConfigError, TypeError) as exc:
        raise ConfigError(f"stream: {exc}") from None

    optim_raw = dict(raw.get("optim", {}))
    _check_keys(optim_raw, _OPTIM_KEYS, "optim")
    for key in ("lr", "iters"):
        if key in ov:
            optim_raw[key] = ov[key]
    try:
        optim = OptimConfig(**optim_raw)
    except (ConfigError, TypeError) as exc:
        raise ConfigError(f"optim: {exc}") from None

    base = dict(raw.get("focus", {}))
    _check_keys(base, _FOCUS_KEYS, "focus")
    flag_focus = {k: ov[k] for k in _FOCUS_KEYS if k in ov}
    arms_raw = raw.get("arms")
    arms = []
    if arms_raw is None:
        arms.append(Arm(name, _focus({**base, **flag_focus}, "focus", stream.num_levels)))
    else:
        if not isinstance(arms_raw, list) or not arms_raw:
            raise ConfigError("arms: must be a non-empty list")
        for i, arm in enumerate(arms_raw):
            where = f"arms[{i}]"
            _check_keys(arm, set(_FOCUS_KEYS) | {"name"}, where)
            arm_name = arm.get("name")
            if not isinstance(arm_name, str) or not arm_name.strip():
                raise ConfigError(f"{where}.name: must be a non-empty string")
            params = {k: v for k, v in arm.items() if k != "name"}
            arms.append(Arm(arm_name, _focus({**base, **params, **flag_focus}, where, stream.num_levels)))
        names = [a.name for a in arms]
        if len(set(names)) != len(names):
            raise ConfigError("arms: arm names must be unique")

    t = ov.get("t", raw.get("t"))
    if t is not None and not (isinstance(t, (int, float)) and t >= 0):
        raise ConfigError(f"t: must be a non-negative number, got {t!r}")
    out = Path(ov.get("out", raw.get("out") or Path("runs") / name))
    return ExperimentSpec(name, stream, arms, optim, out, None if t is None else float(t))


def load_experiment(path, overrides: Optional[dict] = None, env=None) -> ExperimentSpec:
    path = Path(path)
    try:
        raw = json.loads(path.read_text(encoding="utf-8"))
    except OSError as exc:
        raise ConfigError(f"spec: cannot read {path}: {exc}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"spec: {path} is not valid JSON: {exc}") from None
    return build_experiment(raw, overrides, env)


def _mean_gamma(trace: TrainingTrace) -> np.ndarray:
    if len(trace) == 0:
        return np.full(trace.num_levels, math.nan)
    return trace.gamma_ad.mean(axis=0)


def run_arm(spec: ExperimentSpec, arm: Arm) -> TrainingTrace:
    trace = train(spec.stream, arm.focus, spec.optim, t=spec.t, record_losses=spec.keep_losses)
    arm_dir = spec.out / arm.name
    dg.export_trace_csv(trace, arm_dir / "trace.csv")
    dg.export_summary_csv(dg.summarize(trace), arm_dir / "summary.csv")
    if spec.keep_losses:
        np.save(arm_dir / "losses.npy", trace.losses)
    return trace


def _fmt(values) -> str:
    return "[" + " ".join(f"{v:.4f}" for v in values) + "]"


def _summary_line(arm: Arm, trace: TrainingTrace) -> str:
    final = trace.total_loss[-1] if len(trace) else math.nan
    return (
        f"{arm.name}: final_loss={final:.6g} accuracy={_fmt(trace.final_accuracy)} "
        f"mean_gamma_ad={_fmt(_mean_gamma(trace))}"
    )


def comparison_row(arm: Arm, trace: TrainingTrace) -> list:
    n = len(trace)
    return [
        arm.name,
        arm.focus.loss_kind.value,
        arm.focus.sampling_mode.value,
        repr(float(trace.total_loss[-1])) if n else "nan",
        repr(float(trace.overall_accuracy)),
        repr(tail_mean(trace.hard_share)) if n else "nan",
        repr(float(trace.gamma_ad.mean())) if n else "nan",
    ]


def cmd_train(spec: ExperimentSpec, stdout=None) -> dict:
    stdout = stdout or sys.stdout
    traces = {}
    for arm in spec.arms:
        traces[arm.name] = run_arm(spec, arm)
        print(_summary_line(arm, traces[arm.name]), file=stdout)
    return traces


def cmd_compare(spec: ExperimentSpec, stdout=None) -> dict:
    traces = cmd_train(spec, stdout)
    path = spec.out / "comparison.csv"
    try:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(COMPARISON_COLUMNS)
            for arm in spec.arms:
                w.writerow(comparison_row(arm, traces[arm.name]))
    except OSError as exc:
        raise OSError(f"cannot write {path}: {exc}") from exc
    return traces


def cmd_diagnose(trace_path, t: Optional[float] = None, out=None, stdout=None) -> list:
    """Recompute the summary and drift curve of a stored trace."""
    stdout = stdout or sys.stdout
    trace_path = Path(trace_path)
    table = dg.read_trace_csv(trace_path)
    out = Path(out) if out is not None else trace_path.parent
    rows = dg.summarize(table)
    dg.export_summary_csv(rows, out / "summary.csv")
    if t is None:
        drift = dg.drift_series(table)
    else:
        losses_path = trace_path.parent / "losses.npy"
        if not losses_path.exists():
            raise ConfigError(
                f"t: a custom threshold needs per-sample losses at {losses_path} (train with --keep-losses)"
            )
        losses = np.load(losses_path)
        mass = losses.sum(axis=1)
        hard = np.where(losses > t, losses, 0.0).sum(axis=1)
        drift = np.where(mass > 0, hard / np.where(mass > 0, mass, 1.0), 0.0)
    with open(out / "drift.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("iter", "hard_share"))
        for it, v in enumerate(drift):
            w.writerow((it, repr(float(v))))
    tail = tail_mean(drift) if len(drift) else math.nan
    print(f"{trace_path}: levels={table.num_levels} iters={table.iters} tail_hard_share={tail:.6g}", file=stdout)
    return rows


def _add_overrides(p: argparse.ArgumentParser):
    p.add_argument("--spec", required=True, help="experiment JSON file")
    p.add_argument("--seed", type=int)
    p.add_argument("--iters", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--w", type=float)
    p.add_argument("--delta", type=float)
    p.add_argument("--gamma", type=float)
    p.add_argument("--alpha", type=float)
    p.add_argument("--mode", choices=["all-level", "level-wise", "per-sample"])
    p.add_argument("--loss", choices=["fl", "hpf", "pfqfl", "pfvfl"])
    p.add_argument("--t", type=float, help="hard-case loss threshold (default: median initial loss)")
    p.add_argument("--out", help="output directory")
    p.add_argument("--keep-losses", action="store_true", help="also save per-sample losses")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="pyrofocus", description=__doc__.split("\n\n")[0])
    sub = parser.add_subparsers(dest="command", required=True)
    _add_overrides(sub.add_parser("train", help="train every arm of a spec and export traces"))
    _add_overrides(sub.add_parser("compare", help="train all arms and write a comparison table"))
    diag = sub.add_parser("diagnose", help="summarize a stored trace CSV")
    diag.add_argument("trace", help="trace.csv written by train/compare")
    diag.add_argument("--t", type=float)
    diag.add_argument("--out", help="output directory (default: next to the trace)")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "diagnose":
            cmd_diagnose(args.trace, args.t, args.out)
            return 0
        overrides = {k: getattr(args, k) for k in ("seed", "iters", "lr", "t", "out", *_FOCUS_KEYS)}
        spec = load_experiment(args.spec, overrides)
        spec.keep_losses = args.keep_losses
        if args.command == "train":
            cmd_train(spec)
        else:
            cmd_compare(spec)
    except DivergenceError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (ConfigError, dg.SchemaError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
