"""Level-discrepancy measurements and CSV export.

Two CSV files are produced (UTF-8, header row, ``\\n`` line ends):

* trace: ``iter,level,n,n_pos,pos_prop,gamma_raw,gamma_ad,alpha_ad,loss_sum,loss_mean,hard_share``
  with one row per (iteration, level);
* summary: ``level,min,q1,median,q3,max,mean,d_was_to_best`` with one row per
  level, built from the positive-proportion series.

Floats are written with ``repr`` so re-reading reproduces them exactly.
"""

from __future__ import annotations

import csv
import math
from dataclasses import astuple, dataclass, fields
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np

from .losses import DomainError
from .sim import TrainingTrace, tail_mean

TRACE_COLUMNS = (
    "iter",
    "level",
    "n",
    "n_pos",
    "pos_prop",
    "gamma_raw",
    "gamma_ad",
    "alpha_ad",
    "loss_sum",
    "loss_mean",
    "hard_share",
)
SUMMARY_COLUMNS = ("level", "min", "q1", "median", "q3", "max", "mean", "d_was_to_best")


class SchemaError(ValueError):
    """A CSV file does not follow the expected schema."""


@dataclass
class LevelDistribution:
    """Positive-proportion series of one level; ``degenerate`` flags ``n == 0``."""

    level: int
    proportions: np.ndarray
    degenerate: np.ndarray


@dataclass(frozen=True)
class BoxStats:
    min: float
    q1: float
    median: float
    q3: float
    max: float
    mean: float


@dataclass(frozen=True)
class SummaryRow:
    level: int
    min: float
    q1: float
    median: float
    q3: float
    max: float
    mean: float
    d_was_to_best: float


@dataclass
class TraceTable:
    """The columns of a trace CSV as ``(iters, num_levels)`` arrays."""

    n: np.ndarray
    n_pos: np.ndarray
    pos_prop: np.ndarray
    gamma_raw: np.ndarray
    gamma_ad: np.ndarray
    alpha: np.ndarray
    loss_sum: np.ndarray
    loss_mean: np.ndarray
    level_hard_share: np.ndarray

    @classmethod
    def from_trace(cls, trace: TrainingTrace) -> "TraceTable":
        return cls(
            n=trace.n.copy(),
            n_pos=trace.n_pos.copy(),
            pos_prop=trace.pos_prop,
            gamma_raw=trace.gamma_raw.copy(),
            gamma_ad=trace.gamma_ad.copy(),
            alpha=trace.alpha.copy(),
            loss_sum=trace.loss_sum.copy(),
            loss_mean=trace.loss_mean.copy(),
            level_hard_share=trace.level_hard_share,
        )

    @property
    def iters(self) -> int:
        return self.n.shape[0]

    @property
    def num_levels(self) -> int:
        return self.n.shape[1]

    def equals(self, other: "TraceTable", tol: float = 0.0) -> bool:
        for f in fields(self):
            a, b = getattr(self, f.name), getattr(other, f.name)
            if a.shape != b.shape:
                return False
            if tol == 0.0:
                if not np.array_equal(a, b, equal_nan=a.dtype.kind == "f"):
                    return False
            elif not np.allclose(a, b, rtol=tol, atol=tol, equal_nan=True):
                return False
        return True


TraceLike = Union[TrainingTrace, TraceTable]


def _table(trace: TraceLike) -> TraceTable:
    return TraceTable.from_trace(trace) if isinstance(trace, TrainingTrace) else trace


def positive_proportions(trace: TraceLike) -> list[LevelDistribution]:
    """Per-level series of ``n_pos / n``; iterations with ``n == 0`` give 0 and are flagged."""
    tab = _table(trace)
    out = []
    for lv in range(tab.num_levels):
        n = tab.n[:, lv]
        props = np.where(n > 0, tab.n_pos[:, lv] / np.maximum(n, 1), 0.0)
        out.append(LevelDistribution(lv, props, n == 0))
    return out


def box_stats(dist: Union[LevelDistribution, Sequence[float]]) -> BoxStats:
    """Five-number summary plus mean; quartiles by linear interpolation (type 7)."""
    values = dist.proportions if isinstance(dist, LevelDistribution) else dist
    x = np.asarray(values, dtype=float).ravel()
    if x.size == 0:
        raise ValueError("box_stats needs a non-empty series")
    q = np.quantile(x, [0.0, 0.25, 0.5, 0.75, 1.0], method="linear")
    return BoxStats(*(float(v) for v in q), mean=float(x.mean()))


def wasserstein_1d(a: Sequence[float], b: Sequence[float]) -> float:
    """1-Wasserstein distance between two empirical distributions.

    Integrates ``|F_a - F_b|`` between consecutive points of the merged,
    sorted sample.
    """
    a = np.sort(np.asarray(a, dtype=float).ravel())
    b = np.sort(np.asarray(b, dtype=float).ravel())
    if a.size == 0 or b.size == 0:
        raise ValueError("wasserstein_1d needs two non-empty samples")
    if np.isnan(a).any() or np.isnan(b).any():
        raise DomainError("wasserstein_1d inputs contain NaN")
    merged = np.sort(np.concatenate([a, b]))
    widths = np.diff(merged)
    cdf_a = np.searchsorted(a, merged[:-1], side="right") / a.size
    cdf_b = np.searchsorted(b, merged[:-1], side="right") / b.size
    return float(np.sum(np.abs(cdf_a - cdf_b) * widths))


def best_level_distances(
    dists: Sequence[LevelDistribution], perf: Sequence[float]
) -> list[tuple[int, float]]:
    """Distance from the best-scoring level to every other level.

    The best level is ``argmax(perf)``, ties going to the lowest index.
    """
    if len(perf) != len(dists):
        raise ValueError(f"perf has {len(perf)} entries for {len(dists)} levels")
    best = int(np.argmax(np.asarray(perf, dtype=float)))
    ref = dists[best].proportions
    return [
        (d.level, wasserstein_1d(ref, d.proportions)) for i, d in enumerate(dists) if i != best
    ]


def level_scores(trace: TraceLike, frac: float = 0.1) -> np.ndarray:
    """Default per-level score: negative mean level loss over the final ``frac``."""
    tab = _table(trace)
    if tab.iters == 0:
        return np.zeros(tab.num_levels)
    return np.array([-tail_mean(tab.loss_mean[:, lv], frac) for lv in range(tab.num_levels)])


def summarize_distributions(
    dists: Sequence[LevelDistribution], perf: Optional[Sequence[float]] = None
) -> list[SummaryRow]:
    """Summary rows; without ``perf`` the distance column is NaN."""
    dist_to_best = {}
    if perf is not None:
        best = int(np.argmax(np.asarray(perf, dtype=float)))
        dist_to_best = dict(best_level_distances(dists, perf))
        dist_to_best[dists[best].level] = 0.0
    rows = []
    for d in dists:
        b = box_stats(d)
        rows.append(SummaryRow(d.level, *astuple(b), dist_to_best.get(d.level, math.nan)))
    return rows


def summarize(trace: TraceLike, perf: Optional[Sequence[float]] = None) -> list[SummaryRow]:
    """Box statistics and distance-to-best per level of a trace.

    ``perf`` defaults to :func:`level_scores`, which only needs trace columns,
    so a trace and its CSV export summarize identically. An empty trace has no
    rows.
    """
    tab = _table(trace)
    if tab.iters == 0:
        return []
    if perf is None:
        perf = level_scores(tab)
    return summarize_distributions(positive_proportions(tab), perf)


def drift_series(trace: TraceLike) -> np.ndarray:
    """Overall hard-case loss share per iteration, from per-level shares and masses."""
    tab = _table(trace)
    hard = (tab.level_hard_share * tab.loss_sum).sum(axis=1)
    mass = tab.loss_sum.sum(axis=1)
    return np.where(mass > 0, hard / np.where(mass > 0, mass, 1.0), 0.0)


def _open_for_write(path):
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        return open(path, "w", newline="", encoding="utf-8")
    except OSError as exc:
        raise OSError(f"cannot write {path}: {exc}") from exc


def export_trace_csv(trace: TraceLike, path) -> Path:
    tab = _table(trace)
    hs = tab.level_hard_share
    with _open_for_write(path) as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(TRACE_COLUMNS)
        for it in range(tab.iters):
            for lv in range(tab.num_levels):
                w.writerow(
                    [
                        it,
                        lv,
                        int(tab.n[it, lv]),
                        int(tab.n_pos[it, lv]),
                        repr(float(tab.pos_prop[it, lv])),
                        repr(float(tab.gamma_raw[it, lv])),
                        repr(float(tab.gamma_ad[it, lv])),
                        repr(float(tab.alpha[it, lv])),
                        repr(float(tab.loss_sum[it, lv])),
                        repr(float(tab.loss_mean[it, lv])),
                        repr(float(hs[it, lv])),
                    ]
                )
    return Path(path)


def export_summary_csv(rows: Sequence[SummaryRow], path) -> Path:
    with _open_for_write(path) as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SUMMARY_COLUMNS)
        for r in rows:
            w.writerow([r.level] + [repr(float(v)) for v in astuple(r)[1:]])
    return Path(path)


def export_csv(obj, path, perf: Optional[Sequence[float]] = None) -> Path:
    """Write a trace, or a list of level distributions / summary rows."""
    if isinstance(obj, (TrainingTrace, TraceTable)):
        return export_trace_csv(obj, path)
    items = list(obj)
    if items and isinstance(items[0], LevelDistribution):
        items = summarize_distributions(items, perf)
    return export_summary_csv(items, path)


def _read_rows(path, columns):
    path = Path(path)
    try:
        with open(path, newline="", encoding="utf-8") as fh:
            reader = csv.DictReader(fh)
            header = reader.fieldnames or []
            missing = [c for c in columns if c not in header]
            if missing:
                raise SchemaError(f"{path}: missing column {missing[0]!r}")
            rows = list(reader)
    except OSError as exc:
        raise OSError(f"cannot read {path}: {exc}") from exc
    except csv.Error as exc:
        raise SchemaError(f"{path}: malformed CSV: {exc}") from exc
    return rows


def _num(row, col, path, conv=float):
    try:
        return conv(row[col])
    except (TypeError, ValueError):
        raise SchemaError(f"{path}: bad value {row[col]!r} in column {col!r}") from None


def read_trace_csv(path) -> TraceTable:
    rows = _read_rows(path, TRACE_COLUMNS)
    if not rows:
        empty = np.zeros((0, 0))
        ints = np.zeros((0, 0), dtype=np.int64)
        return TraceTable(ints, ints.copy(), *(empty.copy() for _ in range(7)))
    its = [_num(r, "iter", path, int) for r in rows]
    lvs = [_num(r, "level", path, int) for r in rows]
    n_it, n_lv = max(its) + 1, max(lvs) + 1
    if len(rows) != n_it * n_lv or min(its) < 0 or min(lvs) < 0:
        raise SchemaError(f"{path}: expected one row per (iter, level) pair")
    cols = {
        "n": np.zeros((n_it, n_lv), dtype=np.int64),
        "n_pos": np.zeros((n_it, n_lv), dtype=np.int64),
    }
    float_cols = {
        "pos_prop": "pos_prop",
        "gamma_raw": "gamma_raw",
        "gamma_ad": "gamma_ad",
        "alpha": "alpha_ad",
        "loss_sum": "loss_sum",
        "loss_mean": "loss_mean",
        "level_hard_share": "hard_share",
    }
    for name in float_cols:
        cols[name] = np.full((n_it, n_lv), np.nan)
    seen = np.zeros((n_it, n_lv), dtype=bool)
    for r, it, lv in zip(rows, its, lvs):
        seen[it, lv] = True
        cols["n"][it, lv] = _num(r, "n", path, int)
        cols["n_pos"][it, lv] = _num(r, "n_pos", path, int)
        for name, col in float_cols.items():
            cols[name][it, lv] = _num(r, col, path)
    if not seen.all():
        raise SchemaError(f"{path}: expected one row per (iter, level) pair")
    return TraceTable(**cols)


def read_summary_csv(path) -> list[SummaryRow]:
    rows = _read_rows(path, SUMMARY_COLUMNS)
    return [
        SummaryRow(_num(r, "level", path, int), *(_num(r, c, path) for c in SUMMARY_COLUMNS[1:]))
        for r in rows
    ]
