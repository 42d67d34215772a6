"""Accuracy, MAE, per-DOA histograms and results tables."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, ContractError
from .roomsim import DoaGrid


def _pair(estimates, truths) -> tuple[np.ndarray, np.ndarray]:
    est = np.asarray(estimates, dtype=float).ravel()
    tru = np.asarray(truths, dtype=float).ravel()
    if est.size != tru.size:
        raise ContractError(f"{est.size} estimates for {tru.size} truths")
    if est.size == 0:
        raise ContractError("cannot score an empty evaluation set")
    return est, tru


def mae_degrees(estimates, truths) -> float:
    """Mean absolute angular error; no wrapping since the grid spans 180 degrees."""
    est, tru = _pair(estimates, truths)
    return float(np.mean(np.abs(est - tru)))


def frame_accuracy(estimates, truths) -> float:
    """Percentage of exact matches."""
    est, tru = _pair(estimates, truths)
    return 100.0 * float(np.mean(est == tru))


def doa_counts(estimates, truths, grid: DoaGrid) -> np.ndarray:
    """``T x T`` counts, rows = true DOA, columns = estimate."""
    est, tru = _pair(estimates, truths)
    t = len(grid)
    rows = np.array([grid.index(a) for a in tru])
    cols = np.array([grid.index(a) for a in est])
    return np.bincount(rows * t + cols, minlength=t * t).reshape(t, t)


def doa_histogram(estimates, truths, grid: DoaGrid) -> np.ndarray:
    """Row-normalised estimate histogram; rows without samples stay zero."""
    counts = doa_counts(estimates, truths, grid).astype(float)
    sums = counts.sum(axis=1, keepdims=True)
    return np.divide(counts, sums, out=np.zeros_like(counts), where=sums > 0)


def histogram_csv(hist: np.ndarray, grid: DoaGrid) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["true_deg"] + [f"{a:g}" for a in grid.angles])
    for a, row in zip(grid.angles, hist):
        w.writerow([f"{a:g}"] + [repr(float(v)) for v in row])
    return buf.getvalue()


@dataclass
class EvalResult:
    method: str
    preset: str
    labeled_count: int
    mae_degrees: float
    accuracy_percent: float
    counts: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        if not 0.0 <= self.accuracy_percent <= 100.0:
            raise ContractError(f"accuracy {self.accuracy_percent} outside [0, 100]")


def evaluate(method: str, preset: str, labeled_count: int, estimates, truths, grid: DoaGrid) -> EvalResult:
    return EvalResult(method, preset, int(labeled_count), mae_degrees(estimates, truths),
                      frame_accuracy(estimates, truths), doa_counts(estimates, truths, grid))


# SRP-PHAT has no label count; it is listed as its own row
SRP_METHOD = "srp-phat"
TABLE_FIELDS = ("J", "method", "mae_deg", "accuracy_pct")


def _sorted_rows(results: list[EvalResult]) -> list[EvalResult]:
    learned = sorted((r for r in results if r.method != SRP_METHOD), key=lambda r: (r.labeled_count, r.method))
    return learned + [r for r in results if r.method == SRP_METHOD]


def _ordered_methods(results: list[EvalResult]) -> list[str]:
    seen: list[str] = []
    for r in _sorted_rows(results):
        if r.method != SRP_METHOD and r.method not in seen:
            seen.append(r.method)
    return sorted(seen)


def results_table(results: list[EvalResult]) -> tuple[list[str], list[list[str]]]:
    """Rows per J with ``<method> MAE`` / ``<method> Acc`` columns; SRP-PHAT last."""
    presets = {r.preset for r in results}
    if len(presets) > 1:
        raise ConfigError(f"one table per preset, got {sorted(presets)}")
    methods = _ordered_methods(results)
    header = ["J"] + [f"{m} {col}" for m in methods for col in ("MAE", "Acc")]
    by_j: dict[int, dict[str, EvalResult]] = {}
    for r in results:
        if r.method != SRP_METHOD:
            by_j.setdefault(r.labeled_count, {})[r.method] = r
    rows = []
    for j in sorted(by_j):
        row = [str(j)]
        for m in methods:
            r = by_j[j].get(m)
            row += ["", ""] if r is None else [f"{r.mae_degrees:.1f}", f"{r.accuracy_percent:.1f}"]
        rows.append(row)
    for r in results:
        if r.method == SRP_METHOD:
            rows.append([SRP_METHOD, f"{r.mae_degrees:.1f}", f"{r.accuracy_percent:.1f}"]
                        + [""] * (len(header) - 3))
    return header, rows


def emit_results_table(results: list[EvalResult]) -> tuple[str, str]:
    """Return ``(csv_text, aligned_text)``.

    The CSV is a long-format listing with full precision so that it parses
    back to the same numbers; the text rendering is a wide table, one row per method.
    """
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(("preset",) + TABLE_FIELDS)
    for r in _sorted_rows(results):
        w.writerow([r.preset, r.labeled_count, r.method, repr(float(r.mae_degrees)), repr(float(r.accuracy_percent))])
    header, rows = results_table(results) if results else (["J"], [])
    widths = [max(len(c) for c in col) for col in zip(header, *rows)] if rows else [len(h) for h in header]
    lines = ["  ".join(h.ljust(wd) for h, wd in zip(header, widths)).rstrip()]
    lines += ["  ".join(c.ljust(wd) for c, wd in zip(row, widths)).rstrip() for row in rows]
    return buf.getvalue(), "\n".join(lines) + "\n"


def parse_results_csv(text: str) -> list[EvalResult]:
    return [EvalResult(r["method"], r["preset"], int(r["J"]), float(r["mae_deg"]), float(r["accuracy_pct"]))
            for r in csv.DictReader(io.StringIO(text))]
