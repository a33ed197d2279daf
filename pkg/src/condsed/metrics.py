"""Frame-based F1 and error rate, and aggregation over repeated runs."""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field

import numpy as np


class MetricError(ValueError):
    pass


@dataclass
class EvalReport:
    f1: float
    er: float
    tp: int
    fp: int
    fn: int
    n_ref: int
    s: int
    d: int
    i: int
    threshold: float = 0.5

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)


@dataclass
class Aggregate:
    f1_mean: float
    f1_std: float
    er_mean: float
    er_std: float
    per_run: list[tuple[float, float]] = field(default_factory=list)


def frame_scores(y_hat, y, threshold: float = 0.5, mask=None) -> EvalReport:
    """Micro-averaged frame F1 and frame error rate.

    ``y_hat`` and ``y`` are (..., T, C); frames where ``mask`` is 0 are ignored.
    Per frame, substitutions are ``min(FN, FP)``, deletions ``max(0, FN - FP)``
    and insertions ``max(0, FP - FN)``.
    """
    y_hat = np.asarray(y_hat)
    y = np.asarray(y)
    if y_hat.shape != y.shape:
        raise MetricError(f"prediction shape {y_hat.shape} != reference shape {y.shape}")
    c = y.shape[-1]
    pred = (y_hat >= threshold).reshape(-1, c)
    ref = (y > 0.5).reshape(-1, c)
    if mask is not None:
        keep = np.asarray(mask).reshape(-1) > 0
        pred, ref = pred[keep], ref[keep]
    tp_t = (pred & ref).sum(axis=1)
    fp_t = (pred & ~ref).sum(axis=1)
    fn_t = (~pred & ref).sum(axis=1)
    tp, fp, fn = int(tp_t.sum()), int(fp_t.sum()), int(fn_t.sum())
    n_ref = int(ref.sum())
    if n_ref == 0:
        raise MetricError("error rate undefined: no active reference frames")
    s = int(np.minimum(fn_t, fp_t).sum())
    d = int(np.maximum(0, fn_t - fp_t).sum())
    i = int(np.maximum(0, fp_t - fn_t).sum())
    denom = 2 * tp + fp + fn
    f1 = 2 * tp / denom if denom else 0.0
    return EvalReport(f1, (s + d + i) / n_ref, tp, fp, fn, n_ref, s, d, i, threshold)


def aggregate_runs(reports: list[EvalReport]) -> Aggregate:
    """Arithmetic mean and population standard deviation over runs."""
    if not reports:
        raise MetricError("no reports to aggregate")
    f1 = np.array([r.f1 for r in reports])
    er = np.array([r.er for r in reports])
    return Aggregate(float(f1.mean()), float(f1.std()), float(er.mean()), float(er.std()),
                     [(r.f1, r.er) for r in reports])


TABLE_HEADER = ["method", "f1_mean", "f1_std", "f1_delta", "er_mean", "er_std", "er_delta"]


def table_rows(rows: dict[str, Aggregate], baseline: str | None = None) -> list[list]:
    base = rows.get(baseline) if baseline else None
    out = []
    for name, agg in rows.items():
        df1 = "" if base is None else f"{agg.f1_mean - base.f1_mean:.4f}"
        der = "" if base is None else f"{agg.er_mean - base.er_mean:.4f}"
        out.append([name, f"{agg.f1_mean:.4f}", f"{agg.f1_std:.4f}", df1,
                    f"{agg.er_mean:.4f}", f"{agg.er_std:.4f}", der])
    return out


def write_table(path, rows: dict[str, Aggregate], baseline: str | None = None) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(TABLE_HEADER)
        w.writerows(table_rows(rows, baseline))
