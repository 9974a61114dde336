"""Ranking agreement (NDCG@k, Spearman's rho), delta tables and efficiency ratios."""
from __future__ import annotations

import csv
import io
from typing import Mapping, Sequence

import numpy as np
from scipy.stats import rankdata

from .errors import ArgumentError, DimensionError, UndefinedCorrelationError

DELTA_COLUMNS = ("task", "dataset", "connector", "baseline", "hyma_metric", "baseline_metric", "delta")


def default_ks(num_pairs: int) -> tuple:
    """Cut-offs reported for a zoo of ``num_pairs`` pairs."""
    if num_pairs >= 27:
        return (5, 7, 10)
    if num_pairs >= 9:
        return (5, 7, 9)
    return tuple(range(1, num_pairs + 1))


def order_by_metric(metrics: Mapping) -> list:
    """Keys sorted by metric descending, ties broken by lower key."""
    return sorted(metrics, key=lambda k: (-metrics[k], k))


def ndcg_at_k(candidate_order: Sequence, reference: Mapping, k: int) -> float:
    """NDCG@k with linear gains taken from the reference metrics.

    ``candidate_order`` lists pair keys best-first; ``reference`` maps each
    key to its reference metric. Gains must be non-negative for the value to
    lie in [0, 1]. When the ideal DCG is zero every order is ideal.
    """
    order = list(candidate_order)
    if k < 1:
        raise ArgumentError("k must be >= 1")
    if k > len(order):
        raise ArgumentError(f"k={k} exceeds {len(order)} ranked pairs")
    if set(order) != set(reference) or len(set(order)) != len(order):
        raise DimensionError("candidate order and reference must cover the same pairs once")
    discounts = 1.0 / np.log2(np.arange(2, k + 2))
    gains = np.array([reference[p] for p in order[:k]], dtype=np.float64)
    ideal = np.sort(np.array(list(reference.values()), dtype=np.float64))[::-1][:k]
    idcg = float(ideal @ discounts)
    if idcg == 0.0:
        return 1.0
    return float(gains @ discounts) / idcg


def ndcg_from_metrics(candidate: Mapping, reference: Mapping, k: int) -> float:
    return ndcg_at_k(order_by_metric(candidate), reference, k)


def spearman_rho(candidate, reference) -> float:
    """Pearson correlation of average-tie ranks.

    Accepts two equal-length sequences or two mappings over the same keys.
    """
    if isinstance(candidate, Mapping):
        if set(candidate) != set(reference):
            raise DimensionError("rankings must cover the same pairs")
        keys = sorted(candidate)
        candidate = [candidate[p] for p in keys]
        reference = [reference[p] for p in keys]
    x = np.asarray(candidate, dtype=np.float64)
    y = np.asarray(reference, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise DimensionError(f"shapes {x.shape} and {y.shape} differ")
    if len(x) < 2:
        raise ArgumentError("at least two pairs are needed")
    rx, ry = rankdata(x) - (len(x) + 1) / 2, rankdata(y) - (len(y) + 1) / 2
    sx, sy = float(rx @ rx), float(ry @ ry)
    if sx == 0 or sy == 0:
        raise UndefinedCorrelationError("zero rank variance")
    return float(np.clip((rx @ ry) / np.sqrt(sx * sy), -1.0, 1.0))


def delta_table(hyma_metric: float, baselines: Mapping, *, task: str = "", dataset: str = "",
                connector: str = "") -> list:
    """One row per baseline with delta = hyma - baseline (signed)."""
    rows = []
    for name in baselines:
        base = float(baselines[name])
        rows.append({"task": task, "dataset": dataset, "connector": connector, "baseline": name,
                     "hyma_metric": float(hyma_metric), "baseline_metric": base,
                     "delta": float(hyma_metric) - base})
    return rows


def rows_to_csv(rows: Sequence[Mapping], columns: Sequence[str] | None = None) -> str:
    columns = list(columns or (rows[0].keys() if rows else DELTA_COLUMNS))
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=columns, lineterminator="\n")
    writer.writeheader()
    for row in rows:
        writer.writerow({c: row.get(c, "") for c in columns})
    return buf.getvalue()


def efficiency_ratios(hyma_flops: int, grid_flops: int, best_guess_flops: int | None = None) -> dict:
    if hyma_flops <= 0:
        raise ArgumentError("HYMA bill must be positive")
    out = {"grid_over_hyma": grid_flops / hyma_flops}
    if best_guess_flops is not None:
        out["best_guess_over_hyma"] = best_guess_flops / hyma_flops
    return out
