"""Sample-based discrepancies (Gaussian MMD, W1, W2), the two interpolation
baselines and the repeated-subsampling benchmark report."""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np
from scipy.spatial.distance import cdist, pdist

from .autodiff import seed_streams
from .oracle import DiscreteMeasure, as_measure, emd, exact_ot, w2

log = logging.getLogger(__name__)

METRICS = ("mmd", "emd", "w2")
COLUMN_TITLES = {"mmd": "MMD(G)", "emd": "EMD", "w2": "W2"}


def median_bandwidth(a: np.ndarray, b: np.ndarray) -> float:
    """sigma^2 = median pairwise squared distance of the pooled sample."""
    pooled = np.concatenate([a, b])
    if pooled.shape[0] < 2:
        return 1.0
    med = float(np.median(pdist(pooled, "sqeuclidean")))
    return med if med > 0 else 1.0


def _gram_mean(x: np.ndarray, y: np.ndarray, sigma2: float) -> float:
    return float(np.exp(-cdist(x, y, "sqeuclidean") / (2.0 * sigma2)).mean())


def mmd_gaussian(a, b, bandwidth: float | None = None) -> float:
    """Biased (V-statistic) MMD with k(x, y) = exp(-|x-y|^2 / (2 sigma^2)).

    ``bandwidth`` is sigma^2; ``None`` picks the median heuristic.
    """
    a = np.atleast_2d(np.asarray(getattr(a, "points", a), dtype=float))
    b = np.atleast_2d(np.asarray(getattr(b, "points", b), dtype=float))
    if a.shape[0] == 0 or b.shape[0] == 0:
        raise ValueError("both samples must be non-empty")
    if a.shape[1] != b.shape[1]:
        raise ValueError(f"dimension mismatch: {a.shape[1]} vs {b.shape[1]}")
    sigma2 = median_bandwidth(a, b) if bandwidth is None else float(bandwidth)
    if not sigma2 > 0:
        raise ValueError("bandwidth must be positive")
    val = _gram_mean(a, a, sigma2) + _gram_mean(b, b, sigma2) - 2.0 * _gram_mean(a, b, sigma2)
    return float(np.sqrt(max(val, 0.0)))


def mmd_permutation_test(a, b, n_perm: int = 200, seed: int = 0, bandwidth: float | None = None) -> tuple[float, float]:
    """Returns (observed MMD, permutation p-value). The bandwidth is fixed
    once on the pooled sample so every permutation uses the same kernel."""
    a = np.asarray(getattr(a, "points", a), dtype=float)
    b = np.asarray(getattr(b, "points", b), dtype=float)
    sigma2 = median_bandwidth(a, b) if bandwidth is None else bandwidth
    observed = mmd_gaussian(a, b, sigma2)
    pooled = np.concatenate([a, b])
    rng = np.random.default_rng(seed)
    hits = 0
    for _ in range(n_perm):
        idx = rng.permutation(pooled.shape[0])
        if mmd_gaussian(pooled[idx[: len(a)]], pooled[idx[len(a):]], sigma2) >= observed:
            hits += 1
    return observed, (hits + 1) / (n_perm + 1)


def metric_triple(truth, pred, bandwidth: float | None = None) -> dict[str, float]:
    truth, pred = as_measure(truth), as_measure(pred)
    return {
        "mmd": mmd_gaussian(truth.points, pred.points, bandwidth),
        "emd": emd(truth, pred),
        "w2": w2(truth, pred),
    }


# ---------------------------------------------------------------------------
# Baselines


def baseline_midpoint(prev, nxt, mode: str = "ot") -> DiscreteMeasure:
    """Baseline 1 estimate at the midpoint time.

    ``mode="ot"`` pairs the clouds with the exact OT plan and places each
    plan atom at (x + y) / 2 with its plan mass. ``mode="mixture"`` is the
    cruder independent 50/50 mixture of the two clouds.
    """
    prev, nxt = as_measure(prev), as_measure(nxt)
    if prev.dim != nxt.dim:
        raise ValueError(f"dimension mismatch: {prev.dim} vs {nxt.dim}")
    if mode == "mixture":
        pts = np.concatenate([prev.points, nxt.points])
        w = np.concatenate([0.5 * prev.weights / prev.weights.sum(), 0.5 * nxt.weights / nxt.weights.sum()])
        return DiscreteMeasure(pts, w)
    if mode != "ot":
        raise ValueError(f"unknown midpoint mode {mode!r}")
    _, plan = exact_ot(prev, nxt)
    i, j = np.nonzero(plan > 1e-15)
    return DiscreteMeasure(0.5 * (prev.points[i] + nxt.points[j]), plan[i, j])


def baseline_adjacent(truth, prev, nxt, bandwidth: float | None = None) -> dict[str, float]:
    """Baseline 2: per metric, the mean of metric(truth, prev) and metric(truth, next)."""
    m_prev = metric_triple(truth, prev, bandwidth)
    m_next = metric_triple(truth, nxt, bandwidth)
    return {k: 0.5 * (m_prev[k] + m_next[k]) for k in METRICS}


# ---------------------------------------------------------------------------
# Report


@dataclass
class MetricEntry:
    method: str
    time: float
    mean: dict[str, float]
    std: dict[str, float]
    reps: int

    def __post_init__(self):
        if any(v < 0 for v in self.mean.values()):
            raise ValueError("metric means must be nonnegative")


@dataclass
class MetricReport:
    entries: list[MetricEntry] = field(default_factory=list)

    @property
    def methods(self) -> list[str]:
        return list(dict.fromkeys(e.method for e in self.entries))

    @property
    def times(self) -> list[float]:
        return list(dict.fromkeys(e.time for e in self.entries))

    def get(self, method: str, time: float | None = None) -> MetricEntry:
        for e in self.entries:
            if e.method == method and (time is None or e.time == time):
                return e
        raise KeyError((method, time))

    def extend(self, other: "MetricReport") -> "MetricReport":
        self.entries.extend(other.entries)
        return self

    def to_csv(self, path: str | Path) -> None:
        with open(path, "w", encoding="utf-8", newline="") as fh:
            wr = csv.writer(fh, lineterminator="\n")
            wr.writerow(["method", "time", "reps"] + list(METRICS) + [f"{m}_std" for m in METRICS])
            for e in self.entries:
                wr.writerow(
                    [e.method, repr(float(e.time)), e.reps]
                    + [repr(e.mean[m]) for m in METRICS]
                    + [repr(e.std[m]) for m in METRICS]
                )

    def summary(self) -> str:
        """Methods as rows, one {MMD(G), EMD, W2} column group per time."""
        times = self.times
        width = max([len("Method")] + [len(m) for m in self.methods]) + 2
        head1 = "Method".ljust(width) + "".join("| " + f"t = {t:g}".ljust(27) for t in times)
        head2 = " " * width + "".join("| " + "".join(COLUMN_TITLES[m].ljust(9) for m in METRICS) for _ in times)
        lines = [head1, head2, "-" * len(head2)]
        for method in self.methods:
            row = method.ljust(width)
            for t in times:
                try:
                    e = self.get(method, t)
                    row += "| " + "".join(f"{e.mean[m]:<9.4f}" for m in METRICS)
                except KeyError:
                    row += "| " + "".join("-".ljust(9) for _ in METRICS)
            lines.append(row)
        reps = sorted({e.reps for e in self.entries})
        lines.append(f"(means over {', '.join(map(str, reps))} repetitions)")
        return "\n".join(lines)


def _draw(m: DiscreteMeasure, size: int, rng: np.random.Generator) -> DiscreteMeasure:
    """Uniform clouds are subsampled without replacement; weighted ones are
    resampled by weight."""
    w = m.weights
    if np.allclose(w, w[0]):
        return m.subsample(size, rng)
    return DiscreteMeasure(m.sample(size, rng))


def benchmark_report(
    truth,
    predictions: Mapping[str, DiscreteMeasure],
    reps: int = 100,
    size: int | None = None,
    seed: int = 0,
    time: float = 0.0,
    adjacent: tuple | None = None,
    bandwidth: float | None = None,
) -> MetricReport:
    """Average the three metrics over ``reps`` subsampling repetitions.

    Each repetition draws ``size`` points (default min(1000, smallest cloud))
    from the truth and from every prediction. ``adjacent=(prev, next)`` adds
    the Baseline 2 row.
    """
    truth = as_measure(truth)
    preds = {k: as_measure(v) for k, v in predictions.items()}
    if adjacent is not None:
        adjacent = tuple(as_measure(m) for m in adjacent)
    clouds = [truth, *preds.values(), *(adjacent or ())]
    if any(c.dim != truth.dim for c in clouds):
        raise ValueError("all clouds must share the dimension of the truth")
    if reps < 1:
        raise ValueError("reps must be >= 1")
    size = size or min(1000, min(c.n for c in clouds))
    rows: dict[str, list[list[float]]] = {k: [] for k in preds}
    if adjacent is not None:
        rows["baseline2_adjacent"] = []
    for rng in seed_streams(seed, reps):
        t_sub = _draw(truth, size, rng)
        for name, p in preds.items():
            m = metric_triple(t_sub, _draw(p, size, rng), bandwidth)
            rows[name].append([m[k] for k in METRICS])
        if adjacent is not None:
            prev, nxt = (_draw(a, size, rng) for a in adjacent)
            m = baseline_adjacent(t_sub, prev, nxt, bandwidth)
            rows["baseline2_adjacent"].append([m[k] for k in METRICS])
    entries = []
    for name, vals in rows.items():
        arr = np.asarray(vals)
        entries.append(
            MetricEntry(
                name,
                float(time),
                dict(zip(METRICS, map(float, arr.mean(axis=0)))),
                dict(zip(METRICS, map(float, arr.std(axis=0)))),
                reps,
            )
        )
    return MetricReport(entries)
