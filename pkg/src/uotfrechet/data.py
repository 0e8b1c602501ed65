"""Temporal datasets: CSV IO, leave-one-out splits and synthetic generators."""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .oracle import DiscreteMeasure

log = logging.getLogger(__name__)


class DataError(ValueError):
    """Malformed or unusable input data; ``code`` names the failure class."""

    def __init__(self, message: str, code: str):
        super().__init__(message)
        self.code = code


@dataclass
class TemporalDataset:
    times: np.ndarray
    snapshots: list[DiscreteMeasure]
    projection: object | None = None

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=float)
        if self.times.size != len(self.snapshots):
            raise DataError("one time per snapshot required", "shape")
        if np.any(np.diff(self.times) <= 0):
            raise DataError("snapshot times must be strictly increasing", "order")
        if len({s.dim for s in self.snapshots}) > 1:
            raise DataError("snapshots have different dimensions", "ragged")

    @property
    def dim(self) -> int:
        return self.snapshots[0].dim

    def __len__(self) -> int:
        return len(self.snapshots)

    def index_of(self, t: float) -> int:
        hits = np.flatnonzero(np.isclose(self.times, t, rtol=0, atol=1e-12))
        if hits.size == 0:
            raise DataError(f"time {t} not in dataset {self.times.tolist()}", "missing_time")
        return int(hits[0])

    def pooled(self) -> DiscreteMeasure:
        """Uniform mixture of the snapshots (each snapshot gets mass 1/N)."""
        pts = np.concatenate([s.points for s in self.snapshots])
        w = np.concatenate([s.weights / s.weights.sum() / len(self) for s in self.snapshots])
        return DiscreteMeasure(pts, w)


def save_csv(dataset: TemporalDataset, path: str | Path) -> None:
    d = dataset.dim
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(",".join(["time"] + [f"dim_{j}" for j in range(d)]) + "\n")
        for t, snap in zip(dataset.times, dataset.snapshots):
            for row in snap.points:
                fh.write(",".join([repr(float(t))] + [repr(float(v)) for v in row]) + "\n")


def load_csv(path: str | Path, time_column: str = "time", feature_columns: Sequence[str] | None = None) -> TemporalDataset:
    """Group rows by distinct time value; row order is kept within a snapshot."""
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError(f"{path} is empty", "empty") from None
        if time_column not in header:
            raise DataError(f"missing time column {time_column!r}", "schema")
        if feature_columns is None:
            feature_columns = [h for h in header if h != time_column]
        missing = [c for c in feature_columns if c not in header]
        if missing:
            raise DataError(f"missing feature columns {missing}", "schema")
        t_idx = header.index(time_column)
        f_idx = [header.index(c) for c in feature_columns]
        groups: dict[float, list[list[float]]] = {}
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise DataError(f"line {lineno}: expected {len(header)} fields, got {len(row)}", "ragged")
            try:
                t = float(row[t_idx])
                values = [float(row[i]) for i in f_idx]
            except ValueError:
                raise DataError(f"line {lineno}: non-numeric cell", "non_numeric") from None
            groups.setdefault(t, []).append(values)
    if not groups:
        raise DataError(f"{path} has a header but no rows", "empty")
    times = sorted(groups)
    return TemporalDataset(np.array(times), [DiscreteMeasure(np.array(groups[t])) for t in times])


def save_points_csv(points: np.ndarray, path: str | Path) -> None:
    points = np.atleast_2d(points)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(",".join(f"dim_{j}" for j in range(points.shape[1])) + "\n")
        for row in points:
            fh.write(",".join(repr(float(v)) for v in row) + "\n")


def load_points_csv(path: str | Path) -> np.ndarray:
    try:
        arr = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    except ValueError as exc:
        raise DataError(f"{path}: {exc}", "non_numeric") from None
    if arr.size == 0:
        raise DataError(f"{path} has no rows", "empty")
    return arr


def leave_one_out(dataset: TemporalDataset, held_time: float) -> tuple[TemporalDataset, DiscreteMeasure, bool]:
    """Drop one snapshot. The flag is True when the held time lies on the
    boundary of the grid (prediction there is extrapolation)."""
    i = dataset.index_of(held_time)
    keep = [j for j in range(len(dataset)) if j != i]
    train = TemporalDataset(dataset.times[keep], [dataset.snapshots[j] for j in keep], dataset.projection)
    boundary = i == 0 or i == len(dataset) - 1
    if boundary:
        log.warning("held-out time %s is on the boundary: extrapolation", held_time)
    return train, dataset.snapshots[i], boundary


# ---------------------------------------------------------------------------
# Gaussian mixture family


@dataclass
class GMMSpec:
    means: np.ndarray
    cov_scale: float = 0.5
    weights: np.ndarray = field(default_factory=lambda: np.array([0.24, 0.24, 0.23, 0.23, 0.015, 0.015, 0.015, 0.015]))
    mean_jitter: float = 0.2
    cov_jitter: float = 0.05
    weight_jitter: float = 0.01
    samples: int = 3000
    seed: int = 0

    def __post_init__(self):
        self.means = np.atleast_2d(np.asarray(self.means, dtype=float))
        self.weights = np.asarray(self.weights, dtype=float)
        if self.weights.shape != (self.means.shape[0],):
            raise ValueError("one weight per component required")
        if np.any(self.weights < 0) or not np.isclose(self.weights.sum(), 1.0):
            raise ValueError("weights must be nonnegative and sum to 1")
        if not self.cov_scale > 0:
            raise ValueError("covariance scale must be positive")
        if min(self.mean_jitter, self.cov_jitter, self.weight_jitter) < 0 or self.samples < 0:
            raise ValueError("jitter scales and sample count must be nonnegative")

    @property
    def dim(self) -> int:
        return self.means.shape[1]

    @property
    def n_main(self) -> int:
        return 4


def template_means(d: int = 10) -> np.ndarray:
    """Four main modes at +-2 sign patterns, four outliers at +-10 on half
    of the coordinates."""
    if d < 2:
        raise ValueError("template needs d >= 2")
    h = d // 2
    lo, hi = np.r_[np.ones(h), np.zeros(d - h)], np.r_[np.zeros(h), np.ones(d - h)]
    main = [2 * np.ones(d), 2 * (lo - hi), 2 * (hi - lo), -2 * np.ones(d)]
    outliers = [10 * lo, -10 * lo, 10 * hi, -10 * hi]
    return np.array(main + outliers)


def outlier_gmm_spec(d: int = 10, **overrides) -> GMMSpec:
    return GMMSpec(means=template_means(d), **overrides)


def project_simplex(v: np.ndarray) -> np.ndarray:
    """Euclidean projection onto the probability simplex."""
    v = np.asarray(v, dtype=float)
    u = np.sort(v)[::-1]
    css = np.cumsum(u) - 1.0
    k = np.arange(1, v.size + 1)
    rho = np.nonzero(u - css / k > 0)[0][-1]
    theta = css[rho] / (rho + 1.0)
    w = np.maximum(v - theta, 0.0)
    return w / w.sum()


def sample_gmm(means, covs, weights, n: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Draw n points; also returns component labels."""
    labels = rng.choice(len(weights), size=n, p=weights)
    d = means.shape[1]
    pts = np.empty((n, d))
    for k in range(len(weights)):
        idx = np.flatnonzero(labels == k)
        if idx.size:
            chol = np.linalg.cholesky(covs[k])
            pts[idx] = means[k] + rng.standard_normal((idx.size, d)) @ chol.T
    return pts, labels


def perturb_mixture(spec: GMMSpec, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Jittered (means, covariances, weights), projected back to validity."""
    k, d = spec.means.shape
    means = spec.means + spec.mean_jitter * rng.standard_normal((k, d))
    covs = np.empty((k, d, d))
    for j in range(k):
        a = spec.cov_jitter * rng.standard_normal((d, d))
        c = spec.cov_scale * np.eye(d) + 0.5 * (a + a.T)
        vals, vecs = np.linalg.eigh(c)
        covs[j] = (vecs * np.maximum(vals, 1e-3)) @ vecs.T
    weights = project_simplex(spec.weights + spec.weight_jitter * rng.standard_normal(k))
    return means, covs, weights


def simulate_gmm_family(spec: GMMSpec, n_mixtures: int = 10) -> list[DiscreteMeasure]:
    """Perturbed copies of the template mixture, ``spec.samples`` points each."""
    if n_mixtures < 1:
        raise ValueError("n_mixtures must be >= 1")
    rng = np.random.default_rng(spec.seed)
    out = []
    for _ in range(n_mixtures):
        means, covs, weights = perturb_mixture(spec, rng)
        pts, _ = sample_gmm(means, covs, weights, spec.samples, rng)
        out.append(DiscreteMeasure(pts))
    return out


# ---------------------------------------------------------------------------
# Desk-scale temporal benchmark

BENCH_TIMES = np.arange(5.0)
BENCH_STD = 0.5
BENCH_N = 1000


def bench_means(t: float) -> np.ndarray:
    """Component means at time t: both drift by (0, 1) per unit time."""
    return np.array([[-2.0, t], [2.0, t]])


def bench_weight(t: float) -> float:
    """Mass of the left component: 0.8 at t=0 falling linearly to 0.2 at t=4."""
    return 0.8 - 0.15 * t


def synth_temporal_benchmark(seed: int = 0, n: int = BENCH_N) -> TemporalDataset:
    """Five snapshots of a drifting two-component 2-D mixture."""
    rng = np.random.default_rng(seed)
    covs = np.stack([BENCH_STD**2 * np.eye(2)] * 2)
    snaps = []
    for t in BENCH_TIMES:
        w = bench_weight(t)
        pts, _ = sample_gmm(bench_means(t), covs, np.array([w, 1.0 - w]), n, rng)
        snaps.append(DiscreteMeasure(pts))
    return TemporalDataset(BENCH_TIMES.copy(), snaps)


def ring_mixture(n: int, n_modes: int = 8, radius: float = 4.0, std: float = 0.3, seed: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """Gaussian blobs evenly spaced on a circle; returns (points, centers)."""
    rng = np.random.default_rng(seed)
    ang = 2 * np.pi * np.arange(n_modes) / n_modes
    centers = radius * np.c_[np.cos(ang), np.sin(ang)]
    labels = rng.integers(n_modes, size=n)
    return centers[labels] + std * rng.standard_normal((n, 2)), centers
