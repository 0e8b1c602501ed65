"""Per-point trajectories from a chain of adjacent-time transport maps,
DTW distances between them, clustering and PCA back-projection."""
from __future__ import annotations

import csv
import logging
import warnings
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.cluster.hierarchy import cut_tree, linkage
from scipy.spatial.distance import squareform

from .barycenter import FixedPointConfig, interpolate
from .data import TemporalDataset
from .oracle import DiscreteMeasure, as_measure
from .uot import FitDivergedError, MapFitConfig, UOTPair, fit_uot_map
from .weights import frechet_weights

log = logging.getLogger(__name__)

LOCAL_COSTS = ("euclidean", "sq_euclidean")


@dataclass
class Trajectory:
    point_id: int
    times: np.ndarray
    states: np.ndarray

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=float)
        self.states = np.atleast_2d(np.asarray(self.states, dtype=float))
        if self.states.shape[0] != self.times.size:
            raise ValueError("one state per time required")
        if np.any(np.diff(self.times) <= 0):
            raise ValueError("trajectory times must be strictly increasing")

    def __len__(self) -> int:
        return self.times.size


# ---------------------------------------------------------------------------
# Map chains


def fit_chain(snapshots: Sequence[DiscreteMeasure], cfg: MapFitConfig | None = None) -> list[UOTPair]:
    """One UOT map per adjacent pair of measures (tau defaults to 5)."""
    if len(snapshots) < 2:
        raise ValueError("a chain needs at least two time points")
    cfg = cfg or MapFitConfig()
    chain = []
    for k in range(len(snapshots) - 1):
        try:
            chain.append(fit_uot_map(snapshots[k], snapshots[k + 1], replace(cfg, seed=cfg.seed + k)))
        except FitDivergedError as exc:
            raise FitDivergedError(f"pair {k} -> {k + 1}: {exc}", exc.checkpoint) from exc
    return chain


def interpolated_grid(
    dataset: TemporalDataset,
    grid: Sequence[float],
    bandwidth: float,
    tau: float,
    cfg: FixedPointConfig | None = None,
    n_samples: int = 1000,
    kernel_name: str = "gaussian",
) -> list[DiscreteMeasure]:
    """Barycenter estimates on a time grid; observed times are kept as is."""
    out = []
    for i, t in enumerate(grid):
        hit = np.flatnonzero(np.isclose(dataset.times, t, rtol=0, atol=1e-12))
        if hit.size:
            out.append(dataset.snapshots[hit[0]])
            continue
        w = frechet_weights(dataset.times, t, bandwidth, kernel_name)
        model = interpolate(dataset.snapshots, w, tau, cfg)
        out.append(model.sample(n_samples, seed=i))
    return out


def rollout(chain: Sequence[UOTPair], starts, times: Sequence[float] | None = None) -> list[Trajectory]:
    """state_{k+1} = T_k(state_k), one trajectory per start point."""
    starts = as_measure(starts)
    if chain and starts.dim != chain[0].dim:
        raise ValueError(f"start dimension {starts.dim} does not match the chain ({chain[0].dim})")
    times = np.arange(len(chain) + 1, dtype=float) if times is None else np.asarray(times, dtype=float)
    if times.size != len(chain) + 1:
        raise ValueError("need one time per chain node")
    states = [starts.points]
    for pair in chain:
        states.append(pair.transport_np(states[-1]))
    stacked = np.stack(states, axis=1)
    return [Trajectory(i, times, stacked[i]) for i in range(starts.n)]


def endpoints(trajectories: Sequence[Trajectory]) -> np.ndarray:
    return np.array([tr.states[-1] for tr in trajectories])


# ---------------------------------------------------------------------------
# DTW


def _states(a) -> np.ndarray:
    s = a.states if isinstance(a, Trajectory) else np.asarray(a, dtype=float)
    return s[:, None] if s.ndim == 1 else s


def dtw_distance(a, b, local_cost: str = "euclidean") -> float:
    """Classic DTW with steps (1,0), (0,1), (1,1) and no window."""
    if local_cost not in LOCAL_COSTS:
        raise ValueError(f"local_cost must be one of {LOCAL_COSTS}")
    x, y = _states(a), _states(b)
    if len(x) == 0 or len(y) == 0:
        raise ValueError("sequences must be non-empty")
    diff = x[:, None, :] - y[None, :, :]
    cost = np.einsum("ijk,ijk->ij", diff, diff)
    if local_cost == "euclidean":
        cost = np.sqrt(cost)
    n, m = cost.shape
    acc = np.full((n + 1, m + 1), np.inf)
    acc[0, 0] = 0.0
    for i in range(1, n + 1):
        for j in range(1, m + 1):
            acc[i, j] = cost[i - 1, j - 1] + min(acc[i - 1, j - 1], acc[i - 1, j], acc[i, j - 1])
    return float(acc[n, m])


def dtw_matrix(trajectories: Sequence, local_cost: str = "euclidean") -> np.ndarray:
    n = len(trajectories)
    out = np.zeros((n, n))
    for i in range(n):
        for j in range(i + 1, n):
            out[i, j] = out[j, i] = dtw_distance(trajectories[i], trajectories[j], local_cost)
    return out


def cluster(dist: np.ndarray, k: int = 2) -> np.ndarray:
    """Average-linkage clustering cut at exactly k clusters. Labels are
    renumbered in order of first appearance, so index 0 is always in
    cluster 0."""
    dist = np.asarray(dist, dtype=float)
    n = dist.shape[0]
    if dist.shape != (n, n):
        raise ValueError("distance matrix must be square")
    if not np.allclose(dist, dist.T, atol=1e-9):
        raise ValueError("distance matrix must be symmetric")
    if not 1 <= k <= n:
        raise ValueError(f"k must lie in [1, {n}], got {k}")
    if n == 1:
        return np.zeros(1, dtype=int)
    tree = linkage(squareform(dist, checks=False), method="average")
    raw = cut_tree(tree, n_clusters=k)[:, 0]
    relabel: dict[int, int] = {}
    return np.array([relabel.setdefault(int(c), len(relabel)) for c in raw])


# ---------------------------------------------------------------------------
# PCA back-projection


@dataclass
class PCAProjection:
    """Loadings W (p x d) and feature means (p,)."""

    loadings: np.ndarray
    mean: np.ndarray

    def __post_init__(self):
        self.loadings = np.atleast_2d(np.asarray(self.loadings, dtype=float))
        self.mean = np.asarray(self.mean, dtype=float).ravel()
        if self.mean.size != self.loadings.shape[0]:
            raise ValueError("one mean per feature (row of W) required")
        gram = self.loadings.T @ self.loadings
        if not np.allclose(gram, np.eye(gram.shape[0]), atol=1e-6):
            warnings.warn("PCA loadings are not orthonormal within 1e-6", stacklevel=2)

    @property
    def n_features(self) -> int:
        return self.loadings.shape[0]

    @property
    def dim(self) -> int:
        return self.loadings.shape[1]

    def project(self, x: np.ndarray) -> np.ndarray:
        return (np.asarray(x, dtype=float) - self.mean) @ self.loadings

    @classmethod
    def from_csv(cls, loadings_path: str | Path, means_path: str | Path) -> "PCAProjection":
        """Loadings CSV: header dim_0..dim_{d-1}, one row per feature.
        Means CSV: header ``mean``, one row per feature."""
        w = np.loadtxt(loadings_path, delimiter=",", skiprows=1, ndmin=2)
        m = np.loadtxt(means_path, delimiter=",", skiprows=1, ndmin=1)
        return cls(w, m)


def pca_backproject(states, proj: PCAProjection) -> np.ndarray:
    """X_hat = Z W^T + mean."""
    z = np.atleast_2d(np.asarray(getattr(states, "points", states), dtype=float))
    if z.shape[1] != proj.dim:
        raise ValueError(f"state dimension {z.shape[1]} does not match the projection ({proj.dim})")
    return z @ proj.loadings.T + proj.mean


# ---------------------------------------------------------------------------
# CSV


def save_trajectories(trajectories: Sequence[Trajectory], path: str | Path) -> None:
    """Long format: point_id,time,dim_0..dim_{d-1}."""
    d = trajectories[0].states.shape[1] if trajectories else 0
    with open(path, "w", encoding="utf-8", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(["point_id", "time"] + [f"dim_{j}" for j in range(d)])
        for tr in trajectories:
            for t, s in zip(tr.times, tr.states):
                wr.writerow([tr.point_id, repr(float(t))] + [repr(float(v)) for v in s])


def load_trajectories(path: str | Path) -> list[Trajectory]:
    groups: dict[int, list[list[float]]] = {}
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        next(reader)
        for row in reader:
            if row:
                groups.setdefault(int(row[0]), []).append([float(v) for v in row[1:]])
    out = []
    for pid, rows in groups.items():
        arr = np.array(rows)
        out.append(Trajectory(pid, arr[:, 0], arr[:, 1:]))
    return out


def save_labels(point_ids: Sequence[int], labels: Sequence[int], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(["point_id", "cluster"])
        for pid, lab in zip(point_ids, labels):
            wr.writerow([int(pid), int(lab)])
