"""Local-linear kernel weights over snapshot times."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

KERNELS = ("gaussian", "epanechnikov")


class DegenerateDesignError(ValueError):
    """The kernel-weighted design has (numerically) zero variance."""


def kernel(u: np.ndarray, name: str = "gaussian") -> np.ndarray:
    u = np.asarray(u, dtype=float)
    if name == "gaussian":
        return np.exp(-0.5 * u * u) / np.sqrt(2.0 * np.pi)
    if name == "epanechnikov":
        return np.where(np.abs(u) <= 1.0, 0.75 * (1.0 - u * u), 0.0)
    raise ValueError(f"unknown kernel {name!r}; choose from {KERNELS}")


def check_grid(times) -> np.ndarray:
    times = np.asarray(times, dtype=float).ravel()
    if times.size < 1:
        raise ValueError("time grid is empty")
    if np.any(np.diff(times) <= 0):
        raise ValueError("time grid must be strictly increasing")
    return times


def _log_kernel(v: np.ndarray, name: str) -> np.ndarray:
    if name == "gaussian":
        return -0.5 * v * v
    if name == "epanechnikov":
        with np.errstate(divide="ignore"):
            return np.where(np.abs(v) < 1.0, np.log(np.clip(1.0 - v * v, 0.0, None)), -np.inf)
    raise ValueError(f"unknown kernel {name!r}; choose from {KERNELS}")


def local_linear_weights(times, t: float, h: float, kernel_name: str = "gaussian") -> np.ndarray:
    """Raw local-linear weights s_i(t, h); may be negative near the boundary.

    s_i is invariant to rescaling the kernel and the time axis, so it is
    computed from v = (t_i - t) / h and kernel values divided by their max.
    If every kernel value but one underflows, the h -> 0 limit is returned:
    linear interpolation between the two snapshots nearest to t.
    """
    if not h > 0:
        raise ValueError(f"bandwidth must be positive, got {h}")
    times = check_grid(times)
    v = (times - t) / h
    logk = _log_kernel(v, kernel_name)
    n = times.size
    if n < 2 or np.sum(np.isfinite(logk)) < 2:
        raise DegenerateDesignError(f"local-linear design at t={t}, h={h} needs two snapshots with kernel mass")
    k = np.exp(logk - logk.max())
    dv = v[:, None] - v[None, :]
    sigma2 = 0.5 * np.sum(k[:, None] * k[None, :] * dv * dv) / n**2
    if sigma2 > 1e-280:
        # mu2 - mu1 * v_i written without cancellation
        centred = ((k * v)[None, :] * (v[None, :] - v[:, None])).sum(axis=1) / n
        return k * centred / sigma2
    i, j = np.argsort(-logk, kind="stable")[:2]
    out = np.zeros(n)
    out[i] = v[j] / (v[j] - v[i])
    out[j] = -v[i] / (v[j] - v[i])
    return out


@dataclass
class FrechetWeights:
    raw: np.ndarray
    normalized: np.ndarray
    pruned: np.ndarray
    bandwidth: float | None = None
    t: float | None = None

    @property
    def active(self) -> np.ndarray:
        return np.flatnonzero(self.normalized > 0)

    def to_dict(self) -> dict:
        return {
            "t": self.t,
            "bandwidth": self.bandwidth,
            "raw": self.raw.tolist(),
            "normalized": self.normalized.tolist(),
            "pruned": self.pruned.tolist(),
            "negative_policy": "clamp",
        }


def normalize_weights(raw, prune_threshold: float = 0.0) -> FrechetWeights:
    """Clamp negatives to zero, drop entries below ``prune_threshold`` after a
    first normalization, renormalize."""
    raw = np.asarray(raw, dtype=float).ravel()
    w = np.clip(raw, 0.0, None)
    if not w.sum() > 0:
        raise ValueError("all weights are non-positive")
    w = w / w.sum()
    pruned = (w < prune_threshold) & (w > 0)
    w = np.where(pruned | (w <= 0), 0.0, w)
    if not w.sum() > 0:
        raise ValueError(f"no weight survives the prune threshold {prune_threshold}")
    return FrechetWeights(raw=raw, normalized=w / w.sum(), pruned=pruned)


def frechet_weights(
    times,
    t: float,
    h: float,
    kernel_name: str = "gaussian",
    prune_threshold: float = 0.01,
    prune_min_snapshots: int = 8,
) -> FrechetWeights:
    """Barycenter weights alpha_i(t). Pruning only applies to grids with more
    than ``prune_min_snapshots`` time points."""
    times = check_grid(times)
    raw = local_linear_weights(times, t, h, kernel_name)
    threshold = prune_threshold if times.size > prune_min_snapshots else 0.0
    out = normalize_weights(raw, threshold)
    out.bandwidth = h
    out.t = t
    return out
