"""Discrete OT / UOT on weighted point clouds.

Exact balanced transport goes through POT's network simplex. The unbalanced
problem (hard source marginal, ``tau * KL`` on the target marginal) is solved
with log-domain Sinkhorn scaling.
"""
from __future__ import annotations

import logging
import os
from dataclasses import dataclass, field
from typing import NamedTuple, Sequence

import numpy as np

for _backend in ("TENSORFLOW", "JAX", "PYTORCH", "CUPY"):
    os.environ.setdefault(f"POT_BACKEND_DISABLE_{_backend}", "1")
import ot  # noqa: E402

log = logging.getLogger(__name__)

MAX_PLAN_ENTRIES = 10**7


@dataclass
class DiscreteMeasure:
    """Weighted point cloud. Weights default to uniform.

    ``normalized=False`` marks intermediate objects whose total mass is not 1.
    """

    points: np.ndarray
    weights: np.ndarray | None = None
    normalized: bool = True

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64)
        if pts.ndim == 1:
            pts = pts[:, None]
        if pts.ndim != 2:
            raise ValueError(f"points must be n x d, got shape {pts.shape}")
        if not np.all(np.isfinite(pts)):
            raise ValueError("points contain NaN or Inf")
        self.points = pts
        n = pts.shape[0]
        if self.weights is None:
            self.weights = np.full(n, 1.0 / n) if n else np.zeros(0)
        else:
            w = np.asarray(self.weights, dtype=np.float64).ravel()
            if w.shape != (n,):
                raise ValueError(f"{w.size} weights for {n} points")
            if np.any(w < 0) or not np.all(np.isfinite(w)):
                raise ValueError("weights must be finite and nonnegative")
            if self.normalized and n:
                w = w / w.sum()
            self.weights = w

    @property
    def n(self) -> int:
        return self.points.shape[0]

    @property
    def dim(self) -> int:
        return self.points.shape[1]

    def __len__(self) -> int:
        return self.n

    def sample(self, size: int, rng: np.random.Generator) -> np.ndarray:
        """Draws with replacement according to the weights."""
        idx = rng.choice(self.n, size=size, p=self.weights / self.weights.sum())
        return self.points[idx]

    def subsample(self, size: int, rng: np.random.Generator) -> "DiscreteMeasure":
        """Uniform subsample without replacement (or a copy if small enough)."""
        if size >= self.n:
            return DiscreteMeasure(self.points.copy(), self.weights.copy())
        idx = rng.choice(self.n, size=size, replace=False)
        return DiscreteMeasure(self.points[idx], self.weights[idx])

    def mean(self) -> np.ndarray:
        w = self.weights / self.weights.sum()
        return w @ self.points

    def shifted(self, v) -> "DiscreteMeasure":
        return DiscreteMeasure(self.points + np.asarray(v, dtype=float), self.weights.copy())


def as_measure(x) -> DiscreteMeasure:
    return x if isinstance(x, DiscreteMeasure) else DiscreteMeasure(x)


def sq_cost(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Pairwise 0.5 * ||x - y||^2."""
    d = x[:, None, :] - y[None, :, :]
    return 0.5 * np.einsum("ijk,ijk->ij", d, d)


def euclid_cost(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    return np.sqrt(2.0 * sq_cost(x, y))


def _check_pair(a: DiscreteMeasure, b: DiscreteMeasure) -> None:
    if a.n == 0 or b.n == 0:
        raise ValueError("measures must be non-empty")
    if a.dim != b.dim:
        raise ValueError(f"dimension mismatch: {a.dim} vs {b.dim}")
    if a.n * b.n > MAX_PLAN_ENTRIES:
        raise ValueError(f"plan of {a.n} x {b.n} exceeds the size guard {MAX_PLAN_ENTRIES}")


def _lp(a: DiscreteMeasure, b: DiscreteMeasure, cost: np.ndarray) -> tuple[float, np.ndarray]:
    wa = a.weights / a.weights.sum()
    wb = b.weights / b.weights.sum()
    plan = ot.emd(wa, wb, np.ascontiguousarray(cost), numItermax=10_000_000)
    return float(np.sum(plan * cost)), plan


def exact_ot(a, b) -> tuple[float, np.ndarray]:
    """Balanced OT under 0.5 * ||x - y||^2; returns (W2^2 value, plan)."""
    a, b = as_measure(a), as_measure(b)
    _check_pair(a, b)
    return _lp(a, b, sq_cost(a.points, b.points))


def emd(a, b) -> float:
    """Earth mover's (W1) distance with Euclidean ground cost."""
    a, b = as_measure(a), as_measure(b)
    _check_pair(a, b)
    return _lp(a, b, euclid_cost(a.points, b.points))[0]


def w2(a, b) -> float:
    value, _ = exact_ot(a, b)
    return float(np.sqrt(max(2.0 * value, 0.0)))


# ---------------------------------------------------------------------------
# Unbalanced Sinkhorn


class UOTSolution(NamedTuple):
    value: float
    """Plan cost + tau * KL(target marginal || b), entropic term removed."""
    plan: np.ndarray
    objective: float
    """Full regularized primal objective (includes eps * KL(plan || a x b))."""
    converged: bool
    n_iter: int
    g: np.ndarray


def _gen_kl(p: np.ndarray, q: np.ndarray) -> float:
    """Generalized KL sum(p log(p/q) - p + q) with 0 log 0 = 0."""
    pos = p > 0
    return float(np.sum(p[pos] * np.log(p[pos] / q[pos])) - p.sum() + q.sum())


def _uot_terms(plan, cost, wa, wb, tau, eps) -> tuple[float, float]:
    col = plan.sum(axis=0)
    value = float(np.sum(plan * cost))
    if np.isfinite(tau):
        value += tau * _gen_kl(col, wb)
    reg = eps * _gen_kl(plan, np.outer(wa, wb))
    return value, value + reg


def sinkhorn_uot(
    a,
    b,
    tau: float,
    epsilon: float = 1e-2,
    max_iter: int = 100_000,
    tol: float = 1e-11,
    init_g: np.ndarray | None = None,
) -> UOTSolution:
    """One-sided unbalanced OT with entropic smoothing.

    Minimizes ``<C, P> + tau * KL(P^T 1 || b) + eps * KL(P || a b^T)`` subject
    to ``P 1 = a``. ``tau = inf`` gives balanced entropic OT. Iterates until
    the change in the column potential falls below ``tol`` (in cost units);
    the last update is always the row projection so the source marginal is
    exact.
    """
    a, b = as_measure(a), as_measure(b)
    _check_pair(a, b)
    if not tau > 0 or not epsilon > 0:
        raise ValueError("tau and epsilon must be positive")
    wa = a.weights / a.weights.sum()
    wb = b.weights / b.weights.sum()
    cost = sq_cost(a.points, b.points)
    log_a = np.log(wa)
    log_b = np.log(wb)
    # epsilon scaling: warm-start the target epsilon from a coarse one
    g = np.zeros(b.n) if init_g is None else np.asarray(init_g, dtype=float).copy()
    stages = [epsilon] if init_g is not None else _eps_schedule(float(cost.max()), epsilon)
    it = 0
    converged = False
    for eps in stages:
        final = eps == stages[-1]
        g, n, converged, delta = _sinkhorn_loop(
            g, cost, log_a, log_b, tau, eps, tol if final else max(tol, 1e-3 * eps), max_iter if final else 1000
        )
        it += n
    f = _row_update(g, -cost / epsilon, log_b, epsilon)
    plan = np.exp((f[:, None] + g[None, :] - cost) / epsilon + log_a[:, None] + log_b[None, :])
    if not converged:
        log.warning("sinkhorn_uot stopped after %d iterations (delta=%.3g)", it, delta)
    value, objective = _uot_terms(plan, cost, wa, wb, tau, epsilon)
    return UOTSolution(value, plan, objective, converged, it, g)


def _lse(x: np.ndarray, axis: int) -> np.ndarray:
    m = x.max(axis=axis, keepdims=True)
    return np.squeeze(m, axis) + np.log(np.exp(x - m).sum(axis=axis))


def _row_update(g, neg_cost_eps, log_b, eps):
    return -eps * _lse(neg_cost_eps + (g / eps + log_b)[None, :], axis=1)


def _eps_schedule(scale: float, epsilon: float) -> list[float]:
    out = [epsilon]
    while out[-1] < scale:
        out.append(out[-1] * 4.0)
    return out[::-1]


def _sinkhorn_loop(g, cost, log_a, log_b, tau, eps, tol, max_iter):
    k = -cost / eps
    scale = tau / (tau + eps) if np.isfinite(tau) else 1.0
    delta = np.inf
    for it in range(1, max_iter + 1):
        f = _row_update(g, k, log_b, eps)
        g_new = -scale * eps * _lse(k + (f / eps + log_a)[:, None], axis=0)
        if np.isfinite(tau):
            # the dual is exactly maximized over (f - c, g + c) at this c
            g_new += tau * _lse(log_b - g_new / tau, axis=0)
        delta = float(np.max(np.abs(g_new - g)))
        g = g_new
        if delta < tol:
            return g, it, True, delta
    return g, max_iter, False, delta


def barycentric_projection(plan: np.ndarray, targets: np.ndarray, sources: np.ndarray) -> tuple[np.ndarray, int]:
    """Conditional-mean map x -> sum_y P(x, y) y / sum_y P(x, y).

    Rows without transported mass keep their source position; the number of
    such rows is returned alongside.
    """
    mass = plan.sum(axis=1)
    held = mass <= 1e-300
    safe = np.where(held, 1.0, mass)
    out = (plan @ targets) / safe[:, None]
    out[held] = sources[held]
    return out, int(held.sum())


@dataclass
class FixedPointTrace:
    measures: list[DiscreteMeasure] = field(default_factory=list)
    objective: list[float] = field(default_factory=list)
    """Regularized V (the quantity each iteration provably does not increase)."""
    value: list[float] = field(default_factory=list)
    """Unregularized V, entropic term removed."""
    held_points: int = 0


def discrete_fixed_point_barycenter(
    snapshots: Sequence[DiscreteMeasure],
    alphas: Sequence[float],
    tau: float,
    iters: int,
    init: DiscreteMeasure | None = None,
    epsilon: float = 5e-2,
    tol: float = 1e-12,
) -> FixedPointTrace:
    """Iterate mu <- (sum_i alpha_i T_i)_# mu with T_i the barycentric
    projections of the UOT plans from mu to each snapshot.

    The support moves, the weights of ``mu`` stay put. ``trace.objective``
    has ``iters + 1`` entries: V at the start and after every move.
    """
    snapshots = [as_measure(s) for s in snapshots]
    alphas = np.asarray(alphas, dtype=float)
    if alphas.shape != (len(snapshots),):
        raise ValueError("one weight per snapshot required")
    mu = as_measure(init) if init is not None else snapshots[int(np.argmax(alphas))]
    if mu.n > 200:
        raise ValueError("support of the initial measure must be <= 200 points")
    mu = DiscreteMeasure(mu.points.copy(), mu.weights.copy())
    trace = FixedPointTrace()
    warm = [None] * len(snapshots)
    for k in range(iters + 1):
        sols = []
        for i, nu in enumerate(snapshots):
            sol = sinkhorn_uot(mu, nu, tau, epsilon=epsilon, tol=tol, init_g=warm[i])
            warm[i] = sol.g
            sols.append(sol)
        trace.measures.append(mu)
        trace.objective.append(float(sum(al * s.objective for al, s in zip(alphas, sols))))
        trace.value.append(float(sum(al * s.value for al, s in zip(alphas, sols))))
        if k == iters:
            break
        moved = np.zeros_like(mu.points)
        for al, s, nu in zip(alphas, sols, snapshots):
            proj, held = barycentric_projection(s.plan, nu.points, mu.points)
            trace.held_points += held
            moved += al * proj
        mu = DiscreteMeasure(moved, mu.weights.copy())
    return trace


def plan_to_csv(plan: np.ndarray, path) -> None:
    rows, cols = np.nonzero(plan > 0)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("source,target,mass\n")
        for i, j in zip(rows, cols):
            fh.write(f"{i},{j},{float(plan[i, j])!r}\n")
