"""Neural fixed-point solver for the weighted unbalanced barycenter.

A generator G pushes N(0, I) forward to the current measure mu. Each epoch
trains one map/potential pair per active snapshot against samples of mu,
then regresses G onto the average map applied to a frozen copy of itself.
"""
from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .autodiff import MLP, Adam, MLPSpec, NonFiniteError, Tensor, seed_streams
from .oracle import DiscreteMeasure, as_measure
from .uot import UOTPair, estimate_uot_distance
from .weights import FrechetWeights

log = logging.getLogger(__name__)


@dataclass
class FixedPointConfig:
    K_G: int = 50
    K_T: int = 10
    K_v: int = 50
    batch_G: int = 128
    batch_T: int = 64
    epochs: int = 25
    regression_loss: str = "mse"
    lr_G: float = 1e-4
    lr_T: float = 3e-4
    lr_v: float = 3e-4
    weight_decay_G: float = 1e-8
    weight_decay_T: float = 1e-10
    widths_T: tuple[int, ...] = (196, 196, 196, 196)
    widths_G: tuple[int, ...] = (256, 256, 256, 256)
    activation: str = "relu"
    latent_dim: int | None = None
    tol: float = 1e-3
    standardize: bool = True
    init_steps: int = 500
    n_eval: int = 1024
    seed: int = 0

    def __post_init__(self):
        for name in ("K_G", "K_T", "K_v", "batch_G", "batch_T", "epochs"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.regression_loss != "mse":
            raise ValueError("only the 'mse' regression loss is implemented")


@dataclass
class Standardizer:
    """Shift by the pooled mean and divide by one pooled scale.

    A single scale keeps the quadratic cost isotropic, so an unbalanced
    problem with tolerance tau maps exactly onto tau / scale**2.
    """

    mean: np.ndarray
    scale: float

    @classmethod
    def fit(cls, snapshots: Sequence[DiscreteMeasure]) -> "Standardizer":
        pts = np.concatenate([s.points for s in snapshots])
        mean = pts.mean(axis=0)
        scale = float(np.sqrt(np.mean(np.var(pts, axis=0))))
        return cls(mean, scale if scale > 0 else 1.0)

    @classmethod
    def identity(cls, dim: int) -> "Standardizer":
        return cls(np.zeros(dim), 1.0)

    def forward(self, x: np.ndarray) -> np.ndarray:
        return (x - self.mean) / self.scale

    def inverse(self, x: np.ndarray) -> np.ndarray:
        return x * self.scale + self.mean

    def tau(self, tau: float) -> float:
        return tau / self.scale**2


@dataclass
class ObjectiveTrace:
    V: list[float] = field(default_factory=list)
    regression: list[float] = field(default_factory=list)
    wall_time: list[float] = field(default_factory=list)


class BarycenterDivergedError(NonFiniteError):
    def __init__(self, message: str, best: dict | None = None):
        super().__init__(message)
        self.best = best


class BarycenterProblem:
    """Snapshots, weights, generator and one UOT pair per active snapshot,
    all in standardized coordinates."""

    def __init__(
        self,
        snapshots: Sequence[DiscreteMeasure],
        weights: FrechetWeights | Sequence[float],
        tau: float,
        cfg: FixedPointConfig | None = None,
        generator: MLP | None = None,
        standardizer: Standardizer | None = None,
    ):
        self.cfg = cfg = cfg or FixedPointConfig()
        snapshots = [as_measure(s) for s in snapshots]
        alphas = weights.normalized if isinstance(weights, FrechetWeights) else np.asarray(weights, float)
        if alphas.shape != (len(snapshots),):
            raise ValueError("one weight per snapshot required")
        if np.any(alphas < 0) or not math.isclose(alphas.sum(), 1.0, abs_tol=1e-9):
            raise ValueError("weights must be nonnegative and sum to 1")
        dims = {s.dim for s in snapshots}
        if len(dims) != 1:
            raise ValueError(f"snapshots have mixed dimensions {dims}")
        self.dim = dims.pop()
        self.tau = tau
        self.active = np.flatnonzero(alphas > 0)
        self.alphas = alphas[self.active]
        if standardizer is None:
            standardizer = Standardizer.fit(snapshots) if cfg.standardize else Standardizer.identity(self.dim)
        self.standardizer = standardizer
        self.snapshots = [
            DiscreteMeasure(standardizer.forward(snapshots[i].points), snapshots[i].weights) for i in self.active
        ]
        self.latent_dim = cfg.latent_dim or self.dim
        streams = seed_streams(cfg.seed, len(self.active) + 2)
        self.rng = streams[0]
        self.pair_rngs = streams[2:]
        tau_std = standardizer.tau(tau)
        self.pairs = [
            UOTPair(
                self.dim,
                tau_std,
                cfg.widths_T,
                cfg.activation,
                0,
                r,
                cfg.lr_T,
                cfg.lr_v,
                cfg.weight_decay_T,
            )
            for r in self.pair_rngs
        ]
        if generator is None:
            generator = MLP(MLPSpec(self.latent_dim, cfg.widths_G, self.dim, cfg.activation), streams[1])
            init_generator_gaussian(generator, cfg.init_steps, cfg.batch_G, cfg.lr_G * 10, streams[1])
        if generator.spec.output_dim != self.dim or generator.spec.input_dim != self.latent_dim:
            raise ValueError("generator must map latent_dim -> data dim")
        self.generator = generator
        self.gen_opt = Adam(generator.params, cfg.lr_G, cfg.weight_decay_G)

    def latent(self, n: int, rng: np.random.Generator | None = None) -> np.ndarray:
        return (rng or self.rng).standard_normal((n, self.latent_dim))

    def generate(self, n: int, rng: np.random.Generator | None = None) -> np.ndarray:
        """Samples of the current mu in standardized coordinates."""
        return self.generator.predict(self.latent(n, rng))


def init_generator_gaussian(generator: MLP, steps: int, batch: int, lr: float, rng: np.random.Generator) -> None:
    """Regress G(z) onto the leading coordinates of z so that G_# N(0, I)
    starts out as a standard Gaussian (zero-padded if latent < data dim)."""
    d_out, d_in = generator.spec.output_dim, generator.spec.input_dim
    opt = Adam(generator.params, lr)
    for _ in range(steps):
        z = rng.standard_normal((batch, d_in))
        target = np.zeros((batch, d_out))
        k = min(d_in, d_out)
        target[:, :k] = z[:, :k]
        diff = generator(z) - target
        opt.minimize((diff * diff).sum(axis=1).mean())


def average_map_apply(problem: BarycenterProblem, z_batch: np.ndarray, frozen: MLP | None = None) -> np.ndarray:
    """sum_i alpha_i T_i(G0(z)) with G0 a frozen generator copy."""
    if not all(p.trained for p in problem.pairs):
        raise RuntimeError("average map needs trained pairs")
    x = (frozen or problem.generator).predict(z_batch)
    out = np.zeros_like(x)
    for al, pair in zip(problem.alphas, problem.pairs):
        out += al * pair.transport_np(x)
    return out


def generator_regression_step(problem: BarycenterProblem, cfg: FixedPointConfig | None = None) -> list[float]:
    """K_G Adam steps on mean ||G(z) - avg_map(G0(z))||^2 with G0 frozen at
    the start of the call."""
    cfg = cfg or problem.cfg
    frozen = problem.generator.copy()
    losses = []
    for _ in range(cfg.K_G):
        z = problem.latent(cfg.batch_G)
        target = average_map_apply(problem, z, frozen)
        diff = problem.generator(z) - Tensor(target)
        losses.append(problem.gen_opt.minimize((diff * diff).sum(axis=1).mean()))
    return losses


def update_pairs(problem: BarycenterProblem, cfg: FixedPointConfig | None = None) -> None:
    """K_v rounds of (K_T map steps, one potential step) for every pair."""
    cfg = cfg or problem.cfg
    for _ in range(cfg.K_v):
        for _ in range(cfg.K_T):
            x = problem.generate(cfg.batch_T)
            for pair in problem.pairs:
                pair.map_step(x)
        x = problem.generate(cfg.batch_T)
        for pair, nu, r in zip(problem.pairs, problem.snapshots, problem.pair_rngs):
            pair.potential_step(x, nu.sample(cfg.batch_T, r))
    for pair in problem.pairs:
        pair.trained = True


def estimate_objective_V(problem: BarycenterProblem, n_samples: int = 1024, seed: int = 0) -> float:
    """sum_i alpha_i * semi-dual UOT estimate, in original units."""
    rng = np.random.default_rng(seed)
    x = problem.generate(n_samples, rng)
    total = 0.0
    for al, pair, nu in zip(problem.alphas, problem.pairs, problem.snapshots):
        sub = nu.subsample(n_samples, rng)
        total += al * estimate_uot_distance(pair, DiscreteMeasure(x), sub, n_samples=None)
    return total * problem.standardizer.scale**2


@dataclass
class BarycenterModel:
    generator: MLP
    standardizer: Standardizer
    latent_dim: int
    pairs: list[UOTPair]
    alphas: np.ndarray
    tau: float
    trace: ObjectiveTrace
    converged: bool = False

    def sample(self, n: int, seed: int = 0) -> DiscreteMeasure:
        return sample_barycenter(self, n, seed)


def fixed_point_fit(problem: BarycenterProblem, cfg: FixedPointConfig | None = None) -> BarycenterModel:
    """Alternate pair updates and generator regression for ``cfg.epochs``
    epochs or until the mean regression loss of an epoch drops below
    ``cfg.tol``."""
    cfg = cfg or problem.cfg
    trace = ObjectiveTrace()
    best: dict | None = None
    converged = False
    start = time.perf_counter()
    for epoch in range(cfg.epochs):
        try:
            update_pairs(problem, cfg)
            losses = generator_regression_step(problem, cfg)
            V = estimate_objective_V(problem, cfg.n_eval, seed=cfg.seed + epoch)
        except NonFiniteError as exc:
            raise BarycenterDivergedError(f"fixed point diverged in epoch {epoch}: {exc}", best) from exc
        if not np.isfinite(V):
            raise BarycenterDivergedError(f"non-finite objective in epoch {epoch}", best)
        trace.V.append(V)
        trace.regression.append(float(np.mean(losses)))
        trace.wall_time.append(time.perf_counter() - start)
        if best is None or V < best["V"]:
            best = {"V": V, "epoch": epoch, "generator": problem.generator.get_flat()}
        log.info("epoch %d: V=%.5g regression=%.3g", epoch, V, trace.regression[-1])
        if trace.regression[-1] < cfg.tol:
            converged = True
            break
    return BarycenterModel(
        problem.generator,
        problem.standardizer,
        problem.latent_dim,
        problem.pairs,
        problem.alphas,
        problem.tau,
        trace,
        converged,
    )


def sample_barycenter(model: BarycenterModel, n: int, seed: int = 0) -> DiscreteMeasure:
    """n draws z ~ N(0, I) pushed through the generator, in original units."""
    if n == 0:
        return DiscreteMeasure(np.zeros((0, model.generator.spec.output_dim)))
    z = np.random.default_rng(seed).standard_normal((n, model.latent_dim))
    return DiscreteMeasure(model.standardizer.inverse(model.generator.predict(z)))


def interpolate(
    snapshots: Sequence[DiscreteMeasure],
    weights: FrechetWeights | Sequence[float],
    tau: float,
    cfg: FixedPointConfig | None = None,
    generator: MLP | None = None,
    standardizer: Standardizer | None = None,
) -> BarycenterModel:
    """Build the problem and run the fixed point in one call."""
    problem = BarycenterProblem(snapshots, weights, tau, cfg, generator, standardizer)
    return fixed_point_fit(problem)
