"""Neural semi-dual unbalanced OT: a transport map network against a
potential network, with the KL conjugate on the relaxed target side."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .autodiff import MLP, Adam, MLPSpec, NonFiniteError, Tensor, as_tensor, concat
from .oracle import as_measure

log = logging.getLogger(__name__)

EXP_CLAMP = 30.0
DIVERGENCES = ("kl",)  # extension point: other Csiszar divergences go here


def quadratic_cost(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Row-wise 0.5 * ||x - y||^2."""
    d = np.asarray(x, dtype=float) - np.asarray(y, dtype=float)
    return 0.5 * np.sum(d * d, axis=-1)


def psi_conj(s, tau: float):
    """Scaled KL conjugate tau * (exp(s / tau) - 1); ``tau = inf`` is the
    balanced limit psi*(s) = s. Works on floats and numpy arrays."""
    if not tau > 0:
        raise ValueError(f"tau must be positive, got {tau}")
    if math.isinf(tau):
        return s
    return tau * np.expm1(np.minimum(np.asarray(s, dtype=float) / tau, EXP_CLAMP))


@dataclass
class KLConjugate:
    """psi*_tau with a counter of overflow-guard activations."""

    tau: float
    divergence: str = "kl"
    clamp_events: int = 0

    def __post_init__(self):
        if not self.tau > 0:
            raise ValueError(f"tau must be positive, got {self.tau}")
        if self.divergence not in DIVERGENCES:
            raise ValueError(f"unsupported divergence {self.divergence!r}")

    @property
    def balanced(self) -> bool:
        return math.isinf(self.tau)

    def __call__(self, s: Tensor) -> Tensor:
        if self.balanced:
            return s
        scaled = s * (1.0 / self.tau)
        hits = int(np.sum(scaled.data > EXP_CLAMP))
        if hits:
            self.clamp_events += hits
        return (scaled.clamp_max(EXP_CLAMP).exp() - 1.0) * self.tau

    def numpy(self, s: np.ndarray) -> np.ndarray:
        return psi_conj(s, self.tau)


@dataclass
class MapFitConfig:
    tau: float = 5.0
    K_v: int = 500
    K_T: int = 100
    batch: int = 128
    lr_map: float = 3e-4
    lr_potential: float = 3e-4
    weight_decay: float = 1e-10
    widths: tuple[int, ...] = (196, 196, 196, 196)
    activation: str = "relu"
    aux_dim: int = 0
    seed: int = 0


class UOTPair:
    """Map network T(x, s) and potential network v(y) for one target.

    The map is residual, T(x, s) = x + net(x, s). Both nets start with a
    zeroed output layer: T is the identity and v vanishes.
    """

    def __init__(
        self,
        dim: int,
        tau: float,
        widths=(196, 196, 196, 196),
        activation: str = "relu",
        aux_dim: int = 0,
        rng: np.random.Generator | int | None = None,
        lr_map: float = 3e-4,
        lr_potential: float = 3e-4,
        weight_decay: float = 1e-10,
        map_net: MLP | None = None,
        potential_net: MLP | None = None,
    ):
        rng = np.random.default_rng(rng)
        self.dim = dim
        self.aux_dim = aux_dim
        self.conjugate = KLConjugate(tau)
        self.map_net = map_net or MLP(MLPSpec(dim + aux_dim, tuple(widths), dim, activation), rng)
        if map_net is None:
            self.map_net.zero_output_layer()
        self.potential_net = potential_net or MLP(MLPSpec(dim, tuple(widths), 1, activation), rng)
        if potential_net is None:
            # v = 0 at start keeps exp(-v / tau) bounded on the first steps
            self.potential_net.zero_output_layer()
        if self.map_net.spec.input_dim != dim + aux_dim or self.map_net.spec.output_dim != dim:
            raise ValueError("map network must be (d + aux_dim) -> d")
        if self.potential_net.spec.input_dim != dim or self.potential_net.spec.output_dim != 1:
            raise ValueError("potential network must be d -> 1")
        self.map_opt = Adam(self.map_net.params, lr_map, weight_decay)
        self.potential_opt = Adam(self.potential_net.params, lr_potential, weight_decay)
        self.trace: dict[str, list[float]] = {"map": [], "potential": []}
        self.trained = False

    @property
    def tau(self) -> float:
        return self.conjugate.tau

    def transport(self, x, s=None) -> Tensor:
        x = as_tensor(x)
        inp = x if self.aux_dim == 0 else concat([x, as_tensor(s)], axis=1)
        return x + self.map_net(inp)

    def transport_np(self, x: np.ndarray, s: np.ndarray | None = None) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        inp = x if self.aux_dim == 0 else np.concatenate([x, s], axis=1)
        return x + self.map_net.predict(inp)

    def potential(self, y) -> Tensor:
        return self.potential_net(y)

    def potential_np(self, y: np.ndarray) -> np.ndarray:
        return self.potential_net.predict(y)[:, 0]

    def aux(self, n: int, rng: np.random.Generator) -> np.ndarray | None:
        return rng.standard_normal((n, self.aux_dim)) if self.aux_dim else None

    # -- training steps ------------------------------------------------------
    def map_step(self, x: np.ndarray, s=None) -> float:
        value = self.map_opt.minimize(loss_map(self, x, s))
        self.trace["map"].append(value)
        return value

    def potential_step(self, x: np.ndarray, y: np.ndarray, s=None) -> float:
        value = self.potential_opt.minimize(loss_potential(self, x, s, y))
        self.trace["potential"].append(value)
        return value


def loss_map(pair: UOTPair, x_batch, s_batch=None) -> Tensor:
    """mean_x [0.5 ||x - T(x, s)||^2 - v(T(x, s))]."""
    x = as_tensor(x_batch)
    t = pair.transport(x, s_batch)
    diff = x - t
    cost = (diff * diff).sum(axis=1) * 0.5
    return (cost - pair.potential(t)[:, 0]).mean()


def loss_potential(pair: UOTPair, x_batch, s_batch, y_batch) -> Tensor:
    """mean_x v(T(x, s)) + mean_y psi*_tau(-v(y)); no gradient reaches T."""
    t = Tensor(pair.transport_np(np.asarray(x_batch, dtype=float), s_batch))
    v_t = pair.potential(t)[:, 0]
    v_y = pair.potential(as_tensor(y_batch))[:, 0]
    return v_t.mean() + pair.conjugate(-v_y).mean()


class FitDivergedError(NonFiniteError):
    def __init__(self, message: str, checkpoint: dict | None = None):
        super().__init__(message)
        self.checkpoint = checkpoint


def _snapshot(pair: UOTPair) -> dict:
    return {"map": pair.map_net.get_flat(), "potential": pair.potential_net.get_flat()}


def fit_uot_map(source, target, cfg: MapFitConfig | None = None, pair: UOTPair | None = None) -> UOTPair:
    """Train a map from ``source`` to ``target``: per outer iteration, ``K_T``
    map steps then one potential step, for ``K_v`` iterations."""
    cfg = cfg or MapFitConfig()
    source, target = as_measure(source), as_measure(target)
    if source.n == 0 or target.n == 0:
        raise ValueError("measures must be non-empty")
    if source.dim != target.dim:
        raise ValueError(f"dimension mismatch: {source.dim} vs {target.dim}")
    rng = np.random.default_rng(cfg.seed)
    if pair is None:
        pair = UOTPair(
            source.dim,
            cfg.tau,
            cfg.widths,
            cfg.activation,
            cfg.aux_dim,
            rng,
            cfg.lr_map,
            cfg.lr_potential,
            cfg.weight_decay,
        )
    last_good = _snapshot(pair)
    for k in range(cfg.K_v):
        try:
            for _ in range(cfg.K_T):
                x = source.sample(cfg.batch, rng)
                pair.map_step(x, pair.aux(cfg.batch, rng))
            x = source.sample(cfg.batch, rng)
            y = target.sample(cfg.batch, rng)
            pair.potential_step(x, y, pair.aux(cfg.batch, rng))
        except NonFiniteError as exc:
            raise FitDivergedError(f"map fit diverged at outer iteration {k}: {exc}", last_good) from exc
        if k % 50 == 0:
            last_good = _snapshot(pair)
    if pair.conjugate.clamp_events:
        log.info("exp overflow guard hit %d times", pair.conjugate.clamp_events)
    pair.trained = True
    return pair


def estimate_uot_distance(pair: UOTPair, source, target, n_samples: int | None = 4096, seed: int = 0) -> float:
    """Plug-in semi-dual value
    mean_x [0.5||x - T(x)||^2 - v(T(x))] - mean_y psi*_tau(-v(y)).

    ``source`` is a DiscreteMeasure or a callable ``n -> samples``. With
    ``n_samples=None`` discrete measures are integrated exactly by weight.
    """
    rng = np.random.default_rng(seed)
    if callable(source):
        x, wx = np.asarray(source(n_samples or 4096), dtype=float), None
    else:
        source = as_measure(source)
        x, wx = (source.points, source.weights) if n_samples is None else (source.sample(n_samples, rng), None)
    target = as_measure(target)
    y, wy = (target.points, target.weights) if n_samples is None else (target.sample(n_samples, rng), None)
    t = pair.transport_np(x, pair.aux(len(x), rng))
    inner = quadratic_cost(x, t) - pair.potential_np(t)
    outer = psi_conj(-pair.potential_np(y), pair.tau)
    return float(np.average(inner, weights=wx) - np.average(outer, weights=wy))


@dataclass
class MapDiagnostics:
    mean_displacement: float
    clamp_events: int
    traces: dict = field(default_factory=dict)


def diagnostics(pair: UOTPair, x: np.ndarray) -> MapDiagnostics:
    disp = np.linalg.norm(pair.transport_np(x) - x, axis=1).mean()
    return MapDiagnostics(float(disp), pair.conjugate.clamp_events, pair.trace)
