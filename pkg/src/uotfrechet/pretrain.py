"""VAE with planar normalizing flows; its decoder seeds the barycenter
generator so that every mode of the pooled data is covered from the start."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .autodiff import MLP, Adam, MLPSpec, NonFiniteError, Tensor, as_tensor, seed_streams
from .barycenter import Standardizer
from .oracle import DiscreteMeasure, as_measure

log = logging.getLogger(__name__)

_M_SHIFT = float(np.log(np.e - 1.0))


class PlanarFlow:
    """f(z) = z + u_hat * tanh(w.z + b).

    u is reparameterized to u_hat = u + (m(w.u) - w.u) w / |w|^2 with
    m(a) = -1 + softplus(a + log(e - 1)). m stays above -1, which keeps the
    layer invertible, and m(0) = 0, so u = 0 gives the identity.
    """

    def __init__(self, dim: int, rng: np.random.Generator | int | None = None, scale: float = 0.1):
        rng = np.random.default_rng(rng)
        self.dim = dim
        self.u = Tensor(scale * rng.standard_normal((1, dim)), requires_grad=True)
        self.w = Tensor(scale * rng.standard_normal((1, dim)), requires_grad=True)
        self.b = Tensor(np.zeros(1), requires_grad=True)

    @property
    def params(self) -> list[Tensor]:
        return [self.u, self.w, self.b]

    def u_hat(self) -> Tensor:
        wu = (self.w * self.u).sum()
        m = (wu + _M_SHIFT).softplus() - 1.0
        return self.u + self.w * ((m - wu) / (self.w * self.w).sum())

    def __call__(self, z: Tensor) -> tuple[Tensor, Tensor]:
        u_hat = self.u_hat()
        h = (z @ self.w.T + self.b).tanh()
        out = z + h * u_hat
        arg = (1.0 - h * h) * (u_hat * self.w).sum() + 1.0
        if np.any(arg.data <= 0):
            raise AssertionError("planar flow lost invertibility")
        return out, arg.log()[:, 0]


def flow_forward(flows: list[PlanarFlow], z0) -> tuple[Tensor, Tensor]:
    """Push z0 through every layer; returns (z_K, sum of log|det| per row)."""
    z = as_tensor(z0)
    total = Tensor(np.zeros(z.shape[0]))
    for f in flows:
        z, ld = f(z)
        total = total + ld
    return z, total


@dataclass
class VAENFConfig:
    latent_dim: int | None = None
    encoder_widths: tuple[int, ...] = (256, 256, 256, 256)
    decoder_widths: tuple[int, ...] = (256, 256, 256, 256)
    activation: str = "relu"
    flow_depth: int = 8
    C_beta: float = 0.5
    epochs: int = 50
    batch: int = 128
    lr: float = 1e-3
    seed: int = 0

    def __post_init__(self):
        if not self.C_beta > 0:
            raise ValueError("C_beta must be positive")
        if self.flow_depth < 0:
            raise ValueError("flow depth must be >= 0")


def beta_schedule(epoch: int, C_beta: float, n_epochs: int) -> float:
    """Annealed KL weight epoch / (C_beta * N), capped at 1."""
    return min(1.0, epoch / (C_beta * n_epochs))


@dataclass
class VAENF:
    encoder: MLP
    flows: list[PlanarFlow]
    generator: MLP

    @property
    def latent_dim(self) -> int:
        return self.generator.spec.input_dim

    @property
    def params(self) -> list[Tensor]:
        out = list(self.encoder.params) + list(self.generator.params)
        for f in self.flows:
            out += f.params
        return out


def build_vaenf(dim: int, cfg: VAENFConfig) -> VAENF:
    dz = cfg.latent_dim or dim
    r_enc, r_flow, r_dec = seed_streams(cfg.seed, 3)
    encoder = MLP(MLPSpec(dim, cfg.encoder_widths, 2 * dz, cfg.activation), r_enc)
    flows = [PlanarFlow(dz, r_flow) for _ in range(cfg.flow_depth)]
    generator = MLP(MLPSpec(dz, cfg.decoder_widths, dim, cfg.activation), r_dec)
    return VAENF(encoder, flows, generator)


def free_energy_loss(
    batch: np.ndarray, model: VAENF, beta: float, rng: np.random.Generator
) -> tuple[Tensor, dict[str, float]]:
    """Reconstruction + beta * flow free-energy KL term.

    KL term per row: -0.5 |z0 - mu|^2 / sigma^2 - sum log sigma
    + 0.5 |z_K|^2 - sum_k log|det df_k/dz| (additive constants dropped).
    """
    if not 0.0 <= beta <= 1.0:
        raise ValueError(f"beta must lie in [0, 1], got {beta}")
    x = as_tensor(batch)
    dz = model.latent_dim
    enc = model.encoder(x)
    mu, log_sigma = enc[:, :dz], enc[:, dz:]
    sigma = log_sigma.exp()
    z0 = mu + sigma * Tensor(rng.standard_normal(mu.shape))
    zk, logdet = flow_forward(model.flows, z0)
    x_hat = model.generator(zk)
    diff = x - x_hat
    recon = (diff * diff).sum(axis=1).mean()
    std = (z0 - mu) / sigma
    kl = (
        (std * std).sum(axis=1) * -0.5
        - log_sigma.sum(axis=1)
        + (zk * zk).sum(axis=1) * 0.5
        - logdet
    ).mean()
    loss = recon if beta == 0.0 else recon + kl * beta
    return loss, {"recon": recon.item(), "kl": kl.item()}


@dataclass
class PretrainResult:
    generator: MLP
    standardizer: Standardizer
    model: VAENF
    curve: list[dict] = field(default_factory=list)


def pretrain_generator(pooled, cfg: VAENFConfig | None = None, standardizer: Standardizer | None = None) -> PretrainResult:
    """Fit the VAE-NF on the pooled data (in standardized coordinates) and
    hand back its decoder as a generator."""
    cfg = cfg or VAENFConfig()
    pooled = as_measure(pooled)
    standardizer = standardizer or Standardizer.fit([pooled])
    data = DiscreteMeasure(standardizer.forward(pooled.points), pooled.weights)
    model = build_vaenf(data.dim, cfg)
    opt = Adam(model.params, cfg.lr)
    rng = np.random.default_rng(np.random.SeedSequence(cfg.seed).spawn(4)[3])
    steps = max(1, data.n // cfg.batch)
    curve = []
    for epoch in range(1, cfg.epochs + 1):
        beta = beta_schedule(epoch, cfg.C_beta, cfg.epochs)
        parts_sum = {"recon": 0.0, "kl": 0.0}
        for _ in range(steps):
            x = data.sample(cfg.batch, rng)
            loss, parts = free_energy_loss(x, model, beta, rng)
            try:
                opt.minimize(loss)
            except NonFiniteError as exc:
                raise NonFiniteError(f"VAE-NF pretraining diverged in epoch {epoch}: {exc}") from exc
            for k in parts_sum:
                parts_sum[k] += parts[k] / steps
        curve.append({"epoch": epoch, "beta": beta, **parts_sum})
        log.debug("pretrain epoch %d beta=%.3f recon=%.4f kl=%.4f", epoch, beta, parts_sum["recon"], parts_sum["kl"])
    return PretrainResult(model.generator, standardizer, model, curve)
