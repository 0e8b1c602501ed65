import numpy as np
import pytest

from uotfrechet.barycenter import (
    BarycenterProblem,
    FixedPointConfig,
    Standardizer,
    average_map_apply,
    estimate_objective_V,
    fixed_point_fit,
    generator_regression_step,
    sample_barycenter,
)
from uotfrechet.oracle import DiscreteMeasure, discrete_fixed_point_barycenter, w2

SMALL = dict(widths_T=(32, 32), widths_G=(32, 32), lr_G=1e-3, lr_T=1e-3, lr_v=1e-3, init_steps=200)


class _Shift:
    trained = True

    def __init__(self, dim, c=0.0, scale=1.0, const=None):
        self.dim, self.c, self.scale, self.const = dim, c, scale, const

    def transport_np(self, x):
        if self.const is not None:
            return np.full_like(x, self.const)
        return self.scale * x + self.c


def _problem(alphas=(0.5, 0.5), dim=2, **kw):
    rng = np.random.default_rng(0)
    snaps = [DiscreteMeasure(rng.normal(size=(40, dim))) for _ in alphas]
    return BarycenterProblem(snaps, list(alphas), 5.0, FixedPointConfig(**{**SMALL, **kw}))


def test_average_map_identity():
    p = _problem()
    p.pairs = [_Shift(2), _Shift(2)]
    z = p.latent(16)
    np.testing.assert_allclose(average_map_apply(p, z), p.generator.predict(z))


def test_average_map_shifts_cancel():
    p = _problem()
    p.pairs = [_Shift(2, 1.0), _Shift(2, -1.0)]
    z = p.latent(16)
    np.testing.assert_allclose(average_map_apply(p, z), p.generator.predict(z), atol=1e-12)


def test_average_map_scalings():
    p = _problem()
    p.pairs = [_Shift(2, scale=2.0), _Shift(2, scale=0.0)]
    z = p.latent(16)
    np.testing.assert_allclose(average_map_apply(p, z), p.generator.predict(z), atol=1e-12)


def test_average_map_needs_trained_pairs():
    with pytest.raises(RuntimeError):
        average_map_apply(_problem(), np.zeros((2, 2)))


def test_regression_drives_generator_to_constant_target():
    p = _problem(K_G=400, batch_G=64)
    p.pairs = [_Shift(2, const=0.7), _Shift(2, const=0.7)]
    losses = generator_regression_step(p)
    assert losses[-1] < 0.1 * losses[0]
    np.testing.assert_allclose(p.generate(500).mean(axis=0), 0.7, atol=0.1)


def test_identity_maps_leave_generator_fixed():
    p = _problem(K_G=20)
    p.pairs = [_Shift(2), _Shift(2)]
    z = p.latent(64)
    before = p.generator.predict(z)
    losses = generator_regression_step(p)
    assert losses[0] == pytest.approx(0.0, abs=1e-20)
    # only weight decay moves G; Adam rescales that tiny gradient to lr-sized steps
    assert w2(before, p.generator.predict(z)) < 0.1


def test_weight_validation():
    with pytest.raises(ValueError):
        _problem(alphas=(0.7, 0.7))
    with pytest.raises(ValueError):
        _problem(alphas=(1.5, -0.5))
    rng = np.random.default_rng(0)
    with pytest.raises(ValueError):
        BarycenterProblem([DiscreteMeasure(rng.normal(size=(5, 1))), DiscreteMeasure(rng.normal(size=(5, 2)))], [0.5, 0.5], 1.0)


def test_zero_weight_snapshots_are_dropped():
    p = _problem(alphas=(0.0, 1.0, 0.0))
    assert len(p.pairs) == 1 and p.active.tolist() == [1]


def test_standardizer_round_trip_and_tau():
    rng = np.random.default_rng(1)
    st = Standardizer.fit([DiscreteMeasure(rng.normal(3, 2, size=(100, 2)))])
    x = rng.normal(size=(5, 2))
    np.testing.assert_allclose(st.inverse(st.forward(x)), x)
    assert st.tau(2.0) == pytest.approx(2.0 / st.scale**2)
    assert st.tau(np.inf) == np.inf


def test_fit_and_sampling():
    rng = np.random.default_rng(0)
    a = DiscreteMeasure(rng.normal(-1, 0.5, (150, 1)))
    b = DiscreteMeasure(rng.normal(1, 0.5, (150, 1)))
    cfg = FixedPointConfig(K_G=50, K_T=10, K_v=50, epochs=10, tol=0, n_eval=150, **{**SMALL, "widths_T": (64, 64), "widths_G": (64, 64), "init_steps": 500})
    p = BarycenterProblem([a, b], [0.5, 0.5], 5.0, cfg)
    model = fixed_point_fit(p)
    assert len(model.trace.V) == 10 and len(model.trace.regression) == 10
    s = model.sample(2000)
    assert abs(s.points.mean()) < 0.15
    assert sample_barycenter(model, 0).points.shape == (0, 1)
    np.testing.assert_array_equal(model.sample(10, seed=3).points, model.sample(10, seed=3).points)
    # the discrete fixed point on the same clouds gives the same objective
    discrete = discrete_fixed_point_barycenter([a, b], [0.5, 0.5], 5.0, 10, epsilon=1e-2).value[-1]
    neural = estimate_objective_V(p, 150, seed=99)
    assert neural == pytest.approx(discrete, rel=0.15)


def test_doubling_weights_is_a_noop():
    p1 = _problem(alphas=(0.25, 0.75))
    p2 = _problem(alphas=(0.25, 0.75))
    np.testing.assert_array_equal(p1.alphas, p2.alphas)
    np.testing.assert_allclose(p1.alphas, np.array([0.5, 1.5]) / 2.0)
