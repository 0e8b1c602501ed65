"""End-to-end acceptance checks, one test per criterion. Each test records a
PASS/FAIL line that is repeated in the terminal summary."""
import dataclasses
import json
import time

import numpy as np

from _oracles import central_difference, delta_uot_value, max_rel_error
from uotfrechet.autodiff import MLP, MLPSpec, backward
from uotfrechet.barycenter import BarycenterProblem, FixedPointConfig, fixed_point_fit
from uotfrechet.cli import _weights_at, fit_barycenter, main
from uotfrechet.config import ExperimentConfig, PretrainSection
from uotfrechet.data import (
    leave_one_out,
    ring_mixture,
    sample_gmm,
    simulate_gmm_family,
    outlier_gmm_spec,
    synth_temporal_benchmark,
    template_means,
)
from uotfrechet.metrics import COLUMN_TITLES, baseline_midpoint, benchmark_report
from uotfrechet.oracle import DiscreteMeasure, discrete_fixed_point_barycenter, exact_ot, sinkhorn_uot, w2
from uotfrechet.pretrain import PlanarFlow, VAENFConfig, flow_forward, pretrain_generator
from uotfrechet.trajectory import PCAProjection, Trajectory, cluster, dtw_distance, dtw_matrix, endpoints, fit_chain, pca_backproject, rollout
from uotfrechet.uot import EXP_CLAMP, MapFitConfig, diagnostics, estimate_uot_distance, fit_uot_map, psi_conj
from uotfrechet.weights import frechet_weights

# small networks shared by the neural criteria
FP = FixedPointConfig(
    K_G=50, K_T=10, K_v=50, epochs=15, widths_T=(64, 64), widths_G=(64, 64),
    lr_G=1e-3, lr_T=1e-3, lr_v=1e-3, n_eval=512,
)
VF = VAENFConfig(encoder_widths=(64, 64), decoder_widths=(64, 64), epochs=30)


def test_criterion_01_autodiff(criterion):
    start = time.perf_counter()
    worst = 0.0
    for k in range(20):
        rng = np.random.default_rng(k)
        d_in, d_out = int(rng.integers(1, 6)), int(rng.integers(1, 6))
        widths = tuple(int(w) for w in rng.integers(1, 6, size=rng.integers(1, 3)))
        act = ("tanh", "silu", "relu")[k % 3]
        net = MLP(MLPSpec(d_in, widths, d_out, act), rng)
        x = rng.normal(size=(4, d_in))

        def loss(flat):
            net.set_flat(flat)
            out = net(x)
            return (out * out).sum() * 0.5

        flat = net.get_flat()
        net.set_flat(flat)
        grads = backward(loss(flat), net.params)
        analytic = np.concatenate([g.ravel() for g in grads])
        numeric = central_difference(lambda f: loss(f).item(), flat, 1e-6)
        worst = max(worst, max_rel_error(analytic, numeric))
    dt = time.perf_counter() - start
    criterion(1, worst < 1e-4 and dt < 10, f"20 MLPs, max rel error {worst:.2e}, {dt:.1f}s")


def test_criterion_02_conjugate(criterion):
    start = time.perf_counter()
    checks = {
        "psi(0)=0": psi_conj(0.0, 3.0) == 0.0,
        "psi(1,1)": abs(psi_conj(1.0, 1.0) - (np.e - 1)) < 1e-12,
        "psi(1,100)": abs(psi_conj(1.0, 100.0) - 1.005017) < 1e-6,
    }
    rng = np.random.default_rng(0)
    tau = rng.uniform(0.05, 50.0, 1000)
    # the exp argument is clamped at EXP_CLAMP, so the properties hold below it
    s1 = rng.uniform(-20.0, EXP_CLAMP, 1000) * tau
    s2 = rng.uniform(-20.0, EXP_CLAMP, 1000) * tau
    lam = rng.uniform(0, 1, 1000)
    psi = np.vectorize(psi_conj)
    mid = psi(lam * s1 + (1 - lam) * s2, tau)
    chord = lam * psi(s1, tau) + (1 - lam) * psi(s2, tau)
    checks["convex"] = bool(np.all(mid <= chord + 1e-9 * (1 + np.abs(chord))))
    lo, hi = np.minimum(s1, s2), np.maximum(s1, s2)
    checks["monotone"] = bool(np.all(psi(lo, tau) <= psi(hi, tau) + 1e-12 * (1 + np.abs(psi(hi, tau)))))
    dt = time.perf_counter() - start
    failed = [k for k, v in checks.items() if not v]
    criterion(2, not failed and dt < 1, f"closed forms + 1000 triples, failed={failed}, {dt:.2f}s")


def test_criterion_03_fixed_point_monotone(criterion):
    start = time.perf_counter()
    worst = -np.inf
    for k in range(20):
        rng = np.random.default_rng(1000 + k)
        snaps = [DiscreteMeasure(rng.normal(size=(rng.integers(5, 31), 2)) + rng.normal(0, 2, 2)) for _ in range(3)]
        tr = discrete_fixed_point_barycenter(snaps, rng.dirichlet(np.ones(3)), float(rng.uniform(0.5, 10)), 10, epsilon=0.05)
        worst = max(worst, float(np.diff(tr.objective).max()))
    dt = time.perf_counter() - start
    criterion(3, worst <= 1e-6 and dt < 120, f"20 instances x 10 iters, max V increase {worst:.2e}, {dt:.1f}s")


def test_criterion_04_uot_value(criterion):
    start = time.perf_counter()
    src = DiscreteMeasure(np.array([[0.0]]))
    tgt = DiscreteMeasure(np.array([[0.0], [10.0]]), np.array([0.9, 0.1]))
    ref = delta_uot_value()
    sk = sinkhorn_uot(src, tgt, tau=1.0).value
    ot, _ = exact_ot(src, tgt)
    pair = fit_uot_map(src, tgt, MapFitConfig(tau=1.0, K_v=2000, K_T=5, batch=64, widths=(64, 64), lr_map=1e-3, lr_potential=1e-3))
    neural = estimate_uot_distance(pair, src, tgt, n_samples=None)
    dt = time.perf_counter() - start
    ok = abs(sk - ref) < 0.01 and abs(ot - 5.0) < 1e-8 and abs(neural - ref) < 0.05 and dt < 60
    criterion(4, ok, f"ref {ref:.5f}, sinkhorn {sk:.5f}, exact OT {ot:.10f}, neural {neural:.5f}, {dt:.1f}s")


def test_criterion_05_relaxation_and_limits(criterion):
    start = time.perf_counter()
    eps = 1e-2
    below = True
    for k in range(50):
        rng = np.random.default_rng(k)
        a = DiscreteMeasure(rng.normal(size=(int(rng.integers(3, 12)), 2)))
        b = DiscreteMeasure(rng.normal(size=(int(rng.integers(3, 12)), 2)) + rng.normal(size=2))
        sol = sinkhorn_uot(a, b, tau=float(rng.uniform(0.1, 20)), epsilon=eps)
        below &= sol.value <= exact_ot(a, b)[0] + 1e-6 + eps * np.log(min(a.n, b.n))
    worst_rel = 0.0
    for k in range(10):
        rng = np.random.default_rng(100 + k)
        a = DiscreteMeasure(rng.normal(size=(10, 2)))
        b = DiscreteMeasure(rng.normal(size=(10, 2)) + 2.0)
        ot = exact_ot(a, b)[0]
        worst_rel = max(worst_rel, abs(sinkhorn_uot(a, b, tau=1e3, epsilon=1e-3).value - ot) / ot)
    rng = np.random.default_rng(0)
    src, tgt = rng.normal(0, 1, (1000, 1)), rng.normal(1, 1, (1000, 1))
    pair = fit_uot_map(src, tgt, MapFitConfig(tau=0.01, K_v=300, K_T=10, widths=(64, 64), lr_map=1e-3, lr_potential=1e-3))
    disp = diagnostics(pair, src).mean_displacement
    dt = time.perf_counter() - start
    ok = below and worst_rel < 0.02 and disp < 0.1 and dt < 180
    criterion(5, ok, f"UOT<=OT on 50 pairs: {below}, tau=1e3 max rel gap {worst_rel:.2e}, tau=0.01 displacement {disp:.4f}, {dt:.1f}s")


def test_criterion_06_frechet_weights(criterion):
    start = time.perf_counter()
    w = frechet_weights([0.0, 1.0, 2.0], 1.0, 1.0).normalized
    literal = np.array([0.27406, 0.45188, 0.27406])
    example_ok = bool(np.all(np.abs(w - literal) < 1e-6))
    rng = np.random.default_rng(0)
    simplex_ok = True
    argmax_ok = True
    for _ in range(1000):
        times = np.sort(rng.choice(np.arange(0.0, 50.0, 0.5), size=int(rng.integers(2, 12)), replace=False))
        t = float(rng.uniform(times[0], times[-1]))
        h = float(rng.uniform(0.3, 20.0))
        a = frechet_weights(times, t, h).normalized
        simplex_ok &= bool(np.all(a >= 0) and abs(a.sum() - 1) < 1e-9)
        tiny = frechet_weights(times, t, 1e-4).normalized
        nearest = np.argmin(np.abs(times - t))
        if np.ptp(np.sort(np.abs(times - t))[:2]) > 1e-6:
            argmax_ok &= int(np.argmax(tiny)) == int(nearest)
    dt = time.perf_counter() - start
    ok = example_ok and simplex_ok and argmax_ok
    criterion(
        6,
        ok,
        f"example {np.array2string(w, precision=8)} vs {literal} (max gap {np.abs(w - literal).max():.2e}), "
        f"simplex {simplex_ok}, h->0 argmax {argmax_ok}, {dt:.2f}s",
    )


def test_criterion_07_gaussian_barycenter(criterion):
    start = time.perf_counter()
    rng = np.random.default_rng(0)
    a = DiscreteMeasure(rng.normal(size=(2000, 2)) + [-2.0, 0.0])
    b = DiscreteMeasure(rng.normal(size=(2000, 2)) + [2.0, 0.0])
    ref = rng.normal(size=(2000, 2))
    model = fixed_point_fit(BarycenterProblem([a, b], [0.5, 0.5], 100.0, dataclasses.replace(FP, tol=0.0)))
    s = model.sample(2000, seed=1).points
    off = float(np.linalg.norm(s.mean(axis=0)))
    dist = w2(s, ref)
    dt = time.perf_counter() - start
    criterion(7, off < 0.15 and dist < 0.6 and dt < 600, f"|mean| {off:.3f}, w2 to N(0,I) {dist:.3f}, {dt:.1f}s")


def _outlier_instance():
    spec = outlier_gmm_spec(2, seed=3)
    snaps = simulate_gmm_family(spec, 10)
    means = template_means(2)
    ref, _ = sample_gmm(means[:4], np.stack([0.5 * np.eye(2)] * 4), np.full(4, 0.25), 2000, np.random.default_rng(0))
    return snaps, means, ref


def test_criterion_08_outlier_robustness(criterion):
    start = time.perf_counter()
    snaps, means, ref = _outlier_instance()
    res = {}
    for tau in (1.0, float("inf")):
        cfg = ExperimentConfig(tau=tau, fixed_point=dataclasses.replace(FP, tol=0.0))
        g = fit_barycenter(snaps, np.full(10, 0.1), cfg).sample(4000, seed=1).points
        near = (np.linalg.norm(g[:, None] - means[None, 4:], axis=2).min(axis=1) < 3).mean()
        res[tau] = (float(near), w2(g[:2000], ref))
    dt = time.perf_counter() - start
    uot, ot = res[1.0], res[float("inf")]
    ok = uot[0] < 0.01 and uot[1] < ot[1] and dt < 1800
    criterion(
        8, ok,
        f"UOT near-outlier fraction {uot[0]:.4f}, w2 UOT {uot[1]:.3f} vs OT {ot[1]:.3f} (OT near-outlier {ot[0]:.4f}), {dt:.0f}s",
    )


def test_criterion_09_vaenf(criterion):
    start = time.perf_counter()
    worst = 0.0
    for d in (1, 2, 3, 4):
        rng = np.random.default_rng(d)
        flows = [PlanarFlow(d, rng, scale=1.0) for _ in range(3)]
        for _ in range(5):
            z = rng.normal(size=d)
            jac = np.column_stack([
                central_difference(lambda v: flow_forward(flows, v[None])[0].data[0, j], z, 1e-6) for j in range(d)
            ]).T
            num = np.log(abs(np.linalg.det(jac)))
            worst = max(worst, max_rel_error(flow_forward(flows, z[None])[1].data, np.array([num])))
    pts, centers = ring_mixture(3000, seed=0)
    ring = pretrain_generator(pts, dataclasses.replace(VF, flow_depth=8, epochs=60))
    z = np.random.default_rng(1).standard_normal((4000, 2))
    gen = ring.standardizer.inverse(ring.generator.predict(z))
    coverage = np.bincount(np.linalg.norm(gen[:, None] - centers[None], axis=2).argmin(axis=1), minlength=8) / 4000
    snaps, _, _ = _outlier_instance()
    final = {}
    for pre in (False, True):
        cfg = ExperimentConfig(tau=1.0, fixed_point=dataclasses.replace(FP, tol=0.0), pretrain=PretrainSection(pre, VF))
        final[pre] = fit_barycenter(snaps, np.full(10, 0.1), cfg).trace.regression[-1]
    dt = time.perf_counter() - start
    ok = worst < 1e-4 and coverage.min() >= 0.05 and final[True] <= final[False] and dt < 900
    criterion(
        9, ok,
        f"logdet rel error {worst:.1e}, min mode coverage {coverage.min():.3f}, final regression loss "
        f"with pretraining {final[True]:.5f} vs without {final[False]:.5f}, {dt:.0f}s",
    )


def test_criterion_10_benchmark(criterion, tmp_path):
    start = time.perf_counter()
    wins = []
    last = None
    for seed in range(10):
        cfg = ExperimentConfig(seed=seed, tau=5.0, fixed_point=dataclasses.replace(FP, seed=seed))
        cfg.weights.bandwidth = 1.0
        train, truth, _ = leave_one_out(synth_temporal_benchmark(seed), 2.0)
        model = fit_barycenter(train.snapshots, _weights_at(train.times, 2.0, cfg), cfg)
        pred = model.sample(1000, seed=seed)
        b1 = baseline_midpoint(train.snapshots[1], train.snapshots[2])
        wins.append(w2(truth, pred) < w2(truth, b1))
        last = (truth, pred, b1, train)
    truth, pred, b1, train = last
    report = benchmark_report(
        truth, {"uot_barycenter": pred, "baseline1_midpoint": b1}, reps=100, size=500, seed=0, time=2.0,
        adjacent=(train.snapshots[1], train.snapshots[2]),
    )
    report.to_csv(tmp_path / "report.csv")
    text = report.summary()
    layout_ok = all(COLUMN_TITLES[m] in text for m in COLUMN_TITLES) and all(e.reps == 100 for e in report.entries)
    dt = time.perf_counter() - start
    print(text)
    n_wins = int(sum(wins))
    criterion(10, n_wins >= 8 and layout_ok and dt < 1800, f"UOT beats Baseline 1 in W2 on {n_wins}/10 seeds, layout {layout_ok}, {dt:.0f}s")


def test_criterion_11_trajectories(criterion):
    start = time.perf_counter()
    hand = dtw_distance(np.array([0.0, 1.0, 2.0]), np.array([0.0, 2.0]))
    rng = np.random.default_rng(0)
    seqs = [rng.normal(size=(int(rng.integers(2, 8)), 3)) for _ in range(8)]
    dm = dtw_matrix(seqs)
    sym_ok = bool(np.array_equal(dm, dm.T) and np.all(np.diag(dm) == 0))
    snaps = [DiscreteMeasure(rng.normal(k, 1.0, size=(400, 1))) for k in range(3)]
    chain = fit_chain(snaps, MapFitConfig(tau=5.0, K_v=300, K_T=10, widths=(64, 64), lr_map=1e-3, lr_potential=1e-3))
    starts = snaps[0].points[:200]
    end = endpoints(rollout(chain, starts))
    before, after = w2(starts, snaps[-1]), w2(end, snaps[-1])
    t = np.arange(6.0)
    bundles = [Trajectory(i, t, np.c_[t, 0.05 * rng.normal(size=6)]) for i in range(5)]
    bundles += [Trajectory(i + 5, t, np.c_[t, -t + 0.05 * rng.normal(size=6)]) for i in range(5)]
    labels = cluster(dtw_matrix(bundles), 2)
    bundles_ok = labels.tolist() == [0] * 5 + [1] * 5
    q, _ = np.linalg.qr(rng.normal(size=(6, 3)))
    proj = PCAProjection(q, rng.normal(size=6))
    x = rng.normal(size=(20, 3)) @ q.T + proj.mean
    pca_err = float(np.abs(pca_backproject(proj.project(x), proj) - x).max())
    dt = time.perf_counter() - start
    ok = hand == 1.0 and sym_ok and after < before and bundles_ok and pca_err < 1e-8 and dt < 300
    criterion(
        11, ok,
        f"DTW hand {hand}, symmetric/zero diag {sym_ok}, endpoint w2 {after:.3f} < start w2 {before:.3f}, "
        f"bundles {bundles_ok}, PCA error {pca_err:.1e}, {dt:.1f}s",
    )


def test_criterion_12_reproducibility(criterion, tmp_path, capsys):
    args = ["weights", "--times", "0", "1", "2", "--time", "1", "--bandwidth", "1"]
    codes = [main([*args[:1], "--out", str(tmp_path / name), *args[1:]]) for name in ("a", "b")]
    same = (tmp_path / "a" / "weights.csv").read_bytes() == (tmp_path / "b" / "weights.csv").read_bytes()
    replay = main(["replay", str(tmp_path / "a" / "manifest.json"), "--out", str(tmp_path / "r")])
    replay_same = (tmp_path / "r" / "weights.csv").read_bytes() == (tmp_path / "a" / "weights.csv").read_bytes()
    recorded = json.loads((tmp_path / "a" / "manifest.json").read_text())["outputs"]
    capsys.readouterr()
    ok = codes == [0, 0] and same and replay == 0 and replay_same
    criterion(12, ok, f"two runs identical {same}, replay exit {replay}, replay identical {replay_same}, hashed {sorted(recorded)}")
