"""Command-line entry point: ``uotfr <command> [flags]``.

Every command writes its outputs plus ``manifest.json`` into ``--out``.
``uotfr replay <manifest>`` reruns a command from its manifest and checks
that every CSV output is byte-identical.

Exit codes: 0 ok, 1 configuration error, 2 data error, 3 numerical failure.
Errors also print one JSON line on stderr.
"""
from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import logging
import os
import platform
import sys
import time
from contextlib import nullcontext
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import __version__
from .autodiff import MLP, NonFiniteError, load_checkpoint, save_checkpoint
from .barycenter import BarycenterModel, BarycenterProblem, Standardizer, fixed_point_fit
from .config import ConfigError, ExperimentConfig, dump_config, load_config, to_dict
from .data import (
    DataError,
    TemporalDataset,
    leave_one_out,
    load_csv,
    load_points_csv,
    save_csv,
    save_points_csv,
    simulate_gmm_family,
    outlier_gmm_spec,
    synth_temporal_benchmark,
)
from .metrics import baseline_midpoint, benchmark_report
from .oracle import DiscreteMeasure
from .pretrain import pretrain_generator
from .trajectory import (
    PCAProjection,
    cluster,
    dtw_matrix,
    fit_chain,
    interpolated_grid,
    pca_backproject,
    rollout,
    save_labels,
    save_trajectories,
)
from .uot import fit_uot_map
from .weights import DegenerateDesignError, FrechetWeights, frechet_weights

log = logging.getLogger("uotfrechet")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERICAL = 0, 1, 2, 3
THREADS_ENV = "UOT_FRECHET_THREADS"
SEED_DERIVATION = "numpy SeedSequence(root).spawn(3) -> generate_state(1)[0] for (fixed_point, map, vaenf)"
_DEFAULTS = ExperimentConfig()


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError(message)


# ---------------------------------------------------------------------------
# Configuration from file + flags


def _d(section, name: str) -> str:
    value = getattr(section, name)
    return "x".join(map(str, value)) if isinstance(value, tuple) else str(value)


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--config", help="JSON experiment config; flags override it")
    p.add_argument("--seed", type=int, help=f"root seed (default: {_DEFAULTS.seed})")
    p.add_argument("--threads", type=int, help=f"BLAS thread cap (fallback: ${THREADS_ENV})")
    p.add_argument("-v", "--verbose", action="store_true")


def _add_weights(p: argparse.ArgumentParser) -> None:
    w = _DEFAULTS.weights
    p.add_argument("--bandwidth", type=float, help=f"kernel bandwidth h (default: {w.bandwidth})")
    p.add_argument("--kernel", choices=("gaussian", "epanechnikov"), help=f"(default: {w.kernel})")
    p.add_argument("--prune-threshold", type=float, help=f"(default: {w.prune_threshold})")


def _add_fixed_point(p: argparse.ArgumentParser) -> None:
    fp = _DEFAULTS.fixed_point
    p.add_argument("--tau", type=float, help=f"unbalanced tolerance, 'inf' for balanced (default: {_DEFAULTS.tau})")
    p.add_argument("--samples", type=int, help=f"samples to export (default: {_DEFAULTS.samples})")
    for name in ("K_G", "K_T", "K_v", "batch_G", "batch_T", "epochs", "init_steps", "n_eval"):
        p.add_argument(f"--{name.replace('_', '-')}", dest=f"fp_{name}", type=int, metavar="N", help=f"(default: {_d(fp, name)})")
    for name in ("lr_G", "lr_T", "lr_v", "tol"):
        p.add_argument(f"--{name.replace('_', '-')}", dest=f"fp_{name}", type=float, metavar="X", help=f"(default: {_d(fp, name)})")
    for name in ("widths_T", "widths_G"):
        p.add_argument(
            f"--{name.replace('_', '-')}", dest=f"fp_{name}", type=int, nargs="+", metavar="W", help=f"hidden widths (default: {_d(fp, name)})"
        )
    p.add_argument("--pretrain", action=argparse.BooleanOptionalAction, help="VAE-NF generator pretraining (default: off)")
    vf = _DEFAULTS.pretrain.vaenf
    p.add_argument("--c-beta", dest="vf_C_beta", type=float, metavar="X", help=f"KL annealing constant (default: {vf.C_beta})")
    p.add_argument("--flow-depth", dest="vf_flow_depth", type=int, metavar="K", help=f"planar flows K (default: {vf.flow_depth})")
    p.add_argument("--pretrain-epochs", dest="vf_epochs", type=int, metavar="N", help=f"(default: {vf.epochs})")


def _add_map(p: argparse.ArgumentParser) -> None:
    m = _DEFAULTS.map
    p.add_argument("--map-tau", dest="map_tau", type=float, metavar="X", help=f"(default: {m.tau})")
    for name in ("K_v", "K_T", "batch"):
        p.add_argument(f"--map-{name.replace('_', '-')}", dest=f"map_{name}", type=int, metavar="N", help=f"(default: {_d(m, name)})")
    for name in ("lr_map", "lr_potential"):
        p.add_argument(f"--{name.replace('_', '-')}", dest=f"map_{name}", type=float, metavar="X", help=f"(default: {_d(m, name)})")
    p.add_argument("--map-widths", dest="map_widths", type=int, nargs="+", metavar="W", help=f"(default: {_d(m, 'widths')})")


def resolve_config(args: argparse.Namespace) -> ExperimentConfig:
    cfg = load_config(getattr(args, "config", None))
    top = {k: getattr(args, k) for k in ("seed", "tau", "samples") if getattr(args, k, None) is not None}
    cfg = dataclasses.replace(cfg, **top)
    wk = {}
    for k in ("bandwidth", "kernel", "prune_threshold"):
        if getattr(args, k, None) is not None:
            wk[k] = getattr(args, k)
    fp, mp, vf = {}, {}, {}
    for key, value in vars(args).items():
        if value is None:
            continue
        if key.startswith("fp_"):
            fp[key[3:]] = tuple(value) if isinstance(value, list) else value
        elif key.startswith("map_"):
            mp[key[4:]] = tuple(value) if isinstance(value, list) else value
        elif key.startswith("vf_"):
            vf[key[3:]] = value
    pre = cfg.pretrain
    if getattr(args, "pretrain", None) is not None:
        pre = dataclasses.replace(pre, enabled=args.pretrain)
    try:
        s_fp, s_map, s_vf = (
            int(s.generate_state(1)[0]) for s in np.random.SeedSequence(cfg.seed).spawn(3)
        )
        cfg = dataclasses.replace(
            cfg,
            weights=dataclasses.replace(cfg.weights, **wk),
            fixed_point=dataclasses.replace(cfg.fixed_point, **fp, seed=s_fp),
            map=dataclasses.replace(cfg.map, **mp, seed=s_map),
            pretrain=dataclasses.replace(pre, vaenf=dataclasses.replace(pre.vaenf, **vf, seed=s_vf)),
        )
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None
    if not cfg.tau > 0:
        raise ConfigError("tau must be positive")
    if cfg.weights.bandwidth <= 0:
        raise ConfigError("bandwidth must be positive")
    return cfg


# ---------------------------------------------------------------------------
# Shared pipeline pieces


def _load_dataset(path: str) -> TemporalDataset:
    if not Path(path).is_file():
        raise DataError(f"no such file: {path}", "missing_file")
    return load_csv(path)


def _load_points(paths: Sequence[str]) -> list[DiscreteMeasure]:
    out = []
    for p in paths:
        if not Path(p).is_file():
            raise DataError(f"no such file: {p}", "missing_file")
        out.append(DiscreteMeasure(load_points_csv(p)))
    return out


def _generator_from_checkpoint(path: str) -> tuple[MLP, Standardizer]:
    try:
        nets, meta = load_checkpoint(path)
    except (OSError, ValueError, KeyError) as exc:
        raise DataError(f"cannot load checkpoint {path}: {exc}", "checkpoint") from None
    if "generator" not in nets or "standardizer" not in meta:
        raise DataError(f"{path} holds no generator", "checkpoint")
    st = meta["standardizer"]
    return nets["generator"], Standardizer(np.asarray(st["mean"]), float(st["scale"]))


def fit_barycenter(
    snapshots: Sequence[DiscreteMeasure],
    alphas,
    cfg: ExperimentConfig,
    generator: MLP | None = None,
    standardizer: Standardizer | None = None,
    traces: dict | None = None,
) -> BarycenterModel:
    """Optional VAE-NF pretraining on the pooled snapshots, then the fixed point."""
    fp = cfg.fixed_point
    if standardizer is None:
        standardizer = Standardizer.fit(snapshots) if fp.standardize else Standardizer.identity(snapshots[0].dim)
    if generator is None and cfg.pretrain.enabled:
        pooled = TemporalDataset(np.arange(len(snapshots), dtype=float), list(snapshots)).pooled()
        vf = dataclasses.replace(cfg.pretrain.vaenf, latent_dim=fp.latent_dim or snapshots[0].dim)
        result = pretrain_generator(pooled, vf, standardizer)
        generator = result.generator
        if traces is not None:
            traces["pretrain"] = result.curve
    problem = BarycenterProblem(snapshots, alphas, cfg.tau, fp, generator, standardizer)
    model = fixed_point_fit(problem, fp)
    if traces is not None:
        traces["fixed_point"] = {"V": model.trace.V, "regression": model.trace.regression}
    return model


def _save_model(model: BarycenterModel, path: Path) -> None:
    st = model.standardizer
    save_checkpoint(
        path,
        {"generator": model.generator},
        {"standardizer": {"mean": st.mean.tolist(), "scale": st.scale}, "tau": to_dict(model.tau)},
    )


def _write_trace(model: BarycenterModel, path: Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("epoch,V,regression\n")
        for i, (v, r) in enumerate(zip(model.trace.V, model.trace.regression)):
            fh.write(f"{i},{float(v)!r},{float(r)!r}\n")


def _write_weights(w: FrechetWeights, times: np.ndarray, path: Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("time,raw,normalized,pruned\n")
        for t, r, n, p in zip(times, w.raw, w.normalized, w.pruned):
            fh.write(f"{float(t)!r},{float(r)!r},{float(n)!r},{int(p)}\n")


def _weights_at(dataset_times, t: float, cfg: ExperimentConfig) -> FrechetWeights:
    w = cfg.weights
    return frechet_weights(dataset_times, t, w.bandwidth, w.kernel, w.prune_threshold, w.prune_min_snapshots)


# ---------------------------------------------------------------------------
# Commands. Each returns (outputs written, traces for the manifest).


def cmd_simulate(args, cfg: ExperimentConfig, out: Path):
    written = []
    if args.preset == "outlier-gmm":
        spec = outlier_gmm_spec(args.dim, samples=args.n_samples or 3000, seed=cfg.seed)
        for i, m in enumerate(simulate_gmm_family(spec, args.n_mixtures)):
            path = out / f"mixture_{i:02d}.csv"
            save_points_csv(m.points, path)
            written.append(path)
        info = {
            "means": spec.means.tolist(),
            "weights": spec.weights.tolist(),
            "cov_scale": spec.cov_scale,
            "mean_jitter": spec.mean_jitter,
            "cov_jitter": spec.cov_jitter,
            "weight_jitter": spec.weight_jitter,
        }
    else:
        ds = synth_temporal_benchmark(cfg.seed, args.n_samples or 1000)
        path = out / "data.csv"
        save_csv(ds, path)
        written.append(path)
        info = {"times": ds.times.tolist()}
    return written, {"preset": args.preset, "generator": info}


def cmd_weights(args, cfg: ExperimentConfig, out: Path):
    times = np.asarray(args.times, float) if args.times else _load_dataset(args.data).times
    w = _weights_at(times, args.time, cfg)
    path = out / "weights.csv"
    _write_weights(w, times, path)
    print(" ".join(f"{v:.8f}" for v in w.normalized))
    return [path], {"weights": w.to_dict()}


def cmd_pretrain(args, cfg: ExperimentConfig, out: Path):
    snaps = _load_dataset(args.data).snapshots if args.data else _load_points(args.inputs)
    st = Standardizer.fit(snaps)
    pooled = TemporalDataset(np.arange(len(snaps), dtype=float), snaps).pooled()
    vf = dataclasses.replace(cfg.pretrain.vaenf, latent_dim=cfg.fixed_point.latent_dim or snaps[0].dim)
    res = pretrain_generator(pooled, vf, st)
    save_checkpoint(
        out / "generator.ckpt",
        {"generator": res.generator},
        {"standardizer": {"mean": st.mean.tolist(), "scale": st.scale}},
    )
    curve = out / "pretrain_curve.csv"
    with open(curve, "w", encoding="utf-8") as fh:
        fh.write("epoch,beta,recon,kl\n")
        for row in res.curve:
            fh.write(f"{row['epoch']},{row['beta']!r},{row['recon']!r},{row['kl']!r}\n")
    z = np.random.default_rng(cfg.seed).standard_normal((cfg.samples, res.generator.spec.input_dim))
    samples = out / "samples.csv"
    save_points_csv(st.inverse(res.generator.predict(z)), samples)
    return [curve, samples, out / "generator.ckpt"], {"pretrain": res.curve}


def cmd_fit(args, cfg: ExperimentConfig, out: Path):
    snaps = _load_points(args.inputs)
    alphas = np.full(len(snaps), 1.0 / len(snaps)) if args.alphas is None else np.asarray(args.alphas, float)
    if alphas.size != len(snaps):
        raise ConfigError(f"{alphas.size} alphas for {len(snaps)} inputs")
    if np.any(alphas < 0) or not alphas.sum() > 0:
        raise ConfigError("alphas must be nonnegative with positive sum")
    alphas = alphas / alphas.sum()
    gen, st = _generator_from_checkpoint(args.generator) if args.generator else (None, None)
    traces: dict = {}
    model = fit_barycenter(snaps, alphas, cfg, gen, st, traces)
    samples = out / "samples.csv"
    save_points_csv(model.sample(cfg.samples, seed=cfg.seed).points, samples)
    _write_trace(model, out / "trace.csv")
    _save_model(model, out / "model.ckpt")
    return [samples, out / "trace.csv", out / "model.ckpt"], traces


def cmd_interpolate(args, cfg: ExperimentConfig, out: Path):
    ds = _load_dataset(args.data)
    if len(ds) < 2:
        raise DataError("interpolation needs at least two time points", "single_time")
    w = _weights_at(ds.times, args.time, cfg)
    _write_weights(w, ds.times, out / "weights.csv")
    gen, st = _generator_from_checkpoint(args.generator) if args.generator else (None, None)
    traces: dict = {"weights": w.to_dict()}
    model = fit_barycenter(ds.snapshots, w, cfg, gen, st, traces)
    save_points_csv(model.sample(cfg.samples, seed=cfg.seed).points, out / "samples.csv")
    _write_trace(model, out / "trace.csv")
    _save_model(model, out / "model.ckpt")
    return [out / "weights.csv", out / "samples.csv", out / "trace.csv", out / "model.ckpt"], traces


def cmd_map(args, cfg: ExperimentConfig, out: Path):
    source, target = _load_points([args.source, args.target])
    pair = fit_uot_map(source, target, cfg.map)
    save_points_csv(pair.transport_np(source.points), out / "mapped.csv")
    save_checkpoint(out / "map.ckpt", {"map": pair.map_net, "potential": pair.potential_net}, {"tau": to_dict(pair.tau)})
    return [out / "mapped.csv", out / "map.ckpt"], {"map_loss": pair.trace["map"][-100:], "potential_loss": pair.trace["potential"][-100:]}


def cmd_trajectory(args, cfg: ExperimentConfig, out: Path):
    ds = _load_dataset(args.data)
    if len(ds) < 2:
        raise DataError("trajectories need at least two time points", "single_time")
    if args.grid:
        grid = np.asarray(sorted(args.grid), float)
        measures = interpolated_grid(ds, grid, cfg.weights.bandwidth, cfg.tau, cfg.fixed_point, cfg.samples, cfg.weights.kernel)
    else:
        grid, measures = ds.times, ds.snapshots
    chain = fit_chain(measures, cfg.map)
    starts = measures[0]
    if args.starts and args.starts < starts.n:
        starts = starts.subsample(args.starts, np.random.default_rng(cfg.seed))
    trajs = rollout(chain, starts, grid)
    save_trajectories(trajs, out / "trajectories.csv")
    dist = dtw_matrix(trajs, args.local_cost)
    np.savetxt(out / "dtw.csv", dist, delimiter=",", fmt="%.17g")
    labels = cluster(dist, args.k)
    save_labels([t.point_id for t in trajs], labels, out / "labels.csv")
    written = [out / "trajectories.csv", out / "dtw.csv", out / "labels.csv"]
    if args.pca_loadings:
        if not args.pca_means:
            raise ConfigError("--pca-loadings needs --pca-means")
        proj = PCAProjection.from_csv(args.pca_loadings, args.pca_means)
        path = out / "backprojected.csv"
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(",".join(["point_id", "time"] + [f"feature_{j}" for j in range(proj.n_features)]) + "\n")
            for tr in trajs:
                for t, row in zip(tr.times, pca_backproject(tr.states, proj)):
                    fh.write(",".join([str(tr.point_id), repr(float(t))] + [repr(float(v)) for v in row]) + "\n")
        written.append(path)
    return written, {"grid": grid.tolist(), "cluster_sizes": np.bincount(labels).tolist()}


def cmd_evaluate(args, cfg: ExperimentConfig, out: Path):
    ds = _load_dataset(args.data) if args.data else synth_temporal_benchmark(args.data_seed)
    train, truth, boundary = leave_one_out(ds, args.hold)
    w = _weights_at(train.times, args.hold, cfg)
    traces: dict = {"weights": w.to_dict(), "boundary": boundary}
    model = fit_barycenter(train.snapshots, w, cfg, traces=traces)
    pred = model.sample(truth.n, seed=cfg.seed)
    save_points_csv(pred.points, out / "samples.csv")
    preds = {"uot_barycenter": pred}
    before = np.flatnonzero(train.times < args.hold)
    after = np.flatnonzero(train.times > args.hold)
    adjacent = None
    if before.size and after.size:
        prev, nxt = train.snapshots[before[-1]], train.snapshots[after[0]]
        preds["baseline1_midpoint"] = baseline_midpoint(prev, nxt, args.midpoint_mode)
        adjacent = (prev, nxt)
    report = benchmark_report(truth, preds, args.reps, args.report_size, cfg.seed, args.hold, adjacent)
    report.to_csv(out / "report.csv")
    text = report.summary()
    (out / "report.txt").write_text(text + "\n", encoding="utf-8")
    print(text)
    return [out / "samples.csv", out / "report.csv", out / "report.txt"], traces


COMMANDS: dict[str, Callable] = {
    "simulate": cmd_simulate,
    "weights": cmd_weights,
    "pretrain": cmd_pretrain,
    "fit": cmd_fit,
    "interpolate": cmd_interpolate,
    "map": cmd_map,
    "trajectory": cmd_trajectory,
    "evaluate": cmd_evaluate,
}


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="uotfr", description="Unbalanced-OT Frechet regression for snapshot data.")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("simulate", help="write a synthetic dataset")
    _add_common(p)
    p.add_argument("--preset", choices=("outlier-gmm", "temporal"), default="outlier-gmm", help="(default: outlier-gmm)")
    p.add_argument("--dim", type=int, default=10, help="mixture dimension (default: 10)")
    p.add_argument("--n-mixtures", type=int, default=10, help="(default: 10)")
    p.add_argument("--n-samples", type=int, help="points per mixture / snapshot (default: 3000 / 1000)")

    p = sub.add_parser("weights", help="local-linear Frechet weights at a query time")
    _add_common(p)
    _add_weights(p)
    g = p.add_mutually_exclusive_group(required=True)
    g.add_argument("--times", type=float, nargs="+", help="snapshot times")
    g.add_argument("--data", help="temporal CSV (time,dim_0,...)")
    p.add_argument("--time", type=float, required=True, help="query time t")

    p = sub.add_parser("pretrain", help="VAE-NF generator pretraining on pooled data")
    _add_common(p)
    _add_fixed_point(p)
    g = p.add_mutually_exclusive_group(required=True)
    g.add_argument("--data", help="temporal CSV")
    g.add_argument("--inputs", nargs="+", help="point CSVs (dim_0,...)")

    p = sub.add_parser("fit", help="weighted UOT barycenter of point clouds")
    _add_common(p)
    _add_fixed_point(p)
    p.add_argument("--inputs", nargs="+", required=True, help="point CSVs (dim_0,...)")
    p.add_argument("--alphas", type=float, nargs="+", help="barycenter weights (default: uniform)")
    p.add_argument("--generator", help="generator checkpoint from `pretrain`")

    p = sub.add_parser("interpolate", help="estimate the measure at an unobserved time")
    _add_common(p)
    _add_weights(p)
    _add_fixed_point(p)
    p.add_argument("--data", required=True, help="temporal CSV")
    p.add_argument("--time", type=float, required=True, help="query time t")
    p.add_argument("--generator", help="generator checkpoint from `pretrain`")

    p = sub.add_parser("map", help="fit one UOT map between two point clouds")
    _add_common(p)
    _add_map(p)
    p.add_argument("--source", required=True)
    p.add_argument("--target", required=True)

    p = sub.add_parser("trajectory", help="roll out, DTW-cluster and back-project trajectories")
    _add_common(p)
    _add_weights(p)
    _add_fixed_point(p)
    _add_map(p)
    p.add_argument("--data", required=True, help="temporal CSV")
    p.add_argument("--grid", type=float, nargs="+", help="interpolated time grid (default: observed times)")
    p.add_argument("--starts", type=int, help="number of start points (default: whole first snapshot)")
    p.add_argument("--k", type=int, default=2, help="clusters (default: 2)")
    p.add_argument("--local-cost", choices=("euclidean", "sq_euclidean"), default="euclidean", help="(default: euclidean)")
    p.add_argument("--pca-loadings", help="loadings CSV (features x d)")
    p.add_argument("--pca-means", help="feature means CSV")

    p = sub.add_parser("evaluate", help="leave-one-out benchmark report")
    _add_common(p)
    _add_weights(p)
    _add_fixed_point(p)
    p.add_argument("--data", help="temporal CSV (default: synthetic benchmark)")
    p.add_argument("--data-seed", type=int, default=0, help="synthetic benchmark seed (default: 0)")
    p.add_argument("--hold", type=float, required=True, help="held-out time")
    p.add_argument("--reps", type=int, default=100, help="subsampling repetitions (default: 100)")
    p.add_argument("--report-size", type=int, help="points per repetition (default: min(1000, cloud sizes))")
    p.add_argument("--midpoint-mode", choices=("ot", "mixture"), default="ot", help="Baseline 1 pairing (default: ot)")

    p = sub.add_parser("replay", help="rerun a command from its manifest and compare outputs")
    p.add_argument("manifest")
    p.add_argument("--out", help="output directory (default: the manifest's, overwritten)")
    p.add_argument("-v", "--verbose", action="store_true")
    return parser


# ---------------------------------------------------------------------------
# Manifest / replay


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _versions() -> dict:
    import ot
    import scipy

    return {
        "python": platform.python_version(),
        "numpy": np.__version__,
        "scipy": scipy.__version__,
        "pot": ot.__version__,
        "uotfrechet": __version__,
    }


def _threads(args) -> int | None:
    n = getattr(args, "threads", None)
    if n is None and os.environ.get(THREADS_ENV):
        try:
            n = int(os.environ[THREADS_ENV])
        except ValueError:
            raise ConfigError(f"${THREADS_ENV} must be an integer") from None
    if n is not None and n < 1:
        raise ConfigError("thread cap must be >= 1")
    return n


def _run(args, argv: list[str]) -> int:
    cfg = resolve_config(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    dump_config(cfg, out / "config.json")
    threads = _threads(args)
    if threads is not None:
        from threadpoolctl import threadpool_limits

        ctx = threadpool_limits(limits=threads)
    else:
        ctx = nullcontext()
    start = time.perf_counter()
    with ctx:
        written, traces = COMMANDS[args.command](args, cfg, out)
    manifest = {
        "command": args.command,
        "argv": argv,
        "config": cfg.to_dict(),
        "seeds": {"root": cfg.seed, "derivation": SEED_DERIVATION},
        "threads": threads,
        "versions": _versions(),
        "wall_time_s": time.perf_counter() - start,
        "outputs": {p.name: _sha256(p) for p in written},
        "traces": traces,
    }
    with open(out / "manifest.json", "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, default=_json_default)
        fh.write("\n")
    return EXIT_OK


def _json_default(obj):
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    raise TypeError(type(obj).__name__)


def _replay(args) -> int:
    try:
        with open(args.manifest, encoding="utf-8") as fh:
            manifest = json.load(fh)
        argv = list(manifest["argv"])
        recorded = manifest["outputs"]
    except (OSError, ValueError, KeyError) as exc:
        raise DataError(f"cannot read manifest {args.manifest}: {exc}", "manifest") from None
    # The recorded config carries every setting, so replay through it
    # rather than a --config path that may have moved since.
    out = Path(args.out) if args.out else Path(args.manifest).parent
    out.mkdir(parents=True, exist_ok=True)
    frozen = out / "replay_config.json"
    frozen.write_text(json.dumps(manifest["config"], indent=2) + "\n", encoding="utf-8")
    argv = _set_flag(_set_flag(argv, "--out", str(out)), "--config", str(frozen))
    if manifest.get("threads") is not None:
        argv = _set_flag(argv, "--threads", str(manifest["threads"]))
    code = main(argv)
    if code != EXIT_OK:
        return code
    mismatched = [name for name, digest in recorded.items() if not (out / name).is_file() or _sha256(out / name) != digest]
    for name in recorded:
        print(f"{name}: {'MISMATCH' if name in mismatched else 'identical'}")
    if mismatched:
        _error_line("ReproducibilityError", EXIT_NUMERICAL, f"outputs differ: {mismatched}")
        return EXIT_NUMERICAL
    return EXIT_OK


def _set_flag(argv: list[str], flag: str, value: str) -> list[str]:
    argv = list(argv)
    if flag in argv:
        argv[argv.index(flag) + 1] = value
    else:
        argv[1:1] = [flag, value]
    return argv


def _error_line(kind: str, code: int, message: str, extra: dict | None = None) -> None:
    payload = {"error": kind, "exit_code": code, "message": message, **(extra or {})}
    print(json.dumps(payload), file=sys.stderr)


def main(argv: Sequence[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args = build_parser().parse_args(argv)
    except ConfigError as exc:
        _error_line("ConfigError", EXIT_CONFIG, str(exc))
        return EXIT_CONFIG
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "replay":
            return _replay(args)
        return _run(args, argv)
    except ConfigError as exc:
        _error_line("ConfigError", EXIT_CONFIG, str(exc))
        return EXIT_CONFIG
    except DataError as exc:
        _error_line("DataError", EXIT_DATA, str(exc), {"code": exc.code})
        return EXIT_DATA
    except (NonFiniteError, DegenerateDesignError, FloatingPointError) as exc:
        _error_line(type(exc).__name__, EXIT_NUMERICAL, str(exc))
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
