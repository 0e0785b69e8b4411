"""Batch command-line entry point.

Subcommands: ``solve`` (run a solver on a dataset or synthetic problem and
emit a trace), ``infer`` (posterior mean + pathwise samples with metrics),
``verify`` (theory-certification suites), ``bench`` (worker-scaling timings).
All randomness flows from one root seed through named substreams, so reruns
with an identical manifest reproduce every numeric output (wall-clock columns
are informational).
"""

from __future__ import annotations

import argparse
import hashlib
import json
import platform
import sys
import time
from pathlib import Path

import numpy as np
import scipy

from . import __version__
from .config import RunConfig, apply_overrides, kernel_from_dict, load_config
from .data import load_csv, standardize, train_test_split
from .dist import WorkerPool, col_dist_matmul, row_dist_matmul
from .errors import ConfigError, SapgpError
from .gp import ExactPrior, RandomFeatureMap, RandomFeaturePrior, mean_nll, pathwise_sample, rmse
from .kernels import KernelOracle, cross_kernel
from .randnla import apply_inv, apply_inv_plain, apply_inv_sqrt, rand_nystrom
from .rng import substream
from .solvers import solve
from .theory import (
    SyntheticSpectrumProblem,
    VerificationReport,
    verify_lemma2,
    verify_linear_rate,
    verify_theorem1,
)

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_DIVERGED = 2
EXIT_FAILED = 2

_SECTIONS = ("problem", "kernel", "run", "infer", "verify")


def _effective_config(args):
    tree = load_config(args.config) if args.config else {}
    unknown = set(tree) - set(_SECTIONS)
    if unknown:
        raise ConfigError(f"unknown config sections: {sorted(unknown)}")
    apply_overrides(tree, args.set or [])
    run = tree.setdefault("run", {})
    if args.workers is not None:
        run["num_workers"] = args.workers
    if args.seed is not None:
        run["seed"] = args.seed
    return tree


def _write_json(path, payload):
    with open(path, "w") as handle:
        json.dump(payload, handle, indent=2, sort_keys=True)
        handle.write("\n")


def _manifest(out_dir, command, tree, run_config, outputs):
    canonical = json.dumps(tree, sort_keys=True)
    payload = {
        "command": command,
        "config": tree,
        "config_sha256": hashlib.sha256(canonical.encode()).hexdigest(),
        "seed": run_config.seed,
        "outputs": sorted(outputs),
        "versions": {
            "python": platform.python_version(),
            "numpy": np.__version__,
            "scipy": scipy.__version__,
            "sapgp": __version__,
        },
    }
    _write_json(out_dir / "manifest.json", payload)


def _build_problem(tree, run_config):
    """Returns (oracle, y, dataset_or_None) from the problem section."""
    section = dict(tree.get("problem", {}))
    kind = section.pop("type", "synthetic")
    if kind == "synthetic":
        allowed = {"n", "beta", "response", "normalize", "basis"}
        unknown = set(section) - allowed
        if unknown:
            raise ConfigError(f"unknown synthetic problem keys: {sorted(unknown)}")
        problem = SyntheticSpectrumProblem.poly(
            int(section.get("n", 1000)),
            float(section.get("beta", 2.0)),
            run_config.lam,
            run_config.seed,
            response=section.get("response", "planted"),
            normalize=section.get("normalize", "none"),
            basis=section.get("basis", "haar"),
        )
        return problem.oracle, problem.y, None
    if kind == "csv":
        allowed = {"path", "target_column", "test_fraction"}
        unknown = set(section) - allowed
        if unknown:
            raise ConfigError(f"unknown csv problem keys: {sorted(unknown)}")
        if "path" not in section:
            raise ConfigError("csv problem needs a path")
        ds = load_csv(section["path"], section.get("target_column", -1))
        if "test_fraction" in section:
            train, test = train_test_split(ds, section["test_fraction"], run_config.seed)
        else:
            train, test = standardize(ds), None
        spec = kernel_from_dict(tree.get("kernel", {}), d=train.d)
        oracle = KernelOracle(spec, train.features, run_config.lam)
        return oracle, train.targets, (train, test, spec)
    raise ConfigError(f"unknown problem type {kind!r}")


def cmd_solve(args):
    tree = _effective_config(args)
    run_config = RunConfig.from_dict(tree.get("run", {}))
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    oracle, y, _ = _build_problem(tree, run_config)
    run_config.validate_for(oracle.n)
    result = solve(oracle, y, run_config)
    result.trace.to_csv(out_dir / "trace.csv")
    np.save(out_dir / "weights.npy", result.W)
    _write_json(
        out_dir / "result.json",
        {
            "diverged": result.diverged,
            "iterations": result.iterations,
            "passes": result.passes,
            "final_residual": result.trace.final_residual(),
        },
    )
    _manifest(out_dir, "solve", tree, run_config, ["trace.csv", "weights.npy", "result.json"])
    print(
        f"solve: iterations={result.iterations} passes={result.passes:.3f} "
        f"residual={result.trace.final_residual():.3e} diverged={result.diverged}"
    )
    return EXIT_DIVERGED if result.diverged else EXIT_OK


def cmd_infer(args):
    tree = _effective_config(args)
    run_config = RunConfig.from_dict(tree.get("run", {}))
    section = dict(tree.get("infer", {}))
    allowed = {"num_samples", "num_features"}
    unknown = set(section) - allowed
    if unknown:
        raise ConfigError(f"unknown infer keys: {sorted(unknown)}")
    num_samples = int(section.get("num_samples", 64))
    num_features = int(section.get("num_features", 2048))
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)

    oracle, y, bundle = _build_problem(tree, run_config)
    if bundle is None or bundle[1] is None:
        raise ConfigError("infer needs a csv problem with a test_fraction")
    train, test, spec = bundle
    run_config.validate_for(oracle.n)

    def solve_fn(orc, rhs):
        return solve(orc, rhs, run_config).W

    metrics = {}
    outputs = ["predictions.csv", "metrics.json"]
    if num_samples == 0:
        weights = solve_fn(oracle, y)
        mean_values = oracle.cross_matmul(test.features, weights)
        metrics["rmse"] = rmse(mean_values, test.targets)
        columns = [mean_values]
        header = "point_id,mean"
    else:
        rfm = RandomFeatureMap.sample(spec, num_features, substream(run_config.seed, "features"))
        prior = RandomFeaturePrior(rfm, train.features, test.features)
        samples = pathwise_sample(
            oracle, prior, y, num_samples, run_config.seed, solve_fn, Xstar=test.features
        )
        mean_values = samples.mean_values
        variance = samples.predictive_variance(run_config.lam)
        metrics["rmse"] = rmse(mean_values, test.targets)
        metrics["mean_nll"] = mean_nll(mean_values, variance, test.targets)
        columns = [mean_values, variance] + [samples.sample_values[:, i] for i in range(num_samples)]
        header = "point_id,mean,variance," + ",".join(
            f"sample_{i}" for i in range(num_samples)
        )
    with open(out_dir / "predictions.csv", "w") as handle:
        handle.write(header + "\n")
        for i in range(len(mean_values)):
            row = ",".join(repr(float(col[i])) for col in columns)
            handle.write(f"{i},{row}\n")
    _write_json(out_dir / "metrics.json", metrics)
    _manifest(out_dir, "infer", tree, run_config, outputs)
    print("infer: " + " ".join(f"{k}={v:.6f}" for k, v in sorted(metrics.items())))
    return EXIT_OK


def _verify_nystrom(seed):
    """Factor exactness and damped-application identities on random blocks."""
    rng = substream(seed, "verify")
    dim = 48
    G = rng.standard_normal((dim, dim))
    M = G @ G.T / dim
    omega = rng.standard_normal((dim, dim))
    factor = rand_nystrom(M @ omega, omega, dim)
    recon = (factor.U * factor.S) @ factor.U.T
    recon_err = np.linalg.norm(recon - M) / np.linalg.norm(M)
    rho = 0.3
    vec = rng.standard_normal(dim)
    dense = np.linalg.solve(recon + rho * np.eye(dim), vec)
    inv_err = np.linalg.norm(apply_inv(factor, rho, vec) - dense) / np.linalg.norm(dense)
    twice = apply_inv_sqrt(factor, rho, apply_inv_sqrt(factor, rho, vec))
    sqrt_err = np.linalg.norm(twice - apply_inv_plain(factor, rho, vec)) / np.linalg.norm(dense)
    checks = {
        "full_rank_reconstruction": (float(recon_err), 1e-8),
        "apply_inv_vs_dense": (float(inv_err), 1e-10),
        "apply_inv_sqrt_squared": (float(sqrt_err), 1e-10),
    }
    passed = all(err <= tol for err, tol in checks.values())
    return VerificationReport(
        name="nystrom",
        passed=passed,
        details={key: {"error": err, "tolerance": tol} for key, (err, tol) in checks.items()},
    )


def _verify_pathwise(seed):
    """Pathwise sample moments against the closed-form posterior (small n)."""
    rng = substream(seed, "verify")
    n, t, s, lam = 30, 5, 2000, 0.05
    X = rng.uniform(-2.0, 2.0, size=(n, 2))
    Xstar = rng.uniform(-2.0, 2.0, size=(t, 2))
    spec = kernel_from_dict({"family": "rbf", "lengthscales": [0.8, 0.8]})
    oracle = KernelOracle(spec, X, lam)
    y = rng.standard_normal(n)
    K = oracle.dense()
    cross = cross_kernel(spec, Xstar, X)
    A = K + lam * np.eye(n)
    exact_mean = cross @ np.linalg.solve(A, y)
    exact_cov = cross_kernel(spec, Xstar, Xstar) - cross @ np.linalg.solve(A, cross.T)

    prior = ExactPrior(spec, X, Xstar)

    def solve_fn(orc, rhs):
        return np.linalg.solve(A, rhs)

    samples = pathwise_sample(oracle, prior, y, s, seed, solve_fn, Xstar=Xstar)
    emp_mean = samples.sample_mean()
    emp_cov = samples.sample_covariance()
    mean_se = np.sqrt(np.diag(exact_cov) / s)
    mean_ok = np.all(np.abs(emp_mean - exact_mean) <= 4.0 * np.maximum(mean_se, 1e-12))
    var_prod = np.outer(np.diag(exact_cov), np.diag(exact_cov))
    cov_se = np.sqrt((var_prod + exact_cov**2) / s)
    cov_ok = np.all(np.abs(emp_cov - exact_cov) <= 4.0 * np.maximum(cov_se, 1e-12))
    return VerificationReport(
        name="pathwise",
        passed=bool(mean_ok and cov_ok),
        details={
            "mean_max_dev_sigmas": float(np.max(np.abs(emp_mean - exact_mean) / np.maximum(mean_se, 1e-12))),
            "cov_max_dev_sigmas": float(np.max(np.abs(emp_cov - exact_cov) / np.maximum(cov_se, 1e-12))),
            "num_samples": s,
        },
    )


def cmd_verify(args):
    tree = _effective_config(args)
    run_section = tree.get("run", {})
    seed = int(run_section.get("seed", 0))
    section = dict(tree.get("verify", {}))
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    suite = args.suite

    if suite == "lemma2":
        problem = SyntheticSpectrumProblem.poly(
            int(section.get("n", 64)), float(section.get("beta", 2.0)),
            float(section.get("lam", 1e-3)), seed,
        )
        report = verify_lemma2(
            problem, int(section.get("half_blocksize", 8)),
            int(section.get("num_samples", 5000)), seed,
        )
    elif suite == "theorem1":
        problem = SyntheticSpectrumProblem.poly(
            int(section.get("n", 256)), float(section.get("beta", 2.0)),
            float(section.get("lam", 1e-4)), seed,
        )
        report = verify_theorem1(
            problem, int(section.get("half_blocksize", 16)),
            int(section.get("num_top", 8)), int(section.get("trials", 100)),
            int(section.get("iters", 2000)), seed,
        )
    elif suite == "linear_rate":
        problem = SyntheticSpectrumProblem.poly(
            int(section.get("n", 256)), float(section.get("beta", 2.0)),
            float(section.get("lam", 1e-4)), seed,
        )
        report = verify_linear_rate(
            problem, int(section.get("half_blocksize", 16)),
            int(section.get("trials", 100)), int(section.get("iters", 512)), seed,
            projection_samples=int(section.get("projection_samples", 2000)),
        )
    elif suite == "nystrom":
        report = _verify_nystrom(seed)
    elif suite == "pathwise":
        report = _verify_pathwise(seed)
    else:
        print(f"error: unknown verify suite {suite!r}", file=sys.stderr)
        return EXIT_ERROR

    report.to_json(out_dir / f"report_{suite}.json")
    if report.gridpoints:
        report.to_csv(out_dir / f"report_{suite}.csv")
    run_config = RunConfig.from_dict({"seed": seed, "lam": run_section.get("lam", 1e-3)})
    _manifest(out_dir, f"verify:{suite}", tree, run_config, [f"report_{suite}.json"])
    print(f"verify {suite}: {'PASS' if report.passed else 'FAIL'}")
    return EXIT_OK if report.passed else EXIT_FAILED


def cmd_bench(args):
    tree = _effective_config(args)
    run_config = RunConfig.from_dict(tree.get("run", {}))
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    oracle, _, _ = _build_problem(tree, run_config)
    n = oracle.n
    rng = substream(run_config.seed, "bench")
    blocksize = min(max(n // 4, 1), n)
    block = np.sort(rng.choice(n, size=blocksize, replace=False))
    W = rng.standard_normal((n, 4))
    omega = rng.standard_normal((blocksize, min(32, blocksize)))
    counts = [w for w in (1, 2, 4, run_config.num_workers) if w <= max(4, run_config.num_workers)]
    counts = sorted(set(counts))
    ref_col = col_dist_matmul(oracle, W, block)
    ref_row = row_dist_matmul(oracle, omega, block)
    rows = []
    for workers in counts:
        with WorkerPool(workers) as pool:
            start = time.perf_counter()
            col = col_dist_matmul(oracle, W, block, pool)
            col_secs = time.perf_counter() - start
            start = time.perf_counter()
            row = row_dist_matmul(oracle, omega, block, pool)
            row_secs = time.perf_counter() - start
        rows.append(("col_dist_matmul", workers, col_secs, float(np.abs(col - ref_col).max())))
        rows.append(("row_dist_matmul", workers, row_secs, float(np.abs(row - ref_row).max())))
    with open(out_dir / "bench.csv", "w") as handle:
        handle.write("op,workers,seconds,max_abs_diff_vs_serial\n")
        for op, workers, secs, diff in rows:
            handle.write(f"{op},{workers},{secs!r},{diff!r}\n")
    _manifest(out_dir, "bench", tree, run_config, ["bench.csv"])
    for op, workers, secs, diff in rows:
        print(f"bench {op} workers={workers} seconds={secs:.4f} max_diff={diff:g}")
    return EXIT_OK


def build_parser():
    parser = argparse.ArgumentParser(prog="sapgp", description=__doc__)
    parser.add_argument("--config", help="JSON config file")
    parser.add_argument("--set", action="append", metavar="KEY=VALUE",
                        help="override a config entry (repeatable, dotted keys)")
    parser.add_argument("--workers", type=int, help="worker pool size")
    parser.add_argument("--seed", type=int, help="root seed")
    parser.add_argument("--out", default="out", help="output directory")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("solve", help="run a solver, write trace and weights")
    sub.add_parser("infer", help="posterior mean + samples, write predictions and metrics")
    verify = sub.add_parser("verify", help="run a certification suite")
    verify.add_argument("suite", help="lemma2|theorem1|linear_rate|nystrom|pathwise")
    sub.add_parser("bench", help="time partitioned products across worker counts")
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    handlers = {
        "solve": cmd_solve,
        "infer": cmd_infer,
        "verify": cmd_verify,
        "bench": cmd_bench,
    }
    try:
        return handlers[args.command](args)
    except (SapgpError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
