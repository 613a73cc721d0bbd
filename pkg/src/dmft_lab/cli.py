"""Run configuration, pipeline orchestration, and reproducible I/O.

Usage: dmft-lab <pipeline> --config <file> [--out <dir>] [--seed <u64>]
[--threads <n>]. Pipelines: simulate, dmft, dmft-linear, oracle, equilibrium,
compare, response. Every run writes kernels_<source>.csv (where applicable),
manifest.json, and (for compare) report.json into the output directory; the
env var DMFT_LAB_OUT overrides the output directory.
"""

from __future__ import annotations

import argparse
import concurrent.futures
import json
import os
import subprocess
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import dmft, equilibrium, mp_oracle, simulator
from .kernels import (
    KernelTable,
    compare_tables,
    config_hash,
    read_table_csv,
    write_table_csv,
)
from .model import ModelParams, sample_instance
from .priors import (
    ExpFamily,
    GaussianFixed,
    GaussianLocation,
    GaussianMeanMixture,
    GaussianWeightMixture,
    PriorSpec,
    SmoothHinge,
    Theta0Spec,
    polynomial_stats,
)

PIPELINES = ("simulate", "dmft", "dmft-linear", "oracle", "equilibrium", "compare", "response")

_DEFAULT_MARGINAL_TIMES = [1.0]


class ConfigError(ValueError):
    """Config validation failure; message lists every offending field."""


def _build_prior(cfg: dict, theta0_cfg: Optional[dict]) -> PriorSpec:
    fam = cfg.get("family")
    if fam == "gaussian_fixed":
        family = GaussianFixed(cfg["lam"])
    elif fam == "gaussian_location":
        family = GaussianLocation(cfg.get("scale", 1.0))
    elif fam == "gaussian_mean_mixture":
        family = GaussianMeanMixture(cfg["weights"], cfg["precisions"])
    elif fam == "gaussian_weight_mixture":
        family = GaussianWeightMixture(cfg["means"], cfg["precisions"])
    elif fam == "exp_family":
        family = ExpFamily(polynomial_stats(cfg["powers"]))
    else:
        raise ConfigError(f"prior.family: unknown family {fam!r}")
    k = family.dim_alpha
    alpha0 = np.asarray(cfg.get("alpha0", np.zeros(k)), dtype=float)
    alpha_star = np.asarray(cfg.get("alpha_star", alpha0), dtype=float)
    theta0 = Theta0Spec(**(theta0_cfg or {}))
    return PriorSpec(family, alpha0, alpha_star, theta0)


@dataclass
class RunConfig:
    pipeline: str
    raw: dict
    seed: Optional[int]
    out_dir: Path
    threads: int
    model: Optional[ModelParams] = None
    prior: Optional[PriorSpec] = None
    replicas: int = 0
    n_paths: int = 0
    quad_nodes: int = 400
    retain_every: int = 10
    response_steps: list = field(default_factory=list)
    tolerances: dict = field(default_factory=dict)
    compare_sources: list = field(default_factory=list)
    marginal_times: list = field(default_factory=lambda: list(_DEFAULT_MARGINAL_TIMES))

    @property
    def hash(self) -> str:
        return config_hash(self.raw)


def load_config(config, out_override=None, seed_override=None, threads_override=None) -> RunConfig:
    """Parse and validate a run config (JSON path or dict); collects all
    field errors before reporting."""
    if isinstance(config, dict):
        raw = json.loads(json.dumps(config))  # defensive copy, JSON-clean
    else:
        with open(config) as fh:
            raw = json.load(fh)
    errors: list[str] = []
    pipeline = raw.get("pipeline")
    if pipeline not in PIPELINES:
        errors.append(f"pipeline: must be one of {PIPELINES}, got {pipeline!r}")

    seed = seed_override if seed_override is not None else raw.get("seed")
    needs_seed = pipeline in ("simulate", "dmft", "response", "compare")
    if needs_seed and seed is None:
        errors.append("seed: required (explicit seeds only; no wall-clock seeding)")

    model = prior = None
    needs_model = pipeline in ("simulate", "dmft", "dmft-linear", "oracle", "response", "compare")
    if needs_model:
        mc = raw.get("model")
        if not isinstance(mc, dict):
            errors.append("model: required section")
        else:
            try:
                model = ModelParams(
                    n=mc["n"], d=mc["d"], sigma2=mc["sigma2"], beta=mc.get("beta", 1.0 / mc["sigma2"]),
                    gamma_step=mc["gamma"], horizon=mc["horizon"], delta=mc.get("delta"),
                )
            except (KeyError, ValueError) as exc:
                errors.append(f"model: {exc}")
        pc = raw.get("prior")
        if not isinstance(pc, dict):
            errors.append("prior: required section")
        else:
            try:
                prior = _build_prior(pc, raw.get("theta0"))
            except (ConfigError, KeyError, ValueError) as exc:
                errors.append(f"prior: {exc}")

    replicas = int(raw.get("replicas", 0))
    if pipeline in ("simulate", "response") and replicas < 1:
        errors.append("replicas: must be >= 1 for the simulate/response pipelines")
    if pipeline == "response" and not raw.get("response_steps"):
        errors.append("response_steps: required for the response pipeline")
    n_paths = int(raw.get("n_paths", 0))
    if pipeline == "dmft" and n_paths < 100:
        errors.append("n_paths: must be >= 100 for the dmft pipeline")
    if pipeline == "compare":
        cc = raw.get("compare", {})
        sources = cc.get("sources", [])
        allowed = ("simulate", "dmft", "dmft-mc", "dmft-linear", "oracle", "mp-oracle")
        if len(sources) != 2 or any(s not in allowed for s in sources):
            errors.append("compare.sources: exactly two of simulate|dmft|dmft-linear|oracle")
    if errors:
        raise ConfigError("invalid config:\n  " + "\n  ".join(errors))

    out = out_override or os.environ.get("DMFT_LAB_OUT") or raw.get("out", "out")
    threads = int(threads_override if threads_override is not None else raw.get("threads", 1))
    if threads < 1:
        raise ConfigError("threads: must be >= 1")
    cc = raw.get("compare", {})
    return RunConfig(
        pipeline=pipeline,
        raw=raw,
        seed=None if seed is None else int(seed),
        out_dir=Path(out),
        threads=threads,
        model=model,
        prior=prior,
        replicas=replicas,
        n_paths=n_paths,
        quad_nodes=int(raw.get("quad_nodes", 400)),
        retain_every=int(raw.get("retain_every", 10)),
        response_steps=list(raw.get("response_steps", [])),
        tolerances=dict(cc.get("tolerances", raw.get("tolerances", {}))),
        compare_sources=list(cc.get("sources", [])),
        marginal_times=list(cc.get("marginal_times", raw.get("marginal_times", _DEFAULT_MARGINAL_TIMES))),
    )


def _git_describe() -> str:
    try:
        out = subprocess.run(
            ["git", "describe", "--always", "--dirty"],
            capture_output=True, text=True, timeout=5, cwd=Path(__file__).parent,
        )
        return out.stdout.strip() or "unknown"
    except Exception:
        return "unknown"


def _write_manifest(cfg: RunConfig, source: str, files: list[str], extra: Optional[dict] = None):
    manifest = {
        "config_hash": cfg.hash,
        "pipeline": cfg.pipeline,
        "source": source,
        "seed": cfg.seed,
        "threads": cfg.threads,
        "replicas": cfg.replicas,
        "n_paths": cfg.n_paths,
        "model": cfg.raw.get("model"),
        "prior": cfg.raw.get("prior"),
        "build": _git_describe(),
        "files": files,
    }
    manifest.update(extra or {})
    path = cfg.out_dir / "manifest.json"
    with open(path, "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return path


def _replica_seeds(seed: int, replicas: int) -> list[int]:
    return [seed * 1000 + r for r in range(replicas)]


def _run_simulate(cfg: RunConfig, with_response: bool):
    params, prior = cfg.model, cfg.prior
    seeds = _replica_seeds(cfg.seed, cfg.replicas)

    def one(rs: int):
        inst = sample_instance(params, prior, seed=rs, design=cfg.raw.get("design", "gaussian"))
        traj = simulator.evolve(inst, prior, params, seed=rs, retain_every=cfg.retain_every)
        traces = None
        if with_response and cfg.response_steps:
            traces = simulator.response_traces(
                traj if traj.full else None, inst, prior, params, cfg.response_steps,
                method=cfg.raw.get("response_method", "exact-product"),
                n_probes=int(cfg.raw.get("n_probes", 32)), seed=rs,
            )
        return inst, traj, traces

    if cfg.threads > 1:
        with concurrent.futures.ThreadPoolExecutor(max_workers=cfg.threads) as pool:
            results = list(pool.map(one, seeds))
    else:
        results = [one(rs) for rs in seeds]
    instances = [r[0] for r in results]
    trajs = [r[1] for r in results]
    table = simulator.empirical_kernels(trajs, instances, params)
    if with_response and cfg.response_steps:
        traces = simulator.average_response_traces([r[2] for r in results])
        simulator.attach_response(table, traces)
    marginals = {}
    for t in cfg.marginal_times:
        idx = _time_index(trajs[0].times, t, strict=False)
        if idx is not None:
            marginals[t] = np.concatenate([tr.theta_path[idx] for tr in trajs])
    return table, marginals


def _time_index(times: np.ndarray, t: float, strict: bool = True):
    idx = int(np.argmin(np.abs(times - t)))
    if abs(times[idx] - t) > 1e-9:
        if strict:
            raise ConfigError(f"time {t} not on the retained grid")
        return None
    return idx


def _run_dmft(cfg: RunConfig):
    reg = _regularizer(cfg)
    res = dmft.solve_dmft(
        cfg.model, cfg.prior, n_paths=cfg.n_paths, seed=cfg.seed, regularizer=reg,
        response_budget_bytes=int(cfg.raw.get("response_budget_bytes", 2 * 1024**3)),
    )
    marginals = {}
    for t in cfg.marginal_times:
        try:
            _, th = dmft.dmft_marginal_samples(res, t, min(cfg.n_paths, 20000))
            marginals[t] = th
        except ValueError:
            pass
    return res.table, marginals


def _regularizer(cfg: RunConfig) -> Optional[SmoothHinge]:
    rc = cfg.raw.get("regularizer")
    if not rc:
        return None
    return SmoothHinge(D=float(rc.get("D", 10.0)), eps=float(rc.get("eps", 1.0)))


def _oracle_pieces(cfg: RunConfig):
    params, prior = cfg.model, cfg.prior
    if not isinstance(prior.family, GaussianFixed):
        raise ConfigError("the oracle pipeline requires the gaussian_fixed prior")
    if abs(params.beta * params.sigma2 - 1.0) > 1e-12:
        raise ConfigError("the oracle closed forms require beta = 1/sigma2")
    oracle = mp_oracle.OracleParams(
        lam=prior.family.lam,
        sigma2=params.sigma2,
        delta=params.delta,
        # the closed forms tolerate a misspecified prior: the true second
        # moment may be overridden independently of the nominal precision
        tau_star2=float(cfg.raw.get("tau_star2", prior.family.second_moment())),
    )
    law = mp_oracle.mp_quadrature(params.delta, cfg.quad_nodes)
    return oracle, law


def _run_oracle(cfg: RunConfig) -> KernelTable:
    oracle, law = _oracle_pieces(cfg)
    times = cfg.raw.get("compare", {}).get("times") or cfg.raw.get("times")
    if times is None:
        times = cfg.model.gamma_step * np.arange(0, cfg.model.n_steps + 1, cfg.retain_every)
    return mp_oracle.oracle_table(np.asarray(times, dtype=float), oracle, law)


def _run_equilibrium(cfg: RunConfig) -> dict:
    ec = cfg.raw.get("equilibrium", {})
    if "g_star" in ec:
        g_star = _build_prior(ec["g_star"], None)
        g = _build_prior(ec.get("g", ec["g_star"]), None)
        delta = float(ec["delta"])
        sigma2 = float(ec["sigma2"])
    else:
        if cfg.model is None or cfg.prior is None:
            raise ConfigError("equilibrium: needs either an 'equilibrium' section or model+prior")
        g_star = PriorSpec(cfg.prior.family, cfg.prior.alpha_star, cfg.prior.alpha_star)
        g = cfg.prior
        delta, sigma2 = cfg.model.delta, cfg.model.sigma2
    sol = equilibrium.solve_fixed_point(
        delta, sigma2, g_star, g,
        tol=float(ec.get("tol", 1e-10)), n_gh=int(ec.get("n_gh", 64)),
    )
    out = sol.to_dict()
    sweep = ec.get("sweep_sigma2")
    if sweep:
        rows = ["param,omega,omega_star,mse,mse_star,ymse,free_energy"]
        for s2 in sweep:
            so = equilibrium.solve_fixed_point(delta, float(s2), g_star, g, n_gh=int(ec.get("n_gh", 64)))
            rows.append(
                ",".join(
                    "%.17g" % v
                    for v in (s2, so.omega, so.omega_star, so.mse, so.mse_star, so.ymse, so.free_energy)
                )
            )
        with open(cfg.out_dir / "sweep.csv", "w") as fh:
            fh.write("\n".join(rows) + "\n")
    return out


def _compute_source(cfg: RunConfig, source: str):
    """Compute one comparison source in memory: (table, marginal samples)."""
    if source == "simulate":
        return _run_simulate(cfg, with_response=bool(cfg.response_steps))
    if source in ("dmft", "dmft-mc"):
        return _run_dmft(cfg)
    if source == "dmft-linear":
        prior = cfg.prior
        if not isinstance(prior.family, GaussianFixed):
            raise ConfigError("dmft-linear requires the gaussian_fixed prior")
        table = dmft.linear_gaussian_dmft(cfg.model, prior.family.lam, prior.family.second_moment())
        return table, {}
    if source in ("oracle", "mp-oracle"):
        return _run_oracle(cfg), {}
    raise ConfigError(f"unknown compare source {source!r}")


def _run_compare(cfg: RunConfig) -> dict:
    from .kernels import restrict_to_times

    tables = []
    marginal_sets = []
    compare_times = cfg.raw.get("compare", {}).get("times")
    for source in cfg.compare_sources:
        table, marg = _compute_source(cfg, source)
        tables.append(table)
        marginal_sets.append(marg)
        write_table_csv(table, cfg.out_dir / f"kernels_{table.source}.csv")
    if compare_times:
        tables = [restrict_to_times(t, compare_times) for t in tables]
    report = compare_tables(tables[0], tables[1], cfg.tolerances)
    w2_tol = cfg.tolerances.get("w2")
    for t in cfg.marginal_times:
        a = marginal_sets[0].get(t)
        b = marginal_sets[1].get(t)
        if a is None or b is None:
            continue
        ra, rb = simulator.resample_to_common_size(a, b)
        w2 = simulator.wasserstein2_1d(ra, rb)
        report.w2_marginals[str(t)] = w2
        if w2_tol is not None and w2 > w2_tol:
            report.passed = False
    report.w2_tolerance = w2_tol
    return report.to_dict()


def run(config_path, out=None, seed=None, threads=None) -> int:
    """Execute the configured pipeline; returns the process exit status."""
    try:
        cfg = load_config(config_path, out, seed, threads)
    except ConfigError as exc:
        print(exc, file=sys.stderr)
        return 2
    cfg.out_dir.mkdir(parents=True, exist_ok=True)
    files: list[str] = []
    extra: dict = {}
    status = 0

    if cfg.pipeline == "simulate":
        table, _ = _run_simulate(cfg, with_response=bool(cfg.response_steps))
        path = cfg.out_dir / "kernels_simulate.csv"
        write_table_csv(table, path)
        files.append(path.name)
        source = "simulate"
        extra["replica_seed_rule"] = "seed*1000 + replica"
    elif cfg.pipeline == "response":
        table, _ = _run_simulate(cfg, with_response=True)
        path = cfg.out_dir / "kernels_simulate.csv"
        write_table_csv(table, path)
        files.append(path.name)
        source = "simulate"
    elif cfg.pipeline == "dmft":
        table, _ = _run_dmft(cfg)
        path = cfg.out_dir / "kernels_dmft-mc.csv"
        write_table_csv(table, path)
        files.append(path.name)
        source = "dmft-mc"
    elif cfg.pipeline == "dmft-linear":
        table, _ = _compute_source(cfg, "dmft-linear")
        path = cfg.out_dir / "kernels_dmft-linear.csv"
        write_table_csv(table, path)
        files.append(path.name)
        source = "dmft-linear"
    elif cfg.pipeline == "oracle":
        table = _run_oracle(cfg)
        path = cfg.out_dir / "kernels_mp-oracle.csv"
        write_table_csv(table, path)
        files.append(path.name)
        source = "mp-oracle"
    elif cfg.pipeline == "equilibrium":
        sol = _run_equilibrium(cfg)
        with open(cfg.out_dir / "equilibrium.json", "w") as fh:
            json.dump(sol, fh, indent=2, sort_keys=True)
            fh.write("\n")
        files.append("equilibrium.json")
        source = "equilibrium"
    elif cfg.pipeline == "compare":
        report = _run_compare(cfg)
        with open(cfg.out_dir / "report.json", "w") as fh:
            json.dump(report, fh, indent=2, sort_keys=True)
            fh.write("\n")
        files.append("report.json")
        source = "compare"
        extra["report_passed"] = report["passed"]
        status = 0 if report["passed"] else 1
    else:  # pragma: no cover
        raise AssertionError(cfg.pipeline)

    _write_manifest(cfg, source, files, extra)
    return status


def load_artifact(out_dir) -> tuple[KernelTable, dict]:
    """Read back a written kernel table and its manifest."""
    out_dir = Path(out_dir)
    with open(out_dir / "manifest.json") as fh:
        manifest = json.load(fh)
    csvs = [f for f in manifest["files"] if f.startswith("kernels_")]
    if not csvs:
        raise FileNotFoundError("artifact contains no kernel CSV")
    return read_table_csv(out_dir / csvs[0]), manifest


def compare_artifacts(dir_a, dir_b, tolerances=None):
    """Compare two on-disk artifacts; refuses mixed model parameters."""
    ta, ma = load_artifact(dir_a)
    tb, mb = load_artifact(dir_b)
    if ma.get("model") != mb.get("model"):
        raise ConfigError("refusing to compare artifacts with different model parameters")
    return compare_tables(ta, tb, tolerances)


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="dmft-lab", description=__doc__)
    parser.add_argument("pipeline", choices=PIPELINES)
    parser.add_argument("--config", required=True)
    parser.add_argument("--out", default=None)
    parser.add_argument("--seed", type=int, default=None)
    parser.add_argument("--threads", type=int, default=None)
    args = parser.parse_args(argv)
    with open(args.config) as fh:
        raw = json.load(fh)
    if raw.get("pipeline") not in (None, args.pipeline):
        print(
            f"config pipeline {raw.get('pipeline')!r} overridden by CLI {args.pipeline!r}",
            file=sys.stderr,
        )
    raw["pipeline"] = args.pipeline
    return run(raw, args.out, args.seed, args.threads)


if __name__ == "__main__":
    sys.exit(main())
