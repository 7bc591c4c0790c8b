"""
Monte Carlo experiments: ground-truth optimum, seeded replicas per arm,
summaries, bound comparisons and byte-stable exports.
"""

from __future__ import annotations

import csv
import io
import itertools
import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from ..bounds import BoundInputs, BoundReport, build_report, estimate_E0
from ..controller import ControllerConfig, RunTrace, run
from ..errors import ConfigError, DistOFOError, EmptyInput, SolverStalled
from ..netgraph import METROPOLIS_VARIANT
from ..objective import BoxConstraint, QuadraticModel, Region, estimate_constants, remark2_scale
from .config import Arm, RunConfig, build_fixture, resolve_constraint


@dataclass
class Optimum:
    u: np.ndarray
    residual: float
    method: str
    cross_check: float | None = None


def _kkt_residual(model: QuadraticModel, constraint: BoxConstraint | None, u) -> float:
    g = model.gradient(u)
    if constraint is None:
        return float(np.max(np.abs(g)))
    return float(np.max(np.abs(u - constraint.project(u - g))))


def _projected_gradient(model: QuadraticModel, constraint: BoxConstraint, u0,
                        tol: float = 1e-13, max_iter: int = 1_000_000) -> np.ndarray:
    hess = model.hessian()
    step = 1.0 / float(np.linalg.eigvalsh(hess)[-1])
    u = constraint.project(u0)
    for _ in range(max_iter):
        nxt = constraint.project(u - step * model.gradient(u))
        if np.max(np.abs(nxt - u)) <= tol:
            return nxt
        u = nxt
    raise SolverStalled(f"projected gradient did not converge in {max_iter} iterations")


def _active_set(model: QuadraticModel, constraint: BoxConstraint) -> np.ndarray | None:
    """Enumerate free / lower / upper for every coordinate; None when too large."""
    n = model.n
    if n > 10:
        return None
    hess = model.hessian()
    g0 = model.gradient(np.zeros(n))
    best = None
    for pattern in itertools.product((0, 1, 2), repeat=n):
        pattern = np.array(pattern)
        if np.any((pattern == 1) & ~np.isfinite(constraint.lower)) or \
                np.any((pattern == 2) & ~np.isfinite(constraint.upper)):
            continue
        u = np.where(pattern == 1, constraint.lower, np.where(pattern == 2, constraint.upper, 0.0))
        free = pattern == 0
        if np.any(free):
            rhs = -(g0[free] + hess[np.ix_(free, ~free)] @ u[~free])
            u[free] = np.linalg.solve(hess[np.ix_(free, free)], rhs)
        if np.max(np.maximum(constraint.lower - u, u - constraint.upper)) > 1e-12:
            continue
        g = model.gradient(u)
        # multipliers: gradient pushes against the active bound
        if np.any(g[pattern == 1] < -1e-10) or np.any(g[pattern == 2] > 1e-10):
            continue
        best = constraint.project(u)
        break
    return best


def solve_optimum(model: QuadraticModel, constraint: BoxConstraint | None = None,
                  u0=None) -> Optimum:
    """Minimizer of the quadratic reduced objective, optionally over a box.

    The unconstrained case is a linear solve. The constrained case runs
    projected gradient and cross-checks it by active-set enumeration.
    """
    n = model.n
    hess = model.hessian()
    if constraint is None or not (np.any(np.isfinite(constraint.lower))
                                  or np.any(np.isfinite(constraint.upper))):
        u = np.linalg.solve(hess, -model.gradient(np.zeros(n)))
        res = _kkt_residual(model, None, u)
        if res > 1e-10:
            raise SolverStalled(f"gradient residual {res:.3g} at the linear-solve optimum")
        return Optimum(u, res, "linear solve")
    start = np.zeros(n) if u0 is None else np.asarray(u0, dtype=float)
    u = _projected_gradient(model, constraint, start)
    res = _kkt_residual(model, constraint, u)
    if res > 1e-8:
        raise SolverStalled(f"KKT residual {res:.3g} after projected gradient")
    other = _active_set(model, constraint)
    diff = None
    if other is not None:
        diff = float(np.max(np.abs(other - u)))
        if diff > 1e-8:
            raise SolverStalled(f"projected gradient and active set disagree by {diff:.3g}")
    return Optimum(u, res, "projected gradient + active set", diff)


@dataclass
class Problem:
    """Resolved optimization problem of a config: optimum, constraint, model."""

    model: QuadraticModel
    constraint: BoxConstraint | None
    u_star: np.ndarray
    u_star_free: np.ndarray
    optimum: Optimum


def resolve_problem(cfg: RunConfig) -> Problem:
    fx = build_fixture(cfg)
    model = fx.reduced.quadratic_model()
    if model is None:
        raise ConfigError("the optimum solver needs quadratic tracking objectives")
    free = solve_optimum(model)
    constraint = resolve_constraint(cfg, fx.plant.dim, free.u)
    if constraint is not None and not constraint.contains(fx.u0):
        raise ConfigError("experiment.u0 lies outside the constraint box")
    opt = solve_optimum(model, constraint, fx.u0) if constraint is not None else free
    return Problem(model, constraint, opt.u, free.u, opt)


def controller_config(cfg: RunConfig, arm: Arm, seed: int,
                      constraint: BoxConstraint | None) -> ControllerConfig:
    c = cfg.controller
    return ControllerConfig(
        eta=c["eta"], delta=c["delta"], tau=arm.tau, horizon=c["horizon"], mode=cfg.mode,
        constraint=constraint, seed=seed, baseline=arm.baseline,
        centralized_delay=c["centralized_delay"])


def run_replica(cfg: RunConfig, arm: Arm, seed: int, problem: Problem | None = None) -> RunTrace:
    """One seeded closed-loop run on a fresh plant instance."""
    problem = problem or resolve_problem(cfg)
    fx = build_fixture(cfg)
    ctrl = controller_config(cfg, arm, seed, problem.constraint)
    meta = {
        "arm": arm.label,
        "config_hash": cfg.config_hash(),
        "plant": fx.plant.metadata() if hasattr(fx.plant, "metadata") else {"kind": "affine"},
        "metropolis_variant": METROPOLIS_VARIANT,
    }
    if problem.constraint is not None:
        meta["constraint_lower"] = problem.constraint.lower.tolist()
        meta["constraint_upper"] = problem.constraint.upper.tolist()
    return run(ctrl, fx.plant, fx.objectives, fx.weights(arm.tau), fx.u0, problem.u_star, meta)


def thin(trace: RunTrace, stride: int) -> RunTrace:
    """Keep every ``stride``-th row (and the last); drop the per-iteration logs.

    The kept iteration indices go to ``metadata["k"]``.
    """
    ks = _rows(trace, stride)
    empty = np.empty((0, trace.n))
    meta = dict(trace.metadata)
    meta["k"] = ks
    return RunTrace(trace.u[ks], trace.probe[ks], trace.objective[ks], trace.rel_err[ks],
                    trace.e_norm[ks], empty, empty, empty, empty, trace.u_star, meta)


def _violation(trace: RunTrace, constraint: BoxConstraint | None) -> float:
    if constraint is None:
        return 0.0
    return max(0.0, float(np.max(np.maximum(constraint.lower - trace.u,
                                            trace.u - constraint.upper))))


def _replica_task(args):
    raw, source, base_dir, problem, arm, seed = args
    cfg = RunConfig.from_dict(raw, source, Path(base_dir))
    try:
        trace = run_replica(cfg, arm, seed, problem)
    except (DistOFOError, ValueError) as exc:
        return arm.label, seed, None, None, f"{type(exc).__name__}: {exc}"
    trace.metadata["max_violation"] = _violation(trace, problem.constraint)
    return arm.label, seed, thin(trace, int(cfg.experiment["stride"])), trace.rel_err, None


@dataclass
class ArmResult:
    """Replicas of one arm: thinned traces plus full relative-error curves."""

    arm: Arm
    seeds: list[int]
    traces: list[RunTrace]
    rel_errs: list[np.ndarray] = field(default_factory=list)
    failures: list[dict] = field(default_factory=list)

    def rel_err_matrix(self) -> np.ndarray:
        return np.array(self.rel_errs)

    def mean_rel_err(self) -> np.ndarray:
        return self.rel_err_matrix().mean(axis=0)

    def plateaus(self, fraction: float) -> np.ndarray:
        """Per-replica mean relative error over the last ``fraction`` of iterations."""
        errs = self.rel_err_matrix()
        start = plateau_start(errs.shape[1] - 1, fraction)
        return errs[:, start:].mean(axis=1)


def plateau_start(horizon: int, fraction: float) -> int:
    return int(math.floor((1.0 - fraction) * horizon))


@dataclass
class ExperimentResult:
    config: RunConfig
    problem: Problem
    arms: dict[str, ArmResult]

    def summary(self) -> dict:
        frac = float(self.config.experiment["plateau_fraction"])
        out = {
            "config_hash": self.config.config_hash(),
            "u_star": self.problem.u_star.tolist(),
            "optimum_method": self.problem.optimum.method,
            "plateau_fraction": frac,
            "arms": {},
        }
        if self.problem.constraint is not None:
            out["constraint_upper"] = self.problem.constraint.upper.tolist()
            out["constraint_lower"] = self.problem.constraint.lower.tolist()
        for label, res in self.arms.items():
            entry: dict = {"seeds": res.seeds, "failures": res.failures}
            if res.traces:
                mean = res.mean_rel_err()
                start = plateau_start(len(mean) - 1, frac)
                plate = res.plateaus(frac)
                entry.update(
                    initial_mean_rel_err=float(mean[0]),
                    final_mean_rel_err=float(mean[-1]),
                    mean_curve_plateau=float(mean[start:].mean()),
                    decrease_factor=float(mean[0] / mean[start:].mean()),
                    median_plateau=float(np.median(plate)),
                    plateaus=plate.tolist(),
                    final_mean_u=np.mean([t.u[-1] for t in res.traces], axis=0).tolist(),
                )
                if self.problem.constraint is not None:
                    entry["max_violation"] = max(t.metadata["max_violation"] for t in res.traces)
            out["arms"][label] = entry
        return out


def run_experiment(cfg: RunConfig, arms: Sequence[str] | None = None,
                   seeds: Sequence[int] | None = None) -> ExperimentResult:
    """All replicas of every arm; failed replicas go to the failure ledger."""
    arm_list = [Arm.parse(a) for a in arms] if arms else cfg.arms
    seed_list = list(seeds) if seeds is not None else cfg.seeds
    problem = resolve_problem(cfg)
    tasks = [(cfg.raw, cfg.source, str(cfg.base_dir), problem, arm, s) for arm in arm_list for s in seed_list]
    workers = int(cfg.experiment["workers"])
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            outputs = list(pool.map(_replica_task, tasks))
    else:
        outputs = [_replica_task(t) for t in tasks]

    results = {arm.label: ArmResult(arm, [], []) for arm in arm_list}
    for label, seed, trace, rel_err, err in outputs:  # pool.map keeps submission order
        res = results[label]
        if err is None:
            res.seeds.append(seed)
            res.traces.append(trace)
            res.rel_errs.append(rel_err)
        else:
            res.failures.append({"seed": seed, "error": err})
    return ExperimentResult(cfg, problem, results)


# bounds

def bound_inputs(cfg: RunConfig, problem: Problem | None = None) -> tuple[BoundInputs, dict]:
    """Bound-calculator inputs for a config, plus provenance notes."""
    problem = problem or resolve_problem(cfg)
    fx = build_fixture(cfg)
    b = cfg.bounds
    c = cfg.controller
    tau = int(b["tau"])
    eta = float(b["eta"] if b["eta"] is not None else c["eta"])
    delta = float(b["delta"] if b["delta"] is not None else c["delta"])
    red = fx.reduced
    if problem.constraint is not None and problem.constraint.is_bounded:
        region = Region.around_box(problem.constraint, delta)
    else:
        radius = b["region_radius"]
        if radius is None:
            radius = 2.0 * float(np.linalg.norm(problem.u_star - fx.u0))
        region = Region.around_point(fx.u0, radius, delta)
    consts = estimate_constants(red, region)
    scale = remark2_scale(consts.m) if b["scale"] == "auto" else float(b["scale"])
    consts = consts.scaled(scale)
    objs = [o.scaled(scale) for o in fx.objectives]
    weights = fx.weights(tau)
    e0 = estimate_E0(fx.plant, objs, weights, fx.u0, delta, tau, int(b["e0_samples"]),
                     np.random.default_rng(int(b["e0_seed"])))
    diameter = problem.constraint.diameter if problem.constraint is not None else None
    inputs = BoundInputs.from_weights(weights, tau, eta, delta, consts.L0, consts.L1, consts.m,
                                      E0=e0.value, diameter=diameter, epsilon=b["epsilon"])
    provenance = {
        "scale_c": scale,
        "E0_method": e0.method,
        "E0_cell": list(e0.cell),
        "E0_samples": e0.samples,
        "constants_region": consts.region,
        "constants_estimated": consts.estimated,
        "metropolis_variant": weights.variant,
    }
    return inputs, provenance


def bound_report(cfg: RunConfig) -> BoundReport:
    inputs, prov = bound_inputs(cfg)
    return build_report(inputs, provenance=prov)


@dataclass
class Comparison:
    """Empirical mean gap vs. theoretical curve for ``k >= tau + 1``."""

    k: np.ndarray
    empirical: np.ndarray
    stderr: np.ndarray
    bound: np.ndarray
    squared: bool
    banner: str | None = None

    @property
    def dominated(self) -> np.ndarray | None:
        if self.banner is not None:
            return None
        return self.empirical - 3.0 * self.stderr <= self.bound

    @property
    def verdict(self) -> bool | None:
        d = self.dominated
        return None if d is None else bool(np.all(d))

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        if self.banner:
            w.writerow([f"# {self.banner}"])
        w.writerow(["k", "empirical", "stderr", "bound", "dominated"])
        dom = self.dominated
        for i, k in enumerate(self.k):
            w.writerow([int(k), repr(float(self.empirical[i])), repr(float(self.stderr[i])),
                        repr(float(self.bound[i])), "" if dom is None else int(dom[i])])
        return buf.getvalue()


def compare_bounds(traces: Sequence[RunTrace], report: BoundReport,
                   which: str = "theorem1") -> Comparison:
    """Mean ``|u_(k+1) - u*|^2`` (theorem1) or ``|u_(k+1) - u*|`` (theorem2) against the bound.

    The initial gap ``E|u_(tau+1) - u*|`` (squared for theorem1) is measured
    from the traces themselves.
    """
    if not traces:
        raise EmptyInput("no traces to compare")
    if which not in ("theorem1", "theorem2"):
        raise ValueError("which must be 'theorem1' or 'theorem2'")
    squared = which == "theorem1"
    tau = int(report.inputs["tau"])
    dist = np.array([np.linalg.norm(t.u - t.u_star, axis=1) for t in traces])
    gaps = dist ** 2 if squared else dist
    horizon = gaps.shape[1] - 1
    ks = np.arange(tau + 1, horizon)
    emp = gaps[:, ks + 1].mean(axis=0)
    se = gaps[:, ks + 1].std(axis=0, ddof=1) / math.sqrt(len(traces)) if len(traces) > 1 \
        else np.zeros(len(ks))
    init_gap = float(gaps[:, tau + 1].mean()) if horizon >= tau + 1 else 0.0
    rho = report.rho if squared else report.rho_prime
    limit = report.limit_unconstrained if squared else report.limit_constrained
    banner = None
    if not report.hypotheses_ok or rho is None or limit is None:
        banner = "hypotheses violated: " + "; ".join(report.violations or ["bound unavailable"])
        curve = np.full(len(ks), np.nan)
    else:
        curve = rho ** (ks - tau) * init_gap + limit
    return Comparison(ks, emp, se, curve, squared, banner)


# export

def _fmt(x) -> str:
    return repr(float(x))


def _rows(trace: RunTrace, stride: int) -> list[int]:
    """Row positions to write; a thinned trace keeps all of its rows."""
    if "k" in trace.metadata:
        return list(range(len(trace.u)))
    ks = list(range(0, trace.horizon + 1, stride))
    if ks[-1] != trace.horizon:
        ks.append(trace.horizon)
    return ks


def trace_csv(trace: RunTrace, stride: int = 1) -> str:
    n = trace.n
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["k"] + [f"u_{i}" for i in range(n)] + [f"probe_{i}" for i in range(n)]
               + ["objective", "rel_err", "e_norm"])
    labels = trace.metadata.get("k")
    for k in _rows(trace, stride):
        w.writerow([k if labels is None else labels[k]] + [_fmt(x) for x in trace.u[k]] + [_fmt(x) for x in trace.probe[k]]
                   + [_fmt(trace.objective[k]), _fmt(trace.rel_err[k]), _fmt(trace.e_norm[k])])
    return buf.getvalue()


def _jsonable(x):
    if isinstance(x, dict):
        return {str(k): _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, np.ndarray):
        return _jsonable(x.tolist())
    if isinstance(x, (np.floating, float)):
        x = float(x)
        return x if math.isfinite(x) else None
    if isinstance(x, np.integer):
        return int(x)
    return x


def dumps(obj) -> str:
    return json.dumps(_jsonable(obj), indent=2, sort_keys=True) + "\n"


def trace_json(trace: RunTrace, stride: int = 1) -> str:
    ks = _rows(trace, stride)
    return dumps({
        "metadata": trace.metadata,
        "u_star": trace.u_star,
        "k": [trace.metadata["k"][i] for i in ks] if "k" in trace.metadata else ks,
        "u": trace.u[ks], "probe": trace.probe[ks], "objective": trace.objective[ks],
        "rel_err": trace.rel_err[ks], "e_norm": trace.e_norm[ks],
    })


def export(obj, path: str | Path, fmt: str = "csv", stride: int = 1) -> Path:
    """Write a trace, bound report or comparison as ``csv`` or ``json``."""
    path = Path(path)
    if isinstance(obj, RunTrace):
        text = trace_csv(obj, stride) if fmt == "csv" else trace_json(obj, stride)
    elif isinstance(obj, BoundReport):
        text = obj.to_text() if fmt == "csv" else dumps(obj.to_dict())
    elif isinstance(obj, Comparison):
        text = obj.to_csv() if fmt == "csv" else dumps({
            "k": obj.k, "empirical": obj.empirical, "stderr": obj.stderr, "bound": obj.bound,
            "banner": obj.banner, "verdict": obj.verdict})
    else:
        raise TypeError(f"cannot export {type(obj).__name__}")
    if fmt not in ("csv", "json"):
        raise ValueError("fmt must be 'csv' or 'json'")
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text)
    return path


def write_experiment(result: ExperimentResult, out_dir: str | Path) -> list[Path]:
    """Per-replica traces, per-arm mean curves and ``summary.json``."""
    out = Path(out_dir)
    written = []
    for label, res in result.arms.items():
        slug = label.replace("=", "")
        for seed, trace in zip(res.seeds, res.traces):
            written.append(export(trace, out / slug / f"seed{seed}.csv", "csv"))
        if res.traces:
            mean = res.mean_rel_err()
            errs = res.rel_err_matrix()
            se = errs.std(axis=0, ddof=1) / math.sqrt(len(errs)) if len(errs) > 1 \
                else np.zeros_like(mean)
            med = np.median(errs, axis=0)
            mean_u = np.mean([t.u for t in res.traces], axis=0)
            ks = res.traces[0].metadata["k"]
            buf = io.StringIO()
            w = csv.writer(buf, lineterminator="\n")
            w.writerow(["k", "mean_rel_err", "median_rel_err", "se_rel_err"]
                       + [f"mean_u_{i}" for i in range(mean_u.shape[1])])
            for row, k in enumerate(ks):
                w.writerow([k, _fmt(mean[k]), _fmt(med[k]), _fmt(se[k])]
                           + [_fmt(x) for x in mean_u[row]])
            path = out / f"{slug}_mean.csv"
            path.parent.mkdir(parents=True, exist_ok=True)
            path.write_text(buf.getvalue())
            written.append(path)
    path = out / "summary.json"
    path.write_text(dumps(result.summary()))
    written.append(path)
    return written
