"""Experiment harness: instance generation, seeded runs, comparison tables and invariant checks."""
from __future__ import annotations

import csv
import io
import json
import os
import tempfile
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .config import ExperimentConfig, resolve_path
from .driver import (Knobs, RunLog, load_runlog, run_baseline_replan, run_doerl_linear, run_doerl_tabular,
                     schedule_doubling, schedule_known_T)
from .estimation import OracleRate, perturbed_class
from .linear import (LINEAR_SCHEMA, LinearLayerEstimate, LinearMdp, TrustedStructureLinear, load_linear,
                     normalization_constant, perturbed_linear_class, random_linear_mdp, tabular_to_linear,
                     trusted_covariance, trusted_set_linear)
from .mdp import (MDP_SCHEMA, InvariantError, Policy, TabularMdp, check_simplex_rows, load_mdp,
                  occupancy_forward, optimal_value, random_mdp, value_backward)
from .policy_opt import (BarrierObjectiveSpec, LogDetObjectiveSpec, SolverConfig, barrier_value_grad,
                         logdet_value_grad)
from .svg import comparison_svg, downsample_log
from .trusted import LayerEstimate, TrustedStructure, build_trusted_set, trusted_occupancy

COMPARISON_COLUMNS = ("agent", "horizon", "T", "seeds", "cum_regret_mean", "cum_regret_median",
                      "cum_regret_q25", "cum_regret_q75", "estimation_calls", "planning_calls", "wall_time_s")


def _rng(fixed: int | None, run_seed: int, stream: int) -> np.random.Generator:
    return np.random.default_rng(fixed if fixed is not None else [run_seed, stream])


def load_environment(path: str | Path) -> TabularMdp | LinearMdp:
    doc = json.loads(Path(path).read_text())
    schema = doc.get("schema")
    if schema == MDP_SCHEMA:
        return load_mdp(path)
    if schema == LINEAR_SCHEMA:
        return load_linear(path)
    raise ValueError(f"{path}: unknown environment schema {schema!r}")


def build_instance(config: ExperimentConfig, config_path: str | Path | None, seed: int):
    """Ground truth and model class for one run seed."""
    env = config.environment
    if env.file is not None:
        truth = load_environment(resolve_path(config_path or ".", env.file))
    else:
        g = env.generator
        rng = _rng(g.seed, seed, 0)
        if config.mode == "linear":
            truth = random_linear_mdp(g.num_states, g.num_actions, g.feature_dim, g.horizon, rng,
                                      concentration=g.concentration)
        else:
            truth = random_mdp(g.num_states, g.num_actions, g.horizon, rng, concentration=g.concentration)
    if config.mode == "linear" and isinstance(truth, TabularMdp):
        truth = tabular_to_linear(truth)
    if config.mode != "linear" and isinstance(truth, LinearMdp):
        truth = truth.to_tabular()
    mc = config.model_class
    rng = _rng(mc.seed, seed, 1)
    if isinstance(truth, LinearMdp):
        model_class = perturbed_linear_class(truth, mc.size, mc.perturbation, rng, mc.realizable)
    else:
        model_class = perturbed_class(truth, mc.size, mc.perturbation, rng, mc.realizable)
    return truth, model_class


def make_schedule(config: ExperimentConfig, horizon: int):
    s = config.schedule
    return schedule_known_T(s.known_T, horizon) if s.known_T is not None else schedule_doubling(s.doubling, horizon)


def run_one(config: ExperimentConfig, config_path: str | Path | None, seed: int) -> RunLog:
    truth, model_class = build_instance(config, config_path, seed)
    H = truth.horizon
    if config.mode == "baseline":
        T = config.schedule.rounds // H * H
        log = run_baseline_replan(truth, model_class, T, config.baseline.epsilon, seed)
    else:
        schedule = make_schedule(config, H)
        solver = SolverConfig(**config.solver.model_dump())
        knobs = Knobs(**config.knobs.model_dump())
        rate = OracleRate(config.c_est)
        runner = run_doerl_linear if config.mode == "linear" else run_doerl_tabular
        log = runner(truth, model_class, schedule, config.delta, solver, knobs, seed, rate)
    log.meta["mode"] = config.mode
    return log


def atomic_write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="\n") as f:
            f.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def run_file_stem(seed: int) -> str:
    return f"run_seed{seed}"


def _run_and_write(args) -> tuple[int, float]:
    config, config_path, seed, out_dir = args
    start = time.perf_counter()
    log = run_one(config, config_path, seed)
    elapsed = time.perf_counter() - start
    stem = Path(out_dir) / run_file_stem(seed)
    atomic_write(stem.with_suffix(".csv"), log.csv_text())
    atomic_write(stem.with_suffix(".json"), log.sidecar_text())
    return seed, elapsed


def run_config(config: ExperimentConfig, config_path: str | Path | None, out_dir: str | Path,
               workers: int = 1) -> dict[int, float]:
    """Run every seed and write one CSV and JSON sidecar per seed. Returns wall time per seed.

    Wall times go to ``timings.json`` so the per-seed files stay reproducible.
    """
    out_dir = Path(out_dir)
    jobs = [(config, str(config_path) if config_path else None, s, str(out_dir)) for s in config.seeds]
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_run_and_write, jobs))
    else:
        results = [_run_and_write(j) for j in jobs]
    timings = {seed: t for seed, t in sorted(results)}
    atomic_write(out_dir / "timings.json", json.dumps({str(k): v for k, v in timings.items()}, indent=2) + "\n")
    return timings


@dataclass
class ComparisonRow:
    agent: str
    horizon: int
    T: int
    seeds: int
    cum_regret: np.ndarray
    estimation_calls: int
    planning_calls: int
    wall_time_s: float | None

    def cells(self) -> list:
        q25, med, q75 = np.quantile(self.cum_regret, [0.25, 0.5, 0.75])
        wall = "" if self.wall_time_s is None else f"{self.wall_time_s:.3f}"
        return [self.agent, self.horizon, self.T, self.seeds, repr(float(np.mean(self.cum_regret))),
                repr(float(med)), repr(float(q25)), repr(float(q75)), self.estimation_calls,
                self.planning_calls, wall]


class CompareError(ValueError):
    pass


def _collect(run_dir: Path) -> list[tuple[int, RunLog]]:
    paths = sorted(run_dir.glob("run_seed*.csv"))
    if not paths:
        raise CompareError(f"{run_dir}: no run logs found")
    out = []
    for p in paths:
        try:
            out.append((int(p.stem[len("run_seed"):]), load_runlog(p)))
        except (OSError, ValueError, KeyError, IndexError, TypeError) as exc:
            raise CompareError(f"{p}: corrupt run log ({exc})") from exc
    return out


def compare_runs(run_dirs: list[str | Path]) -> tuple[list[ComparisonRow], dict]:
    groups: dict[tuple[str, int], list[RunLog]] = {}
    walls: dict[tuple[str, int], list[float]] = {}
    for d in run_dirs:
        d = Path(d)
        timing_path = d / "timings.json"
        timings = json.loads(timing_path.read_text()) if timing_path.exists() else {}
        for seed, log in _collect(d):
            key = (log.agent, log.total_rounds)
            groups.setdefault(key, []).append(log)
            if str(seed) in timings:
                walls.setdefault(key, []).append(float(timings[str(seed)]))
    horizons = {log.horizon for logs in groups.values() for log in logs}
    if len(horizons) != 1:
        raise CompareError(f"refusing to aggregate runs with different horizons {sorted(horizons)}")
    rows, curves = [], {}
    for (agent, T), logs in sorted(groups.items()):
        counts = {(l.counters.estimation_calls, l.counters.planning_calls) for l in logs}
        if len(counts) != 1:
            raise CompareError(f"{agent} T={T}: oracle counts differ across seeds {sorted(counts)}")
        est, plan = counts.pop()
        cum = np.array([l.final_cumulative_regret for l in logs])
        w = walls.get((agent, T))
        rows.append(ComparisonRow(agent, logs[0].horizon, T, len(logs), cum, est, plan,
                                  float(np.mean(w)) if w and len(w) == len(logs) else None))
        median_curve = np.median(np.stack([l.cumulative_regret for l in logs]), axis=0)
        curves[f"{agent} T={T}"] = downsample_log(np.arange(1, T + 1), median_curve)
    return rows, curves


def comparison_csv(rows: list[ComparisonRow]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(COMPARISON_COLUMNS)
    for r in rows:
        w.writerow(r.cells())
    return buf.getvalue()


def write_comparison(run_dirs: list[str | Path], out_dir: str | Path) -> tuple[Path, Path]:
    rows, curves = compare_runs(run_dirs)
    out_dir = Path(out_dir)
    csv_path, svg_path = out_dir / "comparison.csv", out_dir / "comparison.svg"
    atomic_write(csv_path, comparison_csv(rows))
    bars = {f"{r.agent}\nT={r.T}".replace("\n", " "): (r.estimation_calls, r.planning_calls) for r in rows}
    atomic_write(svg_path, comparison_svg(curves, bars, "Median cumulative regret"))
    return csv_path, svg_path


# --- fast invariant suite -------------------------------------------------------------------------

@dataclass
class CheckResult:
    invariant: str
    passed: bool
    detail: str = ""


def _fd_rel_error(fn, probs: np.ndarray, step: float = 1e-6) -> float:
    _, grad = fn(probs)
    fd = np.zeros_like(probs)
    for idx in np.ndindex(probs.shape):
        up, dn = probs.copy(), probs.copy()
        up[idx] += step
        dn[idx] -= step
        fd[idx] = (fn(up)[0] - fn(dn)[0]) / (2 * step)
    return float(np.max(np.abs(fd - grad)) / max(1e-12, float(np.max(np.abs(grad)))))


def validate_config(config: ExperimentConfig, config_path: str | Path | None) -> list[CheckResult]:
    """Fast structural and numerical checks on the configured instance (first seed)."""
    results: list[CheckResult] = []

    def check(name: str, fn) -> None:
        try:
            ok, detail = fn()
        except InvariantError as exc:
            ok, detail = False, str(exc)
        results.append(CheckResult(name, bool(ok), detail))

    try:
        truth, model_class = build_instance(config, config_path, config.seeds[0])
    except InvariantError as exc:
        return [CheckResult(exc.invariant, False, str(exc))]
    linear = truth if isinstance(truth, LinearMdp) else tabular_to_linear(truth)
    tab = truth.to_tabular() if isinstance(truth, LinearMdp) else truth
    H, S, A = tab.dims
    rng = np.random.default_rng([config.seeds[0], 99])
    policies = [Policy.random(H, S, A, rng, concentration=2.0) for _ in range(3)]

    def simplex():
        check_simplex_rows(tab.transitions, "transitions")
        for m in model_class:
            t = m.to_tabular() if isinstance(m, LinearMdp) else m
            check_simplex_rows(t.transitions, "class transitions")
        return True, "transition and policy rows are distributions"

    def occupancy_mass():
        worst = max(float(np.max(np.abs(occupancy_forward(tab, p).sum(axis=(1, 2)) - 1))) for p in policies)
        return worst <= 1e-12, f"max layer-mass error {worst:.2e}"

    def duality():
        worst = max(abs(value_backward(tab, p)[0] - float(np.sum(occupancy_forward(tab, p) * tab.mean_rewards)))
                    for p in policies)
        return worst <= 1e-12, f"max gap {worst:.2e}"

    def planning():
        v_star = optimal_value(tab)
        worst = max(value_backward(tab, p)[0] - v_star for p in policies)
        return worst <= 1e-12, f"max excess of a random policy over the plan {worst:.2e}"

    def embedding():
        emb = tabular_to_linear(tab).to_tabular()
        gap = max(abs(value_backward(emb, p)[0] - value_backward(tab, p)[0]) for p in policies)
        gap = max(gap, float(np.max(np.abs(linear.to_tabular().transitions - tab.transitions))))
        return gap <= 1e-12, f"max disagreement {gap:.2e}"

    zeta = 50.0
    structure = TrustedStructure.empty(H, S, A, tab.start_state, zeta)
    lin_structure = TrustedStructureLinear.empty(linear.features, tab.start_state, zeta)
    for j in range(H):
        structure = structure.with_estimate(LayerEstimate.from_model(tab, j))
        lin_structure = lin_structure.with_estimate(LinearLayerEstimate.from_model(linear, j))
        if j + 1 < H:
            structure = structure.with_trusted_set(build_trusted_set(structure, policies[0], j))
            lin_structure = lin_structure.with_trusted_set(trusted_set_linear(lin_structure, policies[0], j))

    def domination():
        worst = max(float(np.max(trusted_occupancy(structure, p, H - 1) - occupancy_forward(tab, p))) for p in policies)
        return worst <= 1e-12, f"max excess {worst:.2e}"

    def covariance_psd():
        worst = min(float(np.min(np.linalg.eigvalsh(trusted_covariance(lin_structure, p, j))))
                    for p in policies for j in range(H))
        return worst >= -1e-10, f"min eigenvalue {worst:.2e}"

    prev = model_class[0].to_tabular() if isinstance(model_class[0], LinearMdp) else model_class[0]

    def barrier_gradient():
        spec = BarrierObjectiveSpec(prev, structure, H - 1, eta=10.0, beta=0.05)
        worst = max(_fd_rel_error(lambda q: barrier_value_grad(spec, q), p.probs) for p in policies)
        return worst < 1e-5, f"max relative error {worst:.2e}"

    def logdet_gradient():
        spec = LogDetObjectiveSpec(prev, lin_structure, H - 1, eta=10.0, beta=0.05)
        worst = max(_fd_rel_error(lambda q: logdet_value_grad(spec, q), p.probs) for p in policies)
        return worst < 1e-5, f"max relative error {worst:.2e}"

    def normalization():
        rep = normalization_constant(linear)
        return rep.passes, f"c_M = {rep.c_M:.6g}"

    for name, fn in [("simplex", simplex), ("occupancy-mass", occupancy_mass), ("value-duality", duality),
                     ("planning-optimality", planning), ("embedding-faithfulness", embedding),
                     ("trusted-domination", domination), ("covariance-psd", covariance_psd),
                     ("barrier-gradient", barrier_gradient), ("logdet-gradient", logdet_gradient)]:
        check(name, fn)
    if config.mode == "linear":
        check("normalization", normalization)
    return results

