"""Learning-accelerated consensus ADMM and its evaluation harness.

The accelerated run records the dual/consensus iterates of the first K
iterations, feeds the window through a trained sequence model, and
overwrites the duals and consensus values with the denormalized
predictions exactly once, at iteration K.  All later iterations are
standard updates.  Injection can never make a subproblem infeasible:
the injected values enter only the linear objective term.

Evaluation runs each fresh load scenario twice over the same horizon —
once plain, once with injection — and aggregates final relative
cost errors against the centralized optimum.
"""

from __future__ import annotations

import io
import warnings
from dataclasses import dataclass

import numpy as np

from .admm import AdmmConfig, AdmmEngine, primal_residual
from .cases import Network, solve_centralized
from .gru import TrainedModel
from .partition import ConsensusLayout, PartitionProblem
from .scenario import LoadScenario, sample_load


class AccelError(RuntimeError):
    pass


@dataclass
class InjectionRecord:
    iteration: int           # K, the iteration at which values were overwritten
    duals: np.ndarray        # injected lambda-hat
    consensus: np.ndarray    # injected theta-bar-hat
    pre_residual: float      # primal residual just before injection
    post_residual: float     # primal residual after the next iteration


@dataclass
class EvalRecord:
    sample: int
    scenario: LoadScenario
    ref_objective: float
    baseline_cost: np.ndarray        # per-iteration cost, both same length
    accelerated_cost: np.ndarray
    baseline_residual: np.ndarray
    accelerated_residual: np.ndarray


@dataclass
class EvalSummary:
    records: list[EvalRecord]
    baseline_log10: np.ndarray       # final log10 relative error per sample
    accelerated_log10: np.ndarray
    bin_edges: np.ndarray
    baseline_hist: np.ndarray
    accelerated_hist: np.ndarray
    residual_mean: dict              # method -> per-iteration mean
    residual_std: dict
    failures: int


def relative_cost_error(cost: float, ref: float) -> float:
    return abs(cost - ref) / abs(ref)


LOG10_FLOOR = -16.0    # reported for exactly zero error


def log10_error(cost: float, ref: float) -> float:
    err = relative_cost_error(cost, ref)
    return float(np.log10(err)) if err > 0 else LOG10_FLOOR


def histogram_log10(values, bin_edges=None) -> tuple[np.ndarray, np.ndarray]:
    """Counts per bin; values below the first edge clamp into bin 0,
    values at or above the last edge fall into the last bin."""
    if bin_edges is None:
        bin_edges = np.arange(-8.0, 1.0)    # unit-width bins over [-8, 0]
    edges = np.asarray(bin_edges, float)
    counts = np.zeros(edges.size - 1, dtype=int)
    for v in np.asarray(values, float):
        b = int(np.searchsorted(edges, v, side="right")) - 1
        counts[min(max(b, 0), counts.size - 1)] += 1
    return counts, edges


def la_admm_solve(engine: AdmmEngine, model: TrainedModel,
                  load: np.ndarray) -> tuple:
    """Accelerated run: returns (AdmmResult, Trajectory, InjectionRecord).

    The model's input window K must fit inside the iteration budget; the
    model must have been trained on this engine's consensus layout.
    """
    layout = engine.layout
    if model.fingerprint != layout.fingerprint():
        raise AccelError(
            "model was trained for a different consensus layout "
            f"({model.fingerprint} != {layout.fingerprint()})")
    window = model.window
    if window >= engine.config.max_iter:
        raise AccelError(
            f"injection step {window} does not fit in the "
            f"{engine.config.max_iter}-iteration budget")
    recorded = []
    record = {}

    def hook(state):
        if 1 <= state.k <= window:
            recorded.append(np.concatenate([state.duals, state.consensus]))
        if state.k == window and "iteration" not in record:
            pred = model.predict(np.stack(recorded))
            duals = pred[:layout.width]
            consensus = pred[layout.width:]
            record.update(
                iteration=window, duals=duals.copy(),
                consensus=consensus.copy(),
                pre_residual=primal_residual(layout, state.copies,
                                             state.owner_values,
                                             state.consensus))
            state.duals[:] = duals
            state.consensus[:] = consensus

    result, trajectory = engine.run(load, hook=hook)
    if "iteration" not in record:
        raise AccelError(
            f"run finished in {result.iterations} iterations, before the "
            f"injection step {window}")
    injection = InjectionRecord(
        post_residual=float(trajectory.residuals[window]), **record)
    return result, trajectory, injection


def evaluate(net: Network, problems: list[PartitionProblem],
             layout: ConsensusLayout, model: TrainedModel, n_tests: int,
             seed: int, rho: float, iters: int = 100,
             bin_edges=None, progress=None) -> EvalSummary:
    """Paired baseline/accelerated runs on fresh scenarios."""
    config = AdmmConfig(rho=rho, max_iter=iters, primal_tol=0.0)
    engine = AdmmEngine(net, problems, layout, config)
    records = []
    failures = 0
    for i in range(n_tests):
        rng = np.random.default_rng([seed, i])
        scenario = sample_load(net, rng)
        try:
            ref = solve_centralized(net, scenario.load)
            if ref.status != "optimal":
                raise AccelError(f"centralized reference: {ref.status}")
            base_result, base_traj = engine.run(scenario.load)
            _, acc_traj, _ = la_admm_solve(engine, model, scenario.load)
        except (AccelError, RuntimeError) as exc:
            failures += 1
            warnings.warn(f"evaluation sample {i} excluded: {exc}")
            continue
        records.append(EvalRecord(
            sample=i, scenario=scenario, ref_objective=ref.objective,
            baseline_cost=base_traj.costs.copy(),
            accelerated_cost=acc_traj.costs.copy(),
            baseline_residual=base_traj.residuals.copy(),
            accelerated_residual=acc_traj.residuals.copy()))
        if progress is not None:
            progress(len(records), n_tests)
    base_log = np.array([log10_error(r.baseline_cost[-1], r.ref_objective)
                         for r in records])
    acc_log = np.array([log10_error(r.accelerated_cost[-1], r.ref_objective)
                        for r in records])
    base_hist, edges = histogram_log10(base_log, bin_edges)
    acc_hist, _ = histogram_log10(acc_log, edges)
    if records:
        base_res = np.stack([r.baseline_residual for r in records])
        acc_res = np.stack([r.accelerated_residual for r in records])
        mean = {"baseline": base_res.mean(axis=0),
                "accelerated": acc_res.mean(axis=0)}
        std = {"baseline": base_res.std(axis=0),
               "accelerated": acc_res.std(axis=0)}
    else:
        mean = {"baseline": np.zeros(0), "accelerated": np.zeros(0)}
        std = {"baseline": np.zeros(0), "accelerated": np.zeros(0)}
    return EvalSummary(records, base_log, acc_log, edges, base_hist, acc_hist,
                       mean, std, failures)


def sign_test_p_value(wins: int, trials: int) -> float:
    """One-sided binomial sign test: P[X >= wins] for X ~ Bin(trials, 1/2)."""
    if trials == 0:
        return 1.0
    from math import comb
    tail = sum(comb(trials, k) for k in range(wins, trials + 1))
    return tail / 2 ** trials


def samples_csv(summary: EvalSummary) -> str:
    buf = io.StringIO()
    buf.write("sample,iter,method,cost,rel_err,primal_residual\n")
    for r in summary.records:
        for method, costs, residuals in (
                ("baseline", r.baseline_cost, r.baseline_residual),
                ("accelerated", r.accelerated_cost, r.accelerated_residual)):
            for k in range(costs.size):
                rel = relative_cost_error(costs[k], r.ref_objective)
                buf.write(f"{r.sample},{k + 1},{method},{costs[k]:.17g},"
                          f"{rel:.17g},{residuals[k]:.17g}\n")
    return buf.getvalue()


def summary_csv(summary: EvalSummary) -> str:
    buf = io.StringIO()
    buf.write("section,method,index,value,extra\n")
    for i in range(summary.bin_edges.size - 1):
        lo, hi = summary.bin_edges[i], summary.bin_edges[i + 1]
        buf.write(f"histogram,baseline,{i},{summary.baseline_hist[i]},"
                  f"[{lo:g};{hi:g})\n")
        buf.write(f"histogram,accelerated,{i},{summary.accelerated_hist[i]},"
                  f"[{lo:g};{hi:g})\n")
    for method in ("baseline", "accelerated"):
        mean = summary.residual_mean[method]
        std = summary.residual_std[method]
        for k in range(mean.size):
            buf.write(f"residual,{method},{k + 1},{mean[k]:.17g},"
                      f"{std[k]:.17g}\n")
    return buf.getvalue()
