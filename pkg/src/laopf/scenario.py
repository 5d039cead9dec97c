"""Random load scenarios and training-set generation.

A scenario scales the nominal bus loads by per-bus factors chi*(1+xi_i)
with xi_i ~ U(0,1) drawn first and the global factor chi drawn uniformly
from an interval small enough that total demand stays below a fixed
fraction of total generation capacity.

A training sample pairs the dual/consensus iterates of the first K ADMM
iterations with the converged values of the same run, plus the
centralized optimum as a cost reference.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass

import numpy as np

from .admm import AdmmConfig, AdmmEngine
from .cases import Network, solve_centralized
from .partition import ConsensusLayout, PartitionProblem

CAPACITY_MARGIN = 0.9

TARGET_PRIMAL_TOL = 1e-6
TARGET_MAX_ITER = 5000


class ScenarioError(RuntimeError):
    pass


@dataclass
class LoadScenario:
    load: np.ndarray     # per-unit bus demand
    chi: float           # global scaling draw
    xi: np.ndarray       # per-bus scaling draws


@dataclass
class Sample:
    inputs: np.ndarray       # (K, F): iterations 1..K, duals then consensus
    target: np.ndarray       # (F,): converged duals then consensus
    scenario: LoadScenario
    ref_objective: float     # centralized optimum for the same load


@dataclass
class Dataset:
    samples: list[Sample]
    fingerprint: str
    window: int              # K
    seed: int
    system: str
    n_lambda: int = 0        # leading dual entries in each feature vector

    def __len__(self):
        return len(self.samples)

    def to_arrays(self):
        """Stack into training arrays (inputs (N,K,F), targets (N,F))."""
        inputs = np.stack([s.inputs for s in self.samples])
        targets = np.stack([s.target for s in self.samples])
        return inputs, targets


def sample_load(net: Network, rng: np.random.Generator,
                chi: float | None = None,
                xi: np.ndarray | None = None) -> LoadScenario:
    """Draw a random feasible load; chi/xi may be forced for testing."""
    base = net.base_load_vector()
    if base.sum() <= 0:
        raise ScenarioError("network has no nominal load to scale")
    if xi is None:
        xi = rng.uniform(0.0, 1.0, size=net.n_bus)
    if chi is None:
        chi_max = min(1.0, CAPACITY_MARGIN * net.total_capacity()
                      / float((1.0 + xi) @ base))
        chi = float(rng.uniform(0.0, chi_max))
    return LoadScenario(chi * (1.0 + xi) * base, chi, np.asarray(xi, float))


def generate_sample(net: Network, engine: AdmmEngine,
                    scenario: LoadScenario, window: int) -> Sample:
    """Record the first `window` iterations and run the same trajectory to
    convergence for targets.  Raises ScenarioError when the run does not
    reach the target tolerance within the iteration budget."""
    if window > 10:
        raise ScenarioError("input window is limited to 10 iterations")
    if engine.layout.width == 0:
        raise ScenarioError("single-partition layout has no consensus "
                            "variables to learn")
    result, trajectory = engine.run(scenario.load)
    if not result.converged:
        raise ScenarioError(
            f"target run stopped at iteration {result.iterations} with "
            f"primal residual {result.primal_residual:.3e} "
            f"(tol {engine.config.primal_tol:g})")
    if result.iterations < window:
        raise ScenarioError(
            f"run converged in {result.iterations} iterations, shorter than "
            f"the {window}-iteration input window")
    target = np.concatenate([result.state.duals, result.state.consensus])
    ref = solve_centralized(net, scenario.load)
    if ref.status != "optimal":
        raise ScenarioError(f"centralized reference solve: {ref.status}")
    return Sample(trajectory.features[:window].copy(), target, scenario,
                  ref.objective)


def generate_dataset(net: Network, problems: list[PartitionProblem],
                     layout: ConsensusLayout, count: int, window: int,
                     seed: int, rho: float = 1.0,
                     system: str = "case",
                     progress=None) -> Dataset:
    """Seeded batch of samples; failed draws are replaced from later seeds
    until the retry budget runs out, then a partial dataset is returned
    with a warning."""
    config = AdmmConfig(rho=rho, max_iter=TARGET_MAX_ITER,
                        primal_tol=TARGET_PRIMAL_TOL)
    engine = AdmmEngine(net, problems, layout, config)
    samples = []
    budget = 2 * count + 10
    index = 0
    while len(samples) < count and index < budget:
        rng = np.random.default_rng([seed, index])
        index += 1
        scenario = sample_load(net, rng)
        try:
            samples.append(generate_sample(net, engine, scenario, window))
        except ScenarioError as exc:
            warnings.warn(f"sample draw {index - 1} excluded: {exc}")
            continue
        if progress is not None:
            progress(len(samples), count)
    if len(samples) < count:
        warnings.warn(f"retry budget exhausted: generated {len(samples)} of "
                      f"{count} samples")
    return Dataset(samples, layout.fingerprint(), window, seed, system,
                   layout.width)


# ---------------------------------------------------------------------------
# persistence: one JSON header line, then float64 sample rows

def write_dataset(path, ds: Dataset):
    if ds.samples:
        n_features = ds.samples[0].inputs.shape[1]
        n_bus = ds.samples[0].scenario.load.shape[0]
    else:
        n_features = n_bus = 0
    header = {
        "system": ds.system, "fingerprint": ds.fingerprint,
        "window": ds.window, "n_features": n_features, "n_bus": n_bus,
        "count": len(ds.samples), "seed": ds.seed, "n_lambda": ds.n_lambda,
    }
    with open(path, "wb") as fh:
        fh.write((json.dumps(header, sort_keys=True) + "\n").encode())
        for s in ds.samples:
            row = np.concatenate([
                s.inputs.ravel(), s.target, s.scenario.load, s.scenario.xi,
                [s.scenario.chi, s.ref_objective]])
            fh.write(row.astype("<f8").tobytes())


def read_dataset(path, expected_fingerprint: str | None = None) -> Dataset:
    try:
        with open(path, "rb") as fh:
            header = json.loads(fh.readline())
            raw = fh.read()
    except (OSError, ValueError) as exc:
        raise ScenarioError(f"cannot read dataset {path}: {exc}") from exc
    if expected_fingerprint is not None \
            and header["fingerprint"] != expected_fingerprint:
        raise ScenarioError(
            "dataset was generated for a different consensus layout "
            f"({header['fingerprint']} != {expected_fingerprint})")
    k, f, n_bus = header["window"], header["n_features"], header["n_bus"]
    row_len = k * f + f + 2 * n_bus + 2
    expected_bytes = header["count"] * row_len * 8
    if len(raw) != expected_bytes:
        raise ScenarioError(
            f"dataset {path} is truncated or corrupt: expected "
            f"{expected_bytes} payload bytes, found {len(raw)}")
    data = np.frombuffer(raw, dtype="<f8").reshape(header["count"], row_len)
    samples = []
    for row in data:
        pos = k * f
        inputs = row[:pos].reshape(k, f)
        target = row[pos:pos + f]
        pos += f
        load = row[pos:pos + n_bus]
        pos += n_bus
        xi = row[pos:pos + n_bus]
        pos += n_bus
        chi, ref = row[pos], row[pos + 1]
        samples.append(Sample(inputs.copy(), target.copy(),
                              LoadScenario(load.copy(), float(chi), xi.copy()),
                              float(ref)))
    return Dataset(samples, header["fingerprint"], k, header["seed"],
                   header["system"], header.get("n_lambda", 0))


def dataset_summary(ds: Dataset) -> str:
    lines = [f"system: {ds.system}",
             f"samples: {len(ds.samples)}",
             f"input window: {ds.window} iterations",
             f"layout fingerprint: {ds.fingerprint}",
             f"seed: {ds.seed}"]
    if ds.samples:
        lines.append(f"features per iteration: {ds.samples[0].inputs.shape[1]}")
        refs = np.array([s.ref_objective for s in ds.samples])
        lines.append(f"reference objective range: [{refs.min():.6g}, "
                     f"{refs.max():.6g}]")
    return "\n".join(lines)
