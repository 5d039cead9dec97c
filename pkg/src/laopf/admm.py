"""Consensus-ADMM engine for the partitioned dispatch problem.

Each iteration solves one QP per partition (in parallel in principle,
sequentially here), averages boundary-angle copies with the owner values
into consensus values, and updates the duals by the scaled disagreement.
A per-iteration hook may overwrite the dual/consensus vectors before the
next partition update; this is the injection point used for
learning-accelerated runs.

Dual bookkeeping: one dual per consensus entry (a holder's copy).  The
owner side of each entry carries the mirrored dual -lambda, which keeps
the per-slot duals summing to zero under zero initialization and makes
the iteration equivalent to standard consensus averaging ADMM.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .cases import Network
from .partition import ConsensusLayout, PartitionProblem
from .qp import QpProblem, QpSettings, QpSolver


class AdmmFailure(RuntimeError):
    """A partition subproblem failed to solve."""


@dataclass
class AdmmConfig:
    rho: float = 1.0
    max_iter: int = 100
    primal_tol: float = 1e-4        # max copy-consensus gap, radians
    record_trajectory: bool = True
    qp_settings: QpSettings = field(default_factory=QpSettings)

    def __post_init__(self):
        if self.rho <= 0:
            raise ValueError("rho must be positive")


@dataclass
class AdmmState:
    k: int
    duals: np.ndarray        # lambda per consensus entry, layout order
    consensus: np.ndarray    # theta-bar per (owner, bus) slot, layout order
    copies: np.ndarray       # holder copy value per consensus entry
    owner_values: np.ndarray  # owner's own angle per slot
    rho: float
    primal: list             # per-partition QP primal vectors
    cost: float = np.nan


@dataclass
class Trajectory:
    features: np.ndarray     # (iterations, width + n_pub): duals then consensus
    residuals: np.ndarray    # (iterations,)
    costs: np.ndarray        # (iterations,)

    def export_csv(self, n_lambda: int) -> str:
        """CSV rows: iter, primal_residual, cost, lambdas, thetabars."""
        n_cons = self.features.shape[1] - n_lambda
        header = (["iter", "primal_residual", "cost"]
                  + [f"lambda_{i}" for i in range(n_lambda)]
                  + [f"thetabar_{i}" for i in range(n_cons)])
        lines = [",".join(header)]
        for k in range(self.features.shape[0]):
            row = [str(k + 1), f"{self.residuals[k]:.17g}", f"{self.costs[k]:.17g}"]
            row += [f"{v:.17g}" for v in self.features[k]]
            lines.append(",".join(row))
        return "\n".join(lines) + "\n"


@dataclass
class AdmmResult:
    state: AdmmState
    converged: bool
    iterations: int
    cost: float
    primal_residual: float


# ---------------------------------------------------------------------------
# subproblem assembly

class _SubproblemTemplate:
    """Static QP structure for one partition; only q and balance rhs vary."""

    def __init__(self, net: Network, part: PartitionProblem,
                 layout: ConsensusLayout, rho: float):
        self.part = part
        self.rho = rho
        gens = part.local_generators
        internal = part.internal_buses
        self.n_gen = len(gens)
        self.n_bus = internal.size
        self.n_copy = part.held_entries.size
        nv = self.n_gen + self.n_bus + self.n_copy
        self.nv = nv
        self.cost_vec = np.array([net.generators[j].cost for j in gens])

        local_pos = {b: i for i, b in enumerate(internal)}
        copy_entries = part.held_entries
        copy_bus = [layout.entries[i].bus for i in copy_entries]
        copy_col_of_bus = {b: self.n_gen + self.n_bus + c
                           for c, b in enumerate(copy_bus)}
        self.copy_cols = np.arange(self.n_gen + self.n_bus, nv)
        self.copy_slots = layout.slot_of_entry[copy_entries]
        self.copy_entry_idx = copy_entries
        # owner side: local column and slot per owned entry
        self.owner_cols = np.array(
            [self.n_gen + local_pos[layout.entries[i].bus]
             for i in part.owned_entries], dtype=int)
        self.owner_slots = layout.slot_of_entry[part.owned_entries]
        self.owned_entry_idx = part.owned_entries
        # slot -> owner local column (for reading owner values)
        self.owned_slot_cols = {}
        for col, slot in zip(self.owner_cols, self.owner_slots):
            self.owned_slot_cols[int(slot)] = int(col)

        # constraints: balance | gen bounds | flow rows | reference pin
        n_bal = self.n_bus
        n_flow = len(part.flow_branches)
        n_ref = 1 if part.contains_reference else 0
        m = n_bal + self.n_gen + n_flow + n_ref
        A = np.zeros((m, nv))
        l = np.full(m, -np.inf)
        u = np.full(m, np.inf)
        A[:n_bal, self.n_gen:self.n_gen + self.n_bus] = part.H_local
        for u_id, (j_su, h_su) in part.couplings.items():
            for jc, b in enumerate(j_su):
                A[:n_bal, copy_col_of_bus[b]] += h_su[:, jc]
        for r, j in enumerate(gens):
            A[local_pos[net.generators[j].bus], r] = 1.0
        for r, j in enumerate(gens):
            A[n_bal + r, r] = 1.0
            l[n_bal + r] = net.generators[j].g_min
            u[n_bal + r] = net.generators[j].g_max
        for r, k in enumerate(part.flow_branches):
            row = n_bal + self.n_gen + r
            A[row, self.n_gen:self.n_gen + self.n_bus] = part.K_local[r]
            A[row, self.n_gen + self.n_bus:] = part.K_couplings[r]
            lim = net.branches[k].flow_limit
            if lim is not None:
                l[row], u[row] = -lim, lim
        if part.contains_reference:
            A[-1, self.n_gen + part.reference_bus_local] = 1.0
            l[-1] = u[-1] = 0.0
        self.A, self.l, self.u = A, l, u
        self.n_bal = n_bal

        P = np.zeros((nv, nv))
        diag = np.zeros(nv)
        np.add.at(diag, self.copy_cols, rho)
        np.add.at(diag, self.owner_cols, rho)
        np.fill_diagonal(P, diag)
        self.P = P

    def problem(self, load_local: np.ndarray) -> QpProblem:
        l, u = self.l.copy(), self.u.copy()
        l[:self.n_bal] = u[:self.n_bal] = load_local
        return QpProblem(self.P, self.linear(np.zeros(0), np.zeros(0),
                                             empty_ok=True), self.A, l, u)

    def linear(self, duals: np.ndarray, consensus: np.ndarray, empty_ok=False):
        q = np.zeros(self.nv)
        q[:self.n_gen] = self.cost_vec
        if empty_ok and duals.size == 0:
            return q
        q[self.copy_cols] += duals[self.copy_entry_idx] \
            - self.rho * consensus[self.copy_slots]
        np.add.at(q, self.owner_cols,
                  -duals[self.owned_entry_idx] - self.rho * consensus[self.owner_slots])
        return q


def build_subproblem(net: Network, part: PartitionProblem, layout: ConsensusLayout,
                     rho: float, load: np.ndarray, duals: np.ndarray,
                     consensus: np.ndarray) -> QpProblem:
    """Assemble the partition QP for the given dual/consensus state."""
    tpl = _SubproblemTemplate(net, part, layout, rho)
    prob = tpl.problem(load[part.internal_buses])
    prob.linear = tpl.linear(duals, consensus)
    return prob


# ---------------------------------------------------------------------------
# state updates (pure functions over layout-ordered arrays)

def consensus_update(layout: ConsensusLayout, copies: np.ndarray,
                     owner_values: np.ndarray) -> np.ndarray:
    """Per-slot mean of all holder copies and the owner's own value."""
    total = owner_values.copy()
    count = np.ones(layout.n_pub)
    np.add.at(total, layout.slot_of_entry, copies)
    np.add.at(count, layout.slot_of_entry, 1.0)
    return total / count


def dual_update(layout: ConsensusLayout, duals: np.ndarray, rho: float,
                copies: np.ndarray, consensus: np.ndarray) -> np.ndarray:
    return duals + rho * (copies - consensus[layout.slot_of_entry])


def primal_residual(layout: ConsensusLayout, copies: np.ndarray,
                    owner_values: np.ndarray, consensus: np.ndarray) -> float:
    """Max |copy - consensus| over entries and owner-side gaps over slots."""
    gaps = np.abs(copies - consensus[layout.slot_of_entry])
    owner_gaps = np.abs(owner_values - consensus)
    return float(max(gaps.max(initial=0.0), owner_gaps.max(initial=0.0)))


def mirror_duals(layout: ConsensusLayout, duals: np.ndarray) -> np.ndarray:
    """Owner-side dual per slot: minus the sum of the holder duals."""
    out = np.zeros(layout.n_pub)
    np.subtract.at(out, layout.slot_of_entry, duals)
    return out


# ---------------------------------------------------------------------------
# engine

class AdmmEngine:
    """Holds per-partition solvers; one engine per (network, partition, rho)."""

    def __init__(self, net: Network, problems: list[PartitionProblem],
                 layout: ConsensusLayout, config: AdmmConfig):
        self.net = net
        self.layout = layout
        self.config = config
        self.templates = [_SubproblemTemplate(net, p, layout, config.rho)
                          for p in problems]
        self.problems = problems
        base_load = net.base_load_vector()
        self.solvers = [QpSolver(t.problem(base_load[t.part.internal_buses]),
                                 config.qp_settings)
                        for t in self.templates]

    def run(self, load: np.ndarray, hook=None) -> tuple[AdmmResult, Trajectory]:
        """Iterate to the primal tolerance or the iteration cap.

        `hook(state)` runs before each iteration's partition updates and may
        mutate `state.duals` and `state.consensus` in place.
        """
        layout, cfg = self.layout, self.config
        load = np.asarray(load, dtype=float)
        state = AdmmState(
            k=0,
            duals=np.zeros(layout.width),
            consensus=np.zeros(layout.n_pub),
            copies=np.zeros(layout.width),
            owner_values=np.zeros(layout.n_pub),
            rho=cfg.rho,
            primal=[None] * len(self.templates),
        )
        for solver in self.solvers:
            solver.reset()
        feats, resids, costs = [], [], []
        converged = False
        residual = np.inf
        for _ in range(cfg.max_iter):
            if hook is not None:
                hook(state)
            self._partition_update(state, load)
            state.consensus = consensus_update(layout, state.copies,
                                               state.owner_values)
            state.duals = dual_update(layout, state.duals, cfg.rho,
                                      state.copies, state.consensus)
            state.k += 1
            residual = primal_residual(layout, state.copies,
                                       state.owner_values, state.consensus)
            if cfg.record_trajectory:
                feats.append(np.concatenate([state.duals, state.consensus]))
                resids.append(residual)
                costs.append(state.cost)
            if residual <= cfg.primal_tol:
                converged = True
                break
        traj = Trajectory(
            np.array(feats).reshape(len(feats), layout.n_features),
            np.array(resids), np.array(costs))
        result = AdmmResult(state, converged, state.k, state.cost, residual)
        return result, traj

    def _partition_update(self, state: AdmmState, load: np.ndarray):
        cost = 0.0
        for i, (tpl, solver) in enumerate(zip(self.templates, self.solvers)):
            local_load = load[tpl.part.internal_buses]
            l, u = tpl.l.copy(), tpl.u.copy()
            l[:tpl.n_bal] = u[:tpl.n_bal] = local_load
            solver.update(q=tpl.linear(state.duals, state.consensus), l=l, u=u)
            sol = solver.solve()
            if sol.status != "optimal":
                raise AdmmFailure(
                    f"partition {tpl.part.id} subproblem: status {sol.status} "
                    f"at iteration {state.k}")
            x = sol.primal
            state.primal[i] = x
            cost += float(tpl.cost_vec @ x[:tpl.n_gen])
            state.copies[tpl.copy_entry_idx] = x[tpl.copy_cols]
            state.owner_values[tpl.owner_slots] = x[tpl.owner_cols]
        state.cost = cost

    def assemble_angles(self, state: AdmmState) -> np.ndarray:
        """Global angle vector from the per-partition interior solutions."""
        theta = np.zeros(self.net.n_bus)
        for tpl, x in zip(self.templates, state.primal):
            theta[tpl.part.internal_buses] = x[tpl.n_gen:tpl.n_gen + tpl.n_bus]
        return theta

    def assemble_generation(self, state: AdmmState) -> np.ndarray:
        gen = np.zeros(len(self.net.generators))
        for tpl, x in zip(self.templates, state.primal):
            gen[tpl.part.local_generators] = x[:tpl.n_gen]
        return gen


def run_admm(net: Network, problems: list[PartitionProblem],
             layout: ConsensusLayout, config: AdmmConfig,
             load: np.ndarray | None = None, hook=None):
    """Convenience wrapper building a fresh engine for a single run."""
    engine = AdmmEngine(net, problems, layout, config)
    if load is None:
        load = net.base_load_vector()
    return engine.run(load, hook)
