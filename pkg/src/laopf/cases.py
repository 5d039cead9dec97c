"""MATPOWER-style case parsing, DC network matrices, centralized DC-OPF."""

from __future__ import annotations

import re
import warnings
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.csgraph as csgraph

from .qp import INF, QpProblem, QpSettings, solve_qp


class CaseParseError(ValueError):
    """Raised when a case file is missing tables or contains bad rows."""


@dataclass(frozen=True)
class Bus:
    index: int                 # 0-based internal index
    base_load: float           # per-unit active power
    is_reference: bool = False


@dataclass(frozen=True)
class Generator:
    bus: int
    cost: float                # currency per per-unit-hour, linear
    g_min: float
    g_max: float


@dataclass(frozen=True)
class Branch:
    from_bus: int
    to_bus: int
    susceptance: float         # per-unit, > 0
    flow_limit: float | None = None  # per-unit; None = unlimited


@dataclass
class Network:
    buses: list[Bus]
    generators: list[Generator]
    branches: list[Branch]
    base_mva: float = 100.0
    name: str = ""

    def __post_init__(self):
        self.validate()

    @property
    def n_bus(self) -> int:
        return len(self.buses)

    @property
    def reference_bus(self) -> int:
        return next(b.index for b in self.buses if b.is_reference)

    def base_load_vector(self) -> np.ndarray:
        return np.array([b.base_load for b in self.buses])

    def total_capacity(self) -> float:
        return sum(g.g_max for g in self.generators)

    def validate(self):
        n = self.n_bus
        refs = [b for b in self.buses if b.is_reference]
        if len(refs) != 1:
            raise CaseParseError(
                f"network must have exactly one reference bus, found {len(refs)}")
        for i, b in enumerate(self.buses):
            if b.index != i:
                raise CaseParseError(f"bus indices must be 0..n-1, got {b.index} at {i}")
            if b.base_load < 0:
                raise CaseParseError(f"bus {i}: negative base load")
        for g in self.generators:
            if not 0 <= g.bus < n:
                raise CaseParseError(f"generator references unknown bus {g.bus}")
            if g.g_min > g.g_max:
                raise CaseParseError(f"generator at bus {g.bus}: g_min > g_max")
            if g.cost < 0:
                raise CaseParseError(f"generator at bus {g.bus}: negative cost")
        for br in self.branches:
            if br.from_bus == br.to_bus:
                raise CaseParseError(f"branch {br.from_bus}-{br.to_bus}: self loop")
            if not (0 <= br.from_bus < n and 0 <= br.to_bus < n):
                raise CaseParseError("branch references unknown bus")
            if br.susceptance <= 0:
                raise CaseParseError(
                    f"branch {br.from_bus}-{br.to_bus}: susceptance must be > 0")
        if n and self.connected_components() > 1:
            warnings.warn(f"network {self.name or '?'} is not connected")

    def adjacency(self) -> sp.csr_matrix:
        n = self.n_bus
        rows = [br.from_bus for br in self.branches]
        cols = [br.to_bus for br in self.branches]
        data = np.ones(len(self.branches))
        adj = sp.coo_matrix((data, (rows, cols)), shape=(n, n))
        return ((adj + adj.T) > 0).astype(float).tocsr()

    def connected_components(self) -> int:
        if not self.n_bus:
            return 0
        count, _ = csgraph.connected_components(self.adjacency(), directed=False)
        return count

    def summary(self) -> str:
        limited = sum(1 for b in self.branches if b.flow_limit is not None)
        return (
            f"network {self.name or '(unnamed)'}: "
            f"{self.n_bus} buses, {len(self.branches)} branches "
            f"({limited} with flow limits), {len(self.generators)} generators, "
            f"reference bus {self.reference_bus + 1}, "
            f"total load {sum(b.base_load for b in self.buses):.4f} pu, "
            f"total capacity {self.total_capacity():.4f} pu"
        )


@dataclass
class SystemMatrices:
    incidence: np.ndarray        # (m, n), +/-1 entries
    susceptance_diag: np.ndarray  # (m, m) diagonal
    flow_map: np.ndarray         # (m, n), K = B A
    laplacian: np.ndarray        # (n, n), H = A' B A


@dataclass
class DispatchSolution:
    generation: np.ndarray       # per generator, per-unit
    angles: np.ndarray           # per bus, radians
    objective: float
    balance_duals: np.ndarray    # LMP-like multipliers per bus
    status: str                  # optimal | infeasible | max_iter


# ---------------------------------------------------------------------------
# parsing

_TABLE_RE = re.compile(r"mpc\.(\w+)\s*=\s*\[(.*?)\];", re.S)
_SCALAR_RE = re.compile(r"mpc\.baseMVA\s*=\s*([0-9.eE+-]+)\s*;")
_NAME_RE = re.compile(r"function\s+mpc\s*=\s*(\w+)")


def _strip_comments(text: str) -> str:
    return "\n".join(line.split("%", 1)[0] for line in text.splitlines())


def _parse_table(body: str, name: str) -> list[list[float]]:
    rows = []
    for chunk in body.replace("\n", ";").split(";"):
        chunk = chunk.strip()
        if not chunk:
            continue
        try:
            rows.append([float(tok) for tok in chunk.split()])
        except ValueError as exc:
            raise CaseParseError(f"table mpc.{name}: malformed row {chunk!r}") from exc
    return rows


def parse_matpower_case(text: str, name: str = "") -> Network:
    """Parse a MATPOWER `.m` case into a per-unit Network.

    Only the baseMVA, bus, gen, branch and gencost tables are read.
    Out-of-service branches and generators are dropped, loads and limits
    are converted to per-unit, and susceptance is taken as 1/x.
    """
    clean = _strip_comments(text)
    m = _NAME_RE.search(clean)
    if m and not name:
        name = m.group(1)
    sm = _SCALAR_RE.search(clean)
    if not sm:
        raise CaseParseError("missing mpc.baseMVA")
    base_mva = float(sm.group(1))
    tables = {mt.group(1): _parse_table(mt.group(2), mt.group(1))
              for mt in _TABLE_RE.finditer(clean)}
    for required in ("bus", "gen", "branch", "gencost"):
        if required not in tables:
            raise CaseParseError(f"missing table mpc.{required}")

    buses, index_of = [], {}
    ref = None
    for i, row in enumerate(tables["bus"]):
        if len(row) < 3:
            raise CaseParseError(f"table mpc.bus: row {i + 1} too short")
        bus_id, bus_type, pd = int(row[0]), int(row[1]), row[2]
        if bus_id in index_of:
            raise CaseParseError(f"table mpc.bus: duplicate bus id {bus_id}")
        index_of[bus_id] = i
        is_ref = bus_type == 3
        if is_ref:
            if ref is not None:
                raise CaseParseError("table mpc.bus: multiple reference buses")
            ref = i
        buses.append(Bus(i, pd / base_mva, is_ref))
    if ref is None:
        raise CaseParseError("table mpc.bus: no reference bus (type 3)")

    gencost = tables["gencost"]
    if len(gencost) < len(tables["gen"]):
        raise CaseParseError("table mpc.gencost: fewer rows than mpc.gen")
    generators = []
    for i, row in enumerate(tables["gen"]):
        if len(row) < 10:
            raise CaseParseError(f"table mpc.gen: row {i + 1} too short")
        if int(row[7]) == 0:     # status
            continue
        bus_id = int(row[0])
        if bus_id not in index_of:
            raise CaseParseError(f"table mpc.gen: row {i + 1}: unknown bus {bus_id}")
        cost_row = gencost[i]
        model, ncost = int(cost_row[0]), int(cost_row[3])
        if model != 2:
            raise CaseParseError(
                f"table mpc.gencost: row {i + 1}: only polynomial cost (model 2) supported")
        coeffs = cost_row[4:4 + ncost]
        if len(coeffs) != ncost:
            raise CaseParseError(f"table mpc.gencost: row {i + 1}: bad coefficient count")
        # polynomial is highest order first; linear coefficient is next to last
        linear = coeffs[-2] if ncost >= 2 else 0.0
        generators.append(Generator(index_of[bus_id], linear,
                                    row[9] / base_mva, row[8] / base_mva))

    branches = []
    for i, row in enumerate(tables["branch"]):
        if len(row) < 11:
            raise CaseParseError(f"table mpc.branch: row {i + 1} too short")
        if int(row[10]) == 0:    # status
            continue
        for end in (int(row[0]), int(row[1])):
            if end not in index_of:
                raise CaseParseError(f"table mpc.branch: row {i + 1}: unknown bus {end}")
        x = row[3]
        if x == 0:
            raise CaseParseError(f"table mpc.branch: row {i + 1}: zero reactance")
        rate_a = row[5]
        limit = None if rate_a == 0 else rate_a / base_mva
        branches.append(Branch(index_of[int(row[0])], index_of[int(row[1])],
                               1.0 / abs(x), limit))
    return Network(buses, generators, branches, base_mva, name)


def to_case_text(net: Network) -> str:
    """Serialize a Network back to the restricted MATPOWER format."""
    lines = [f"function mpc = {net.name or 'case'}",
             f"mpc.baseMVA = {net.base_mva:.17g};", "mpc.bus = ["]
    for b in net.buses:
        btype = 3 if b.is_reference else 1
        lines.append(f"\t{b.index + 1}\t{btype}\t{b.base_load * net.base_mva:.17g}"
                     "\t0\t0\t0\t1\t1\t0\t0\t1\t1.1\t0.9;")
    lines.append("];")
    lines.append("mpc.gen = [")
    for g in net.generators:
        lines.append(f"\t{g.bus + 1}\t0\t0\t0\t0\t1\t{net.base_mva:.17g}\t1"
                     f"\t{g.g_max * net.base_mva:.17g}\t{g.g_min * net.base_mva:.17g};")
    lines.append("];")
    lines.append("mpc.branch = [")
    for br in net.branches:
        rate = 0.0 if br.flow_limit is None else br.flow_limit * net.base_mva
        lines.append(f"\t{br.from_bus + 1}\t{br.to_bus + 1}\t0"
                     f"\t{1.0 / br.susceptance:.17g}\t0\t{rate:.17g}"
                     "\t0\t0\t0\t0\t1\t-360\t360;")
    lines.append("];")
    lines.append("mpc.gencost = [")
    for g in net.generators:
        lines.append(f"\t2\t0\t0\t2\t{g.cost:.17g}\t0;")
    lines.append("];")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# matrices and centralized solve

def build_system_matrices(net: Network) -> SystemMatrices:
    n, m = net.n_bus, len(net.branches)
    A = np.zeros((m, n))
    B = np.zeros((m, m))
    for k, br in enumerate(net.branches):
        A[k, br.from_bus] = 1.0
        A[k, br.to_bus] = -1.0
        B[k, k] = br.susceptance
    K = B @ A
    H = A.T @ K
    return SystemMatrices(A, B, K, H)


def centralized_qp(net: Network, load: np.ndarray,
                   mats: SystemMatrices | None = None) -> QpProblem:
    """Assemble the network-wide dispatch LP in box-constrained form.

    Variables are (g, theta); rows are nodal balance equalities, generator
    box bounds, flow-limit rows and the reference-angle pin.
    """
    mats = mats or build_system_matrices(net)
    n, ng = net.n_bus, len(net.generators)
    nv = ng + n
    limited = [k for k, br in enumerate(net.branches) if br.flow_limit is not None]
    m = n + ng + len(limited) + 1
    A = np.zeros((m, nv))
    l = np.empty(m)
    u = np.empty(m)
    # balance: H theta + sum(g at bus) = load
    A[:n, ng:] = mats.laplacian
    for j, g in enumerate(net.generators):
        A[g.bus, j] = 1.0
    l[:n] = u[:n] = load
    # generator bounds
    for j, g in enumerate(net.generators):
        A[n + j, j] = 1.0
        l[n + j], u[n + j] = g.g_min, g.g_max
    # flow limits
    for r, k in enumerate(limited):
        A[n + ng + r, ng:] = mats.flow_map[k]
        l[n + ng + r] = -net.branches[k].flow_limit
        u[n + ng + r] = net.branches[k].flow_limit
    # reference angle
    A[-1, ng + net.reference_bus] = 1.0
    l[-1] = u[-1] = 0.0
    q = np.concatenate([[g.cost for g in net.generators], np.zeros(n)])
    return QpProblem(np.zeros((nv, nv)), q, A, l, u)


def solve_centralized(net: Network, load: np.ndarray | None = None,
                      settings: QpSettings | None = None) -> DispatchSolution:
    """Least-cost dispatch for the whole network at the given load."""
    load = net.base_load_vector() if load is None else np.asarray(load, float)
    if load.shape != (net.n_bus,):
        raise ValueError(f"load must have length {net.n_bus}")
    prob = centralized_qp(net, load)
    sol = solve_qp(prob, settings)
    ng, n = len(net.generators), net.n_bus
    status = {"optimal": "optimal", "primal_infeasible": "infeasible",
              "dual_infeasible": "infeasible"}.get(sol.status, "max_iter")
    g = sol.primal[:ng]
    theta = sol.primal[ng:]
    # balance rows carry the nodal prices; flip sign so prices are positive
    return DispatchSolution(g, theta, float(np.dot(prob.linear[:ng], g)),
                            -sol.dual[:n], status)
