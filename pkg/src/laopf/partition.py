"""Bus-set partitioning and per-partition problem data for consensus ADMM.

A partition map splits the buses into S disjoint regions.  For every
ordered pair of adjacent partitions (holder s, owner u) the boundary buses
of u seen from s become consensus entries: the holder keeps a local copy
of the owner's angle, and copies are driven to agreement with a per-bus
consensus value by the ADMM engine.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse.csgraph as csgraph
from sklearn.cluster import KMeans

from .cases import Network, build_system_matrices


class PartitionError(ValueError):
    pass


@dataclass
class PartitionMap:
    assignment: np.ndarray    # bus -> partition id
    S: int

    def __post_init__(self):
        self.assignment = np.asarray(self.assignment, dtype=int)
        counts = np.bincount(self.assignment, minlength=self.S)
        if self.assignment.min(initial=0) < 0 or self.assignment.max(initial=0) >= self.S:
            raise PartitionError("partition ids must lie in 0..S-1")
        if np.any(counts == 0):
            raise PartitionError("every partition must be nonempty")

    def members(self, s: int) -> np.ndarray:
        return np.where(self.assignment == s)[0]


@dataclass(frozen=True)
class ConsensusEntry:
    holder: int     # partition keeping the copy
    owner: int      # partition the bus belongs to
    bus: int


@dataclass
class ConsensusLayout:
    entries: list[ConsensusEntry]      # sorted by (owner, bus, holder)
    slots: list[tuple[int, int]]       # distinct (owner, bus), sorted
    slot_of_entry: np.ndarray          # entry index -> slot index

    @property
    def width(self) -> int:
        return len(self.entries)

    @property
    def n_pub(self) -> int:
        return len(self.slots)

    @property
    def n_features(self) -> int:
        """Length of one (duals, consensus) feature row."""
        return self.width + self.n_pub

    def fingerprint(self) -> str:
        blob = ";".join(f"{e.owner}:{e.bus}:{e.holder}" for e in self.entries)
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


@dataclass
class PartitionProblem:
    id: int
    internal_buses: np.ndarray           # global bus indices I_s, sorted
    local_generators: list[int]          # global generator indices
    H_local: np.ndarray                  # rows/cols I_s
    couplings: dict[int, tuple[np.ndarray, np.ndarray]]  # u -> (J_su, H_su)
    K_local: np.ndarray                  # flow rows on local columns
    K_couplings: np.ndarray              # flow rows on copy columns (held entries)
    flow_branches: list[int]             # global branch index per flow row
    held_entries: np.ndarray             # layout entry indices held by this partition
    owned_entries: np.ndarray            # layout entry indices owned by this partition
    contains_reference: bool
    reference_bus_local: int | None


def spectral_partition(net: Network, S: int, seed: int = 0) -> PartitionMap:
    """Split buses into S groups by k-means on low graph-Laplacian modes."""
    n = net.n_bus
    if S < 1 or S > n:
        raise PartitionError(f"S must be in 1..{n}")
    if S == 1:
        return PartitionMap(np.zeros(n, dtype=int), 1)
    adj = net.adjacency().toarray()
    lap = np.diag(adj.sum(axis=1)) - adj
    d = max(1, int(np.ceil(np.log2(S))))
    _, vecs = np.linalg.eigh(lap)
    cand = vecs[:, :d + 1]
    centered = cand - cand.mean(axis=0)
    # drop the near-constant mode (the trivial all-ones eigenvector)
    drop = int(np.argmin(np.linalg.norm(centered, axis=0)))
    emb = np.delete(centered, drop, axis=1)
    km = KMeans(n_clusters=S, random_state=seed, n_init=10)
    labels = km.fit_predict(emb)
    labels = _repair_empty(labels, S, emb)
    return PartitionMap(_relabel(labels, S), S)


def _repair_empty(labels, S, emb):
    labels = labels.copy()
    for s in range(S):
        if np.any(labels == s):
            continue
        counts = np.bincount(labels, minlength=S)
        donor = int(np.argmax(counts))
        members = np.where(labels == donor)[0]
        centroid = emb[members].mean(axis=0)
        far = members[int(np.argmax(np.linalg.norm(emb[members] - centroid, axis=1)))]
        labels[far] = s
    return labels


def _relabel(labels, S):
    """Renumber partitions by first appearance so output is deterministic."""
    mapping, nxt = {}, 0
    out = np.empty_like(labels)
    for i, l in enumerate(labels):
        if l not in mapping:
            mapping[l] = nxt
            nxt += 1
        out[i] = mapping[l]
    return out


def load_partition_map(text: str, net: Network) -> PartitionMap:
    """Parse `<bus_id> <partition_id>` lines (1-based bus ids)."""
    assignment = np.full(net.n_bus, -1, dtype=int)
    for ln, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) != 2:
            raise PartitionError(f"line {ln}: expected '<bus_id> <partition_id>'")
        try:
            bus, pid = int(parts[0]), int(parts[1])
        except ValueError:
            raise PartitionError(f"line {ln}: non-integer fields") from None
        if not 1 <= bus <= net.n_bus:
            raise PartitionError(f"line {ln}: unknown bus {bus}")
        if assignment[bus - 1] != -1:
            raise PartitionError(f"line {ln}: duplicate bus {bus}")
        if pid < 0:
            raise PartitionError(f"line {ln}: negative partition id")
        assignment[bus - 1] = pid
    missing = np.where(assignment == -1)[0]
    if missing.size:
        raise PartitionError(f"bus {missing[0] + 1} missing from partition map")
    ids = sorted(set(assignment.tolist()))
    if ids != list(range(len(ids))):
        remap = {p: i for i, p in enumerate(ids)}
        assignment = np.array([remap[p] for p in assignment])
    return PartitionMap(assignment, len(ids))


def dump_partition_map(pmap: PartitionMap) -> str:
    return "".join(f"{i + 1} {p}\n" for i, p in enumerate(pmap.assignment))


def build_consensus_layout(net: Network, pmap: PartitionMap) -> ConsensusLayout:
    pairs = set()
    for br in net.branches:
        s = pmap.assignment[br.from_bus]
        u = pmap.assignment[br.to_bus]
        if s != u:
            pairs.add((s, u, br.to_bus))    # s holds a copy of to_bus owned by u
            pairs.add((u, s, br.from_bus))
    entries = sorted((ConsensusEntry(h, o, b) for h, o, b in pairs),
                     key=lambda e: (e.owner, e.bus, e.holder))
    slots = sorted({(e.owner, e.bus) for e in entries})
    slot_index = {ob: i for i, ob in enumerate(slots)}
    slot_of_entry = np.array([slot_index[(e.owner, e.bus)] for e in entries],
                             dtype=int)
    return ConsensusLayout(entries, slots, slot_of_entry)


def build_partition_problems(net: Network, pmap: PartitionMap):
    """Split H/K per the partition map; returns (problems, layout)."""
    mats = build_system_matrices(net)
    layout = build_consensus_layout(net, pmap)
    H, K = mats.laplacian, mats.flow_map
    problems = []
    for s in range(pmap.S):
        internal = pmap.members(s)
        gens = [j for j, g in enumerate(net.generators)
                if pmap.assignment[g.bus] == s]
        held = np.array([i for i, e in enumerate(layout.entries) if e.holder == s],
                        dtype=int)
        owned = np.array([i for i, e in enumerate(layout.entries) if e.owner == s],
                         dtype=int)
        couplings = {}
        for u in sorted({layout.entries[i].owner for i in held}):
            j_su = np.array(sorted({layout.entries[i].bus for i in held
                                    if layout.entries[i].owner == u}), dtype=int)
            couplings[u] = (j_su, H[np.ix_(internal, j_su)])
        copy_buses = [layout.entries[i].bus for i in held]
        copy_col = {b: c for c, b in enumerate(copy_buses)}
        touching = [k for k, br in enumerate(net.branches)
                    if pmap.assignment[br.from_bus] == s
                    or pmap.assignment[br.to_bus] == s]
        K_local = K[np.ix_(touching, internal)]
        K_coup = np.zeros((len(touching), len(copy_buses)))
        local_pos = {b: i for i, b in enumerate(internal)}
        for r, k in enumerate(touching):
            br = net.branches[k]
            for b in (br.from_bus, br.to_bus):
                if b not in local_pos and b in copy_col:
                    K_coup[r, copy_col[b]] = K[k, b]
        ref = net.reference_bus
        problems.append(PartitionProblem(
            id=s,
            internal_buses=internal,
            local_generators=gens,
            H_local=H[np.ix_(internal, internal)],
            couplings=couplings,
            K_local=K_local,
            K_couplings=K_coup,
            flow_branches=touching,
            held_entries=held,
            owned_entries=owned,
            contains_reference=ref in local_pos,
            reference_bus_local=local_pos.get(ref),
        ))
    return problems, layout


def validate_partition(net: Network, pmap: PartitionMap) -> str:
    """Human-readable report on partition sizes, connectivity and coupling."""
    adj = net.adjacency()
    tie = [br for br in net.branches
           if pmap.assignment[br.from_bus] != pmap.assignment[br.to_bus]]
    boundary = {b for br in tie for b in (br.from_bus, br.to_bus)}
    lines = [f"partitions: {pmap.S}", f"tie lines: {len(tie)}",
             f"boundary buses: {len(boundary)}"]
    for s in range(pmap.S):
        members = pmap.members(s)
        sub = adj[members][:, members]
        ncomp, _ = csgraph.connected_components(sub, directed=False)
        note = "" if ncomp == 1 else f"  WARNING: {ncomp} disconnected components"
        nb = len(boundary & set(members.tolist()))
        lines.append(f"partition {s}: {members.size} buses, "
                     f"{nb} boundary buses{note}")
    return "\n".join(lines)
