import numpy as np
import pytest

from laopf.admm import (
    AdmmConfig, AdmmEngine, build_subproblem, consensus_update, dual_update,
    mirror_duals, primal_residual, run_admm,
)
from laopf.cases import parse_matpower_case, solve_centralized
from laopf.partition import (
    PartitionMap, build_consensus_layout, build_partition_problems,
    load_partition_map,
)

from conftest import DATA


@pytest.fixture(scope="module")
def toy_split(toy3):
    return build_partition_problems(toy3, PartitionMap([0, 0, 1], 2))


@pytest.fixture(scope="module")
def case14_split(case14):
    pmap = load_partition_map((DATA / "case14_2part.map").read_text(), case14)
    return pmap, build_partition_problems(case14, pmap)


TOY_LOAD = np.array([0.0, 1.5, 0.0])


def test_single_partition_equals_centralized(toy3):
    problems, layout = build_partition_problems(toy3, PartitionMap([0, 0, 0], 1))
    res, _ = run_admm(toy3, problems, layout, AdmmConfig(rho=1.0, max_iter=10),
                      TOY_LOAD)
    assert res.converged and res.iterations == 1
    cen = solve_centralized(toy3, TOY_LOAD)
    assert res.cost == pytest.approx(cen.objective, abs=1e-7)


def test_subproblem_reduces_to_local_lp_without_coupling(toy3, toy_split):
    problems, layout = toy_split
    part = problems[1]     # holds gen at bus 3 (cost 20)
    prob = build_subproblem(toy3, part, layout, rho=1e-12, load=TOY_LOAD,
                            duals=np.zeros(layout.width),
                            consensus=np.zeros(layout.n_pub))
    # objective is effectively c'g: quadratic negligible, q zero off the
    # generator column
    assert prob.linear[0] == pytest.approx(20.0)
    assert np.allclose(prob.linear[1:], 0.0)
    assert np.abs(prob.quadratic).max() <= 1e-12


def test_subproblem_quadratic_hits_exactly_boundary_slots(case14, case14_split):
    pmap, (problems, layout) = case14_split
    rng = np.random.default_rng(1)
    duals = rng.normal(size=layout.width)
    cons = rng.normal(size=layout.n_pub)
    for part in problems:
        prob = build_subproblem(case14, part, layout, 1.0,
                                case14.base_load_vector(), duals, cons)
        diag = np.diag(prob.quadratic)
        ng = len(part.local_generators)
        nb = part.internal_buses.size
        # copies always carry rho
        assert np.all(diag[ng + nb:] == 1.0)
        # owned boundary angles carry rho, interior angles zero
        owned_buses = {layout.entries[i].bus for i in part.owned_entries}
        for j, b in enumerate(part.internal_buses):
            assert diag[ng + j] == (1.0 if b in owned_buses else 0.0)
        assert np.all(diag[:ng] == 0.0)


def test_subproblem_objective_matches_dense_oracle(case14, case14_split):
    # evaluate the assembled QP objective at random points and compare with
    # a from-first-principles evaluation of the augmented Lagrangian terms
    pmap, (problems, layout) = case14_split
    rng = np.random.default_rng(7)
    duals = rng.normal(size=layout.width)
    cons = rng.normal(size=layout.n_pub)
    rho = 1.7
    for part in problems:
        prob = build_subproblem(case14, part, layout, rho,
                                case14.base_load_vector(), duals, cons)
        ng, nb = len(part.local_generators), part.internal_buses.size
        for _ in range(5):
            x = rng.normal(size=prob.n)
            g, theta, copies = x[:ng], x[ng:ng + nb], x[ng + nb:]
            expected = sum(case14.generators[j].cost * g[i]
                           for i, j in enumerate(part.local_generators))
            for c, e_idx in enumerate(part.held_entries):
                slot = layout.slot_of_entry[e_idx]
                gap = copies[c] - cons[slot]
                expected += duals[e_idx] * gap + rho / 2 * gap ** 2
            local_pos = {b: i for i, b in enumerate(part.internal_buses)}
            for e_idx in part.owned_entries:
                e = layout.entries[e_idx]
                slot = layout.slot_of_entry[e_idx]
                gap = theta[local_pos[e.bus]] - cons[slot]
                expected += -duals[e_idx] * gap + rho / 2 * gap ** 2
            # the assembled QP drops the constant (in x) pieces of the
            # augmented terms; compare after removing them
            const = sum(-duals[i] * cons[layout.slot_of_entry[i]]
                        + rho / 2 * cons[layout.slot_of_entry[i]] ** 2
                        for i in part.held_entries)
            const += sum(duals[i] * cons[layout.slot_of_entry[i]]
                         + rho / 2 * cons[layout.slot_of_entry[i]] ** 2
                         for i in part.owned_entries)
            assert prob.objective(x) == pytest.approx(expected - const, rel=1e-9, abs=1e-9)


def test_consensus_update_examples(toy3, toy_split):
    _, layout = toy_split
    # single-holder slots: mean of copy and owner value
    copies = np.array([0.10, 0.5, 0.5])
    owners = np.array([0.30, 0.5, 0.5])
    out = consensus_update(layout, copies, owners)
    assert out[0] == pytest.approx(0.20)
    assert out[1] == pytest.approx(0.5) and out[2] == pytest.approx(0.5)


def test_consensus_update_multi_holder():
    # star of 3 partitions sharing one owner bus: two holders + owner
    from laopf.cases import Branch, Bus, Network
    net = Network([Bus(0, 0.0, True), Bus(1, 0.0), Bus(2, 0.0)], [],
                  [Branch(1, 0, 1.0), Branch(2, 0, 1.0)])
    layout = build_consensus_layout(net, PartitionMap([0, 1, 2], 3))
    # entries owned by partition 0 at bus 0 held by partitions 1 and 2
    holders = [(e.holder, e.owner, e.bus) for e in layout.entries]
    slot0 = layout.slots.index((0, 0))
    idx = [i for i, e in enumerate(layout.entries) if e.owner == 0]
    assert len(idx) == 2
    copies = np.zeros(layout.width)
    copies[idx] = [0.1, 0.2]
    owners = np.zeros(layout.n_pub)
    owners[slot0] = 0.3
    out = consensus_update(layout, copies, owners)
    assert out[slot0] == pytest.approx(0.2)   # mean of 0.1, 0.2, 0.3


def test_dual_update_examples(toy_split):
    _, layout = toy_split
    lam = np.zeros(layout.width)
    copies = np.array([0.20, 0.0, 0.0])
    cons = np.array([0.15, 0.0, 0.0])
    out = dual_update(layout, lam, 1.0, copies, cons)
    assert out[0] == pytest.approx(0.05)
    np.testing.assert_allclose(out[1:], 0.0)
    # copy == consensus leaves duals unchanged
    same = dual_update(layout, out, 3.0, cons[layout.slot_of_entry], cons)
    np.testing.assert_allclose(same, out)


def test_dual_update_matches_elementwise_oracle(case14_split):
    pmap, (problems, layout) = case14_split
    rng = np.random.default_rng(2)
    lam = rng.normal(size=layout.width)
    copies = rng.normal(size=layout.width)
    cons = rng.normal(size=layout.n_pub)
    rho = 2.5
    out = dual_update(layout, lam, rho, copies, cons)
    for i, e in enumerate(layout.entries):
        slot = layout.slots.index((e.owner, e.bus))
        assert out[i] == pytest.approx(lam[i] + rho * (copies[i] - cons[slot]))


def test_primal_residual_examples(toy_split):
    _, layout = toy_split
    cons = np.array([0.1, 0.2, 0.3])
    copies = cons[layout.slot_of_entry]
    assert primal_residual(layout, copies, cons.copy(), cons) == 0.0
    copies2 = copies.copy()
    copies2[1] += 0.05
    assert primal_residual(layout, copies2, cons.copy(), cons) == pytest.approx(0.05)
    rng = np.random.default_rng(3)
    copies3 = rng.normal(size=layout.width)
    owners = rng.normal(size=layout.n_pub)
    expected = max(max(abs(copies3[i] - cons[layout.slot_of_entry[i]])
                       for i in range(layout.width)),
                   max(abs(owners - cons)))
    assert primal_residual(layout, copies3, owners, cons) == pytest.approx(expected)


def test_averaging_deviation_sum_zero(case14, case14_split):
    pmap, (problems, layout) = case14_split
    engine = AdmmEngine(case14, problems, layout,
                        AdmmConfig(rho=1.0, max_iter=30, primal_tol=0.0))
    res, _ = engine.run(case14.base_load_vector())
    st = res.state
    cons = consensus_update(layout, st.copies, st.owner_values)
    per_slot = st.owner_values - cons
    np.add.at(per_slot, layout.slot_of_entry, st.copies - cons[layout.slot_of_entry])
    np.testing.assert_allclose(per_slot, 0.0, atol=1e-12)


def test_mirror_duals_identity(case14, case14_split):
    pmap, (problems, layout) = case14_split
    seen = []

    def hook(state):
        seen.append(mirror_duals(layout, state.duals) + _holder_sums(layout, state.duals))

    engine = AdmmEngine(case14, problems, layout,
                        AdmmConfig(rho=1.0, max_iter=40, primal_tol=0.0))
    engine.run(case14.base_load_vector(), hook)
    for v in seen:
        np.testing.assert_allclose(v, 0.0, atol=1e-12)


def _holder_sums(layout, duals):
    out = np.zeros(layout.n_pub)
    np.add.at(out, layout.slot_of_entry, duals)
    return out


def test_toy_converges_to_centralized(toy3, toy_split):
    problems, layout = toy_split
    res, traj = run_admm(toy3, problems, layout,
                         AdmmConfig(rho=10.0, max_iter=1200, primal_tol=1e-5),
                         TOY_LOAD)
    cen = solve_centralized(toy3, TOY_LOAD)
    assert res.converged
    assert abs(res.cost - cen.objective) / cen.objective < 1e-3
    # copies match centralized boundary angles
    st = res.state
    for i, e in enumerate(layout.entries):
        assert st.copies[i] == pytest.approx(cen.angles[e.bus], abs=1e-4)


def test_partition_update_deterministic(toy3, toy_split):
    problems, layout = toy_split
    cfg = AdmmConfig(rho=10.0, max_iter=25, primal_tol=0.0)
    _, t1 = run_admm(toy3, problems, layout, cfg, TOY_LOAD)
    _, t2 = run_admm(toy3, problems, layout, cfg, TOY_LOAD)
    np.testing.assert_array_equal(t1.features, t2.features)
    np.testing.assert_array_equal(t1.costs, t2.costs)


def test_fixed_point_of_converged_values(toy3, toy_split):
    problems, layout = toy_split
    cfg = AdmmConfig(rho=10.0, max_iter=3000, primal_tol=1e-8)
    res, _ = run_admm(toy3, problems, layout, cfg, TOY_LOAD)
    assert res.converged
    lam_star = res.state.duals.copy()
    cons_star = res.state.consensus.copy()

    def inject(state):
        if state.k == 0:
            state.duals[:] = lam_star
            state.consensus[:] = cons_star

    res2, traj2 = run_admm(toy3, problems, layout,
                           AdmmConfig(rho=10.0, max_iter=2, primal_tol=0.0),
                           TOY_LOAD, hook=inject)
    assert traj2.residuals[0] <= 10 * 1e-8 + 1e-9


def test_feasibility_independent_of_injected_values(toy3, toy_split):
    problems, layout = toy_split
    rng = np.random.default_rng(0)

    def wild(state):
        if state.k == 3:
            state.duals[:] = rng.normal(scale=100.0, size=layout.width)
            state.consensus[:] = rng.normal(scale=5.0, size=layout.n_pub)

    res, _ = run_admm(toy3, problems, layout,
                      AdmmConfig(rho=10.0, max_iter=20, primal_tol=0.0),
                      TOY_LOAD, hook=wild)
    assert res.iterations == 20      # no subproblem failure


def test_trajectory_shape_and_csv(toy3, toy_split):
    problems, layout = toy_split
    res, traj = run_admm(toy3, problems, layout,
                         AdmmConfig(rho=10.0, max_iter=7, primal_tol=0.0),
                         TOY_LOAD)
    assert traj.features.shape == (7, layout.width + layout.n_pub)
    csv = traj.export_csv(layout.width)
    lines = csv.strip().splitlines()
    assert lines[0].startswith("iter,primal_residual,cost,lambda_0")
    assert len(lines) == 8


def test_case14_rho1_slow_decay(case14, case14_split):
    pmap, (problems, layout) = case14_split
    res, traj = run_admm(case14, problems, layout,
                         AdmmConfig(rho=1.0, max_iter=100, primal_tol=1e-6),
                         case14.base_load_vector())
    assert not res.converged
    cen = solve_centralized(case14)
    rel = abs(res.cost - cen.objective) / cen.objective
    assert rel > 1e-3    # rho=1 is deliberately slow at this horizon
