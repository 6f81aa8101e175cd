import numpy as np
import pytest
import scipy.sparse as sp

from mafl import sca
from mafl.bound import eval_bound
from mafl.scheduling import ScheduleLimits, check_schedule, pair_rounds, round_robin
from mafl.wireless import period_breakdown

from conftest import small_scenario
from helpers import flat_plan, unit_constants


@pytest.fixture(scope="module")
def setup():
    sc = small_scenario()
    C = [unit_constants(3), unit_constants(3)]
    return sc, C, sca.assemble_problem(sc, C)


def test_every_family_has_one_group(setup):
    _, _, P = setup
    groups = sca.classify_constraints(P)
    assert set(groups) == set(sca.GROUPS)
    names = [n for v in groups.values() for n in v]
    assert len(names) == len(set(names)) == len(P.families)
    assert {"upload_order", "binary_receive", "binary_upload"} <= set(groups["N_IE"])


def test_surrogates_majorize_and_touch(setup):
    _, _, P = setup
    r = np.random.default_rng(0)
    for f in P.majorized():
        rows = np.arange(f.rows.start, f.rows.stop)
        for _ in range(60):
            vm, v = r.uniform(P.lo, P.hi), r.uniform(P.lo, P.hi)
            S = sca.convexify_constraints(vm, P, f.name)
            assert np.all(S(v) >= P.mono.values(v)[rows] - 1e-9 * (1 + np.abs(P.mono.values(v)[rows])))
            np.testing.assert_allclose(S(vm), P.mono.values(vm)[rows], atol=1e-12)
            np.testing.assert_allclose(S.gradient(vm).toarray(), P.mono.jacobian(vm)[rows].toarray(), atol=1e-12)


def test_scalar_curvature_override(setup):
    _, _, P = setup
    vm = np.clip(np.full(P.size, 0.5), P.lo, P.hi)
    S = sca.convexify_constraints(vm, P, "binary_receive", L=3.0)
    assert set(np.unique(S.curvature.data)) == {3.0}


def test_relaxed_objective_matches_plan_evaluator(setup):
    sc, C, P = setup
    S = {j: round_robin(3, 4) for j in range(2)}
    plans = {j: sca.time_plan(sc, j, *S[j], flat_plan(sc, j, e=3, B=4)) for j in range(2)}
    v = sca.vector_from_plans(P, S, plans)
    # independent evaluation straight from the bound and the energy model
    c1, c2, c3 = sc.objective_weights
    total = 0.0
    for j, t in enumerate(sc.tasks):
        rep = eval_bound(pair_rounds(*S[j], ScheduleLimits(t.staleness_limit, 4)), plans[j], C[j], t)
        bd = period_breakdown(sc, j, *S[j], plans[j])
        total += c1 * t.importance * rep.total
        total += t.energy_weight * (c2 * (bd.compute_energy.sum() + bd.uplink_energy.sum())
                                    + c3 * bd.downlink_energy.sum()) / 4
    assert P.objective_value(v) == pytest.approx(total, rel=1e-10)
    assert sca.plan_objective(sc, C, S, plans)["total"] == pytest.approx(total, rel=1e-12)
    assert P.max_violation(v) <= 1e-9 and P.binary_gap(v) == 0.0


def test_solve_surrogate_projection_toy():
    # min 1/2 ||v - (1, 1)||^2  s.t.  v0 + v1 <= 1, v0^2-type row v0 - 0.25 <= 0
    obj = sca.SurrogateObjective(np.zeros(2), 1.0, -np.ones(2), 1.0)
    A = sp.csr_matrix(np.array([[1.0, 1.0]]))
    ies = sca.SurrogateConstraints(np.zeros(2), np.array([-0.25]), sp.csr_matrix(np.array([[1.0, 0.0]])),
                                   sp.csr_matrix((1, 2)))
    cfg = sca.SCAConfig(max_inner_iters=5000, dual_step=0.5, inner_tolerance=1e-8)
    res = sca.solve_surrogate(obj, None, ies, config=cfg, affine=(A, np.array([1.0])))
    np.testing.assert_allclose(res.v, [0.25, 0.75], atol=1e-6)
    assert not res.inexact


def test_sca_step():
    np.testing.assert_allclose(sca.sca_step([0, 0], [1, 2], 0.5), [0.5, 1.0])
    with pytest.raises(ValueError):
        sca.sca_step([0], [1], 0.0)


def test_solve_timing_orders_arrivals():
    R = np.array([[1, 1, 0], [1, 0, 1]])
    U = np.array([[1, 1, 0], [0, 0, 1]])
    dl = np.full((2, 3), 0.1)
    cp = np.array([[1.0, 1.0, 1.0], [0.2, 0.2, 0.2]])
    ul = np.full((2, 3), 0.1)
    idle, final = sca.solve_timing(R, U, dl, cp, ul, 10.0)
    T = R * idle + R * dl + R * cp + U * ul
    end = np.cumsum(T, axis=1)
    arrival = [end[0, 0], end[0, 1], end[1, 2]]
    assert arrival == sorted(arrival)
    # w^(2) exists before device 1 downloads it
    assert (end[1, 1]) + idle[1, 2] >= arrival[1] - 1e-12
    np.testing.assert_allclose(T.sum(axis=1) + final, 10.0)
    assert np.all(idle[R == 0] == 0)
    assert check_schedule(R, U, T, ScheduleLimits(2, 3), idle) == []
    with pytest.raises(sca.TimingInfeasible):
        sca.solve_timing(R, U, dl, cp, ul, 1.0)


def test_round_and_repair_gives_valid_schedule(setup):
    sc, _, P = setup
    r = np.random.default_rng(2)
    v, _, _ = sca.initial_point(P)
    for j in range(2):
        for kind in ("receive", "upload"):
            blk = P.layout.block(kind, j)
            v[blk] = r.uniform(0, 1, size=blk.shape)
    tensors, plans = sca.round_and_repair(v, P)
    for j, t in enumerate(sc.tasks):
        R, U = tensors[j].receive, tensors[j].upload
        bd = period_breakdown(sc, j, R, U, plans[j])
        assert check_schedule(R, U, bd.total, ScheduleLimits(t.staleness_limit, 4), plans[j].idle) == []
        assert plans[j].box_violations(sc, j, R) == []
        assert np.all(plans[j].sgd_iters == np.round(plans[j].sgd_iters))


def test_plan_csv_roundtrip(setup, tmp_path):
    sc, _, _ = setup
    plans = {j: sca.time_plan(sc, j, *round_robin(3, 4), flat_plan(sc, j)) for j in range(2)}
    sca.write_plan_csv(tmp_path / "p.csv", plans)
    back = sca.read_plan_csv(tmp_path / "p.csv", sc)
    for j in plans:
        for k in ("cpu_freq", "batch_size", "sgd_iters", "idle", "final_idle"):
            np.testing.assert_array_equal(getattr(back[j], k), getattr(plans[j], k))


def test_optimize_small_instance_close_to_brute_force():
    sc = small_scenario(devices=2, tasks=1, G=2, K=1, e_max=4)
    C = [unit_constants(2)]
    tensors, plans, hist = sca.optimize(sc, C)
    best, _, _ = sca.brute_force(sc, C)
    got = sca.plan_objective(sc, C, {0: (tensors[0].receive, tensors[0].upload)}, plans)["total"]
    assert got == pytest.approx(hist[-1]["objective"])
    assert got <= 1.25 * best
