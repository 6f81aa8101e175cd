import dataclasses
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from mafl.bound import (BoundConstants, ScalingInputs, data_embedding, estimate_constants, eval_bound,
                        eval_conv_lhs, geometric_staleness_factor, round_terms, sample_variance,
                        stepsize_horizon_scaling, staleness_term)
from mafl.core import make_blobs
from mafl.scheduling import ScheduleLimits, ScheduleTensor, pair_rounds, round_robin
from mafl.training import LogisticLoss, QuadraticLoss

from conftest import small_scenario
from helpers import flat_plan, unit_constants


@given(st.floats(0.0, 3.0), st.integers(0, 25))
def test_geometric_factor_matches_series(ka, gp):
    series = sum(ka ** k for k in range(gp))
    assert geometric_staleness_factor(ka, gp) == pytest.approx(series, rel=1e-12, abs=1e-12)


def test_geometric_factor_unit_limit_and_errors():
    assert geometric_staleness_factor(1.0, 7) == 7.0
    assert geometric_staleness_factor(0.0, 3) == 1.0
    with pytest.raises(ValueError):
        geometric_staleness_factor(-0.1, 2)


def test_round_terms_hand_values():
    c = BoundConstants(2.0, 3.0, [1.0], [1.0], 1.0, 5.0, 0.5, 1.0)
    b, cc, d = round_terms(0.1, 4, 2, 5, 0.7, 1.5, c)
    assert b == pytest.approx(0.1 * 4 * 0.7)
    assert cc == pytest.approx(4 * 2 * 0.01 * 4 * (1 - 2 / 5) * 4 * 9 / 10 * 1.5)
    assert d == pytest.approx(2 * 0.5 * 0.01 * 4 * 5 * (0.5 * 0.5 * 0.1 * 3 + 4))


def test_full_batch_kills_sampling_term():
    sc = small_scenario(tasks=1)
    plan = flat_plan(sc, 0, B=10 ** 6)
    t = pair_rounds(*round_robin(3, 4), ScheduleLimits(2, 4))
    assert eval_bound(t, plan, unit_constants(3), sc.tasks[0]).term_c == 0.0
    assert eval_bound(t, flat_plan(sc, 0, B=2), unit_constants(3), sc.tasks[0]).term_c > 0.0


def test_single_aggregation_has_no_staleness_term():
    sc = small_scenario(tasks=1, G=1, K=0)
    t = pair_rounds(*round_robin(3, 1), ScheduleLimits(0, 1))
    rep = eval_bound(t, flat_plan(sc, 0), unit_constants(3), sc.tasks[0])
    assert rep.term_e == 0.0 and rep.total > 0


def test_eval_bound_sums_per_aggregation_pieces():
    sc = small_scenario(tasks=1, G=6, K=2)
    R = np.array([[1, 0, 1, 0, 0, 1], [1, 1, 0, 0, 1, 0], [0, 0, 0, 1, 0, 0]])
    U = np.array([[1, 0, 0, 1, 0, 0], [0, 1, 1, 0, 0, 1], [0, 0, 0, 0, 1, 0]])
    t = pair_rounds(R, U, ScheduleLimits(2, 6))
    rep = eval_bound(t, flat_plan(sc, 0, e=3), unit_constants(3), sc.tasks[0])
    for k in ("term_b", "term_c", "term_d", "term_e"):
        assert sum(p[k] for p in rep.per_aggregation) == pytest.approx(getattr(rep, k))
    task = sc.tasks[0]
    assert rep.term_a == pytest.approx(2 / (6 * task.eta_min * task.agg_weight) * 2.0)
    te, _ = staleness_term(unit_constants(3), task, 5.0)
    assert rep.term_e == te


def test_eval_bound_rejects_out_of_range_sgd_count():
    sc = small_scenario(tasks=1)
    t = pair_rounds(*round_robin(3, 4), ScheduleLimits(2, 4))
    with pytest.raises(ValueError):
        eval_bound(t, flat_plan(sc, 0, e=9), unit_constants(3), sc.tasks[0])


def test_bound_terms_grow_with_sgd_count():
    sc = small_scenario(tasks=1)
    t = pair_rounds(*round_robin(3, 4), ScheduleLimits(2, 4))
    r = [eval_bound(t, flat_plan(sc, 0, e=e), unit_constants(3), sc.tasks[0]) for e in (1, 3, 5)]
    for k in ("term_b", "term_c", "term_d"):
        v = [getattr(x, k) for x in r]
        assert v[0] < v[1] < v[2]


def test_conv_lhs_reductions(rng):
    for _ in range(50):
        G = int(rng.integers(1, 8))
        norms = rng.uniform(0, 3, size=G)
        fresh = ScheduleTensor(np.zeros((2, G)), np.zeros((2, G)),
                               tuple((int(rng.integers(2)), g, g) for g in range(G)))
        assert eval_conv_lhs(norms, fresh) == sum(norms.tolist()) / G
        stale = ScheduleTensor(np.zeros((2, G)), np.zeros((2, G)),
                               tuple((0, int(rng.integers(max(0, gp - 2), gp + 1)), gp) for gp in range(G)))
        assert eval_conv_lhs(norms, stale) >= norms.min() - 1e-15


def test_sample_variance_and_embedding():
    data = make_blobs(30, 3, 4, seed=1)
    z = data_embedding(LogisticLoss(4), data)
    assert z.shape == (30, 7)
    np.testing.assert_allclose(sample_variance(QuadraticLoss(), data),
                               np.var(data.features, axis=0, ddof=1).sum())


def test_estimate_constants_quadratic_is_exact_where_closed_form():
    parts = [make_blobs(25, 3, 2, seed=s) for s in range(3)]
    c = estimate_constants(QuadraticLoss(), parts, 6, 0)
    assert c.estimated
    assert c.smoothness == pytest.approx(1.0)
    assert c.data_variability == pytest.approx(1.0)
    mus = np.array([p.features.mean(0) for p in parts])
    np.testing.assert_allclose(c.dissimilarity, np.sum((mus - mus.mean(0)) ** 2, axis=1), rtol=1e-10)
    big = c.inflated(1.2)
    assert big.smoothness == pytest.approx(1.2) and big.initial_loss_gap == c.initial_loss_gap


def test_constants_reject_negative():
    with pytest.raises(ValueError):
        BoundConstants(-1, 1, [1], [1], 1, 1, 1, 1)


def test_scaling_report_matches_bound_evaluator():
    c = unit_constants(3)
    rep = stepsize_horizon_scaling(ScalingInputs(c, 3, 0.3, 2, 4, 20), 0.1, 0.5)
    for k in ("a", "b", "c", "d_rho2", "d_rho", "e_root", "e_lin"):
        assert rep.max_relative_spread(k) < 1e-9
    assert [r["G"] for r in rep.rows] == [8, 32, 128]
