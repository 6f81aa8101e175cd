import itertools

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from mafl.scheduling import (ScheduleLimits, build_tensor, check_schedule, enumerate_feasible, pair_rounds,
                             pairing_weight, read_schedule_csv, round_robin, schedule_from_triples, staleness,
                             write_schedule_csv)


def binary_matrix(I, G):
    return st.lists(st.integers(0, 1), min_size=I * G, max_size=I * G).map(
        lambda v: np.array(v, dtype=np.int8).reshape(I, G))


def closed_form_oracle(R, U, K):
    # direct transcription of the product over a dense index cube
    I, G = R.shape
    X = np.zeros((I, G, G), dtype=int)
    for i, g, gp in itertools.product(range(I), range(G), range(G)):
        if 0 <= gp - g <= K:
            X[i, g, gp] = U[i, g] * R[i, gp] * np.prod([1 - U[i, k] for k in range(g + 1, gp)])
    return X


def pairing_oracle(R, U, K):
    I, G = R.shape
    X = np.zeros((I, G, G), dtype=int)
    for i, g, gp in itertools.product(range(I), range(G), range(G)):
        if 0 <= gp - g <= K:
            X[i, g, gp] = int(R[i, g] * U[i, gp] * np.prod([1 - U[i, k] for k in range(g, gp)])
                              * np.prod([1 - R[i, k] for k in range(g + 1, gp + 1)]))
    return X


@given(st.integers(1, 3).flatmap(lambda I: st.tuples(binary_matrix(I, 4), binary_matrix(I, 4))),
       st.integers(0, 3))
def test_build_tensor_matches_product_formula(RU, K):
    R, U = RU
    t = build_tensor(R, U, ScheduleLimits(K, 4))
    np.testing.assert_array_equal(t.dense(), closed_form_oracle(R, U, K))


@given(st.integers(1, 3).flatmap(lambda I: st.tuples(binary_matrix(I, 4), binary_matrix(I, 4))),
       st.integers(0, 3))
def test_pair_rounds_matches_product_formula(RU, K):
    R, U = RU
    t = pair_rounds(R, U, ScheduleLimits(K, 4))
    np.testing.assert_array_equal(t.dense(), pairing_oracle(R, U, K))
    for i, g, gp in t.triples:
        assert pairing_weight(R.astype(float), U.astype(float), i, g, gp) == 1.0


def independent_feasible(R, U, K):
    I, G = R.shape
    if not G <= R.sum() <= G + K:
        return False
    if np.any(U.sum(axis=0) != 1):
        return False
    for i in range(I):
        for gp in np.nonzero(U[i])[0]:
            prev = [g for g in np.nonzero(U[i])[0] if g < gp]
            lo = prev[-1] + 1 if prev else 0
            recs = [g for g in np.nonzero(R[i])[0] if lo <= g <= gp]
            if not recs or gp - recs[-1] > K:
                return False
    return True


@pytest.mark.parametrize("I,G,K,count", [(1, 1, 0, 1), (2, 2, 0, 4), (2, 3, 0, 8), (3, 2, 0, 9),
                                         (2, 2, 1, 16), (2, 3, 1, 60), (3, 2, 1, 69), (2, 3, 2, 96)])
def test_enumerate_feasible_counts(I, G, K, count):
    got = enumerate_feasible(I, ScheduleLimits(K, G))
    assert len(got) == count
    keys = {(R.tobytes(), U.tobytes()) for R, U in got}
    assert len(keys) == count
    oracle = 0
    for bits in itertools.product((0, 1), repeat=2 * I * G):
        a = np.array(bits, dtype=np.int8).reshape(2, I, G)
        if independent_feasible(a[0], a[1], K):
            oracle += 1
            assert (a[0].tobytes(), a[1].tobytes()) in keys
    assert oracle == count


def test_enumerate_rejects_large():
    with pytest.raises(ValueError):
        enumerate_feasible(5, ScheduleLimits(1, 5))


def test_round_robin_is_feasible_and_fresh():
    R, U = round_robin(3, 6)
    lim = ScheduleLimits(0, 6)
    assert check_schedule(R, U, np.ones((3, 6)), lim) == []
    t = pair_rounds(R, U, lim)
    assert staleness(t) == 0 and len(t.triples) == 6
    assert t.uploader(4) == (1, 4)


def names(v):
    return sorted({x.constraint for x in v})


def test_check_schedule_reports_each_constraint():
    lim = ScheduleLimits(1, 3)
    R = np.array([[1, 1, 1], [1, 1, 1]])
    U = np.array([[1, 1, 0], [1, 0, 0]])
    v = check_schedule(R, U, None, lim, idle=np.zeros((2, 3)))
    assert names(v) == ["reception_count", "single_uploader"]
    R = np.array([[1, 0, 0], [0, 0, 0]])
    U = np.array([[0, 0, 1], [0, 0, 0]])
    v = check_schedule(R, U, None, ScheduleLimits(1, 3), idle=np.array([[0, 1, 0], [0, 0, 0]]))
    assert {"single_uploader", "upload_count", "idle_gating", "staleness"} <= set(names(v))
    R = np.array([[1, 1], [0, 0]])
    U = np.array([[0, 0], [1, 1]])
    assert "staleness" in names(check_schedule(R, U, None, ScheduleLimits(1, 2)))


def test_upload_order_uses_period_sums():
    lim = ScheduleLimits(1, 2)
    R = np.array([[1, 0], [1, 0]])
    U = np.array([[1, 0], [0, 1]])
    # device 0 uploads at its period-0 end, device 1 at the end of its period 1
    assert check_schedule(R, U, np.array([[5.0, 1.0], [1.0, 1.0]]), lim) == []
    R = np.array([[1, 1, 0], [1, 0, 0]])
    U = np.array([[1, 1, 0], [0, 0, 1]])
    lim = ScheduleLimits(2, 3)
    assert check_schedule(R, U, np.ones((2, 3)), lim) == []
    v = check_schedule(R, U, np.array([[10.0, 1.0, 1.0], [1.0, 1.0, 1.0]]), lim)
    assert [x.indices for x in v if x.constraint == "upload_order"] == [(1,)]


def test_schedule_csv_roundtrip(tmp_path):
    lim = {0: ScheduleLimits(1, 3), 1: ScheduleLimits(0, 2)}
    R0 = np.array([[1, 0, 1], [1, 0, 0]])
    U0 = np.array([[1, 0, 1], [0, 1, 0]])
    t = {0: pair_rounds(R0, U0, lim[0]), 1: pair_rounds(*round_robin(2, 2), lim[1])}
    p = tmp_path / "s.csv"
    write_schedule_csv(p, t)
    back = read_schedule_csv(p, 2, lim)
    for j in t:
        assert back[j].triples == t[j].triples
    R, U = schedule_from_triples(t[0].triples, 2, 3)
    np.testing.assert_array_equal(R, R0)
    np.testing.assert_array_equal(U, U0)


def test_bad_matrices():
    with pytest.raises(ValueError):
        pair_rounds(np.array([[2, 0]]), np.array([[1, 0]]), ScheduleLimits(0, 2))
    with pytest.raises(ValueError):
        build_tensor(np.ones((2, 2)), np.ones((2, 3)), ScheduleLimits(0, 2))
    with pytest.raises(ValueError):
        ScheduleLimits(-1, 2)
