import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from mafl.core import ChannelParams
from mafl.scheduling import round_robin
from mafl.wireless import (DOWNLINK, UPLINK, channel_rng, compute_energy, compute_time, link_budget, link_rate,
                           link_table, local_period, pathloss_linear, period_breakdown, transfer_cost)

from conftest import small_scenario
from helpers import flat_plan


def test_link_rate_hand_value():
    # 1 MHz, SNR = 1e-10 * 0.1 / (1e-20 * 1e6) = 1000
    r = link_rate(1e6, 1e-10, 0.1, 1e-20)
    assert r == pytest.approx(1e6 * math.log2(1001.0), rel=1e-12)
    assert link_rate(1e6, 0.0, 0.1, 1e-20) == 0.0
    with pytest.raises(ValueError):
        link_rate(0.0, 1.0, 1.0, 1.0)


@given(st.floats(1e3, 1e8), st.floats(1e-14, 1e-6), st.floats(1e-3, 1.0))
def test_link_rate_monotone_in_gain(bw, h2, p):
    assert link_rate(bw, 2 * h2, p, 4e-21) > link_rate(bw, h2, p, 4e-21)


def test_pathloss_hand_value():
    ch = ChannelParams(pathloss_ref_db=-30.0, ref_distance=1.0, pathloss_exponent=3.0)
    # -30 - 30 log10(10) = -60 dB
    assert pathloss_linear(10.0, ch) == pytest.approx(1e-6)
    with pytest.raises(ValueError):
        pathloss_linear(0.5, ch)


def test_compute_and_transfer_costs():
    assert compute_time(1, 1000, 3, 20, 1e8) == pytest.approx(1000 * 3 * 20 / 1e8)
    assert compute_energy(1, 1e-27, 3, 1000, 20, 1e8) == pytest.approx(1e-27 * 3 * 1000 * 20 * 1e16)
    assert compute_time(0, 1000, 3, 20, 0.0) == 0.0
    d, e = transfer_cost(1, 32, 100, 3200.0, 0.5)
    assert (d, e) == (1.0, 0.5)
    assert transfer_cost(0, 32, 100, 0.0, 0.5) == (0.0, 0.0)
    with pytest.raises(ValueError):
        transfer_cost(1, 32, 100, 0.0, 0.5)
    assert local_period(2.0, 0, 1.0, 0.5, 0.25) == 1.75
    assert local_period(2.0, 1, 1.0, 0.5, 0.25) == 3.75
    with pytest.raises(ValueError):
        local_period(-1.0, 1, 0, 0, 0)


def test_fading_is_keyed_by_counter():
    sc = small_scenario()
    a = link_budget(sc, 1, 2, UPLINK)
    link_budget(sc, 0, 0, DOWNLINK)
    b = link_budget(sc, 1, 2, UPLINK)
    assert a == b
    assert link_budget(sc, 1, 2, DOWNLINK).gain_squared != a.gain_squared
    x = channel_rng(0, 1, 2, UPLINK).standard_normal(2)
    np.testing.assert_array_equal(x, channel_rng(0, 1, 2, UPLINK).standard_normal(2))


def test_link_table_matches_link_budget():
    sc = small_scenario()
    t = link_table(sc, 0)
    bits = sc.tasks[0].bits_per_param * sc.tasks[0].model_dim
    for i in range(sc.num_devices):
        for g in range(sc.tasks[0].num_aggregations):
            assert t.uplink_rate[i, g] == link_budget(sc, i, g, UPLINK).rate
            assert t.downlink_delay[i, g] == pytest.approx(bits / link_budget(sc, i, g, DOWNLINK).rate)


def test_period_breakdown_assembles_components():
    sc = small_scenario()
    R, U = round_robin(sc.num_devices, sc.tasks[0].num_aggregations)
    plan = flat_plan(sc, 0, idle=0.3)
    pb = period_breakdown(sc, 0, R, U, plan)
    np.testing.assert_allclose(pb.total, R * pb.idle + pb.downlink + pb.compute + pb.uplink)
    assert np.all(pb.compute[R == 0] == 0) and np.all(pb.uplink[U == 0] == 0)
    assert np.all(pb.idle[R == 0] == 0)
    assert pb.device_energy() == pytest.approx(pb.compute_energy.sum() + pb.uplink_energy.sum())
    dev = sc.devices[0]
    assert pb.compute_energy[0, 0] == pytest.approx(
        dev.chipset_capacitance * 2 * dev.cycles_per_sample[0] * 3 * plan.cpu_freq[0, 0] ** 2)
    assert pb.downlink_energy[0, 0] == pytest.approx(sc.downlink_power * pb.downlink[0, 0])
