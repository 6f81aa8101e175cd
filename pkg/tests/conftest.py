from pathlib import Path

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from mafl.core import require_valid, scenario_from_dict

ROOT = Path(__file__).resolve().parents[1]
SCENARIOS = ROOT / "scenarios"

settings.register_profile("repo", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("repo")


def small_config(devices=3, tasks=2, G=4, K=2, loss="quadratic", budget=50.0, points=120, e_max=5, q=100.0,
                 max_labels=2):
    return {
        "seed": 1,
        "objective_weights": [1e-2, 1.0, 1.0],
        "max_labels_per_device": max_labels,
        "devices": {"count": devices, "cpu_freq_min": 1e6, "cpu_freq_max": 1e8, "energy_budget": budget},
        "tasks": [{"num_aggregations": G, "loss": loss, "qoe_window": q, "staleness_limit": K,
                   "learning_rate": 0.05, "e_min": 1, "e_max": e_max,
                   "dataset": {"points": points, "features": 4, "classes": 3, "seed": 10 + j}}
                  for j in range(tasks)],
    }


def small_scenario(**kw):
    return require_valid(scenario_from_dict(small_config(**kw)))


@pytest.fixture
def tiny_path():
    return SCENARIOS / "tiny.toml"


@pytest.fixture
def desk_path():
    return SCENARIOS / "desk.toml"


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# lines recorded by the acceptance suite, echoed in the terminal summary
CRITERION_LINES = []


def pytest_terminal_summary(terminalreporter):
    if CRITERION_LINES:
        terminalreporter.section("acceptance criteria")
        for line in CRITERION_LINES:
            terminalreporter.write_line(line)
