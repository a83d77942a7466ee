import math

import numpy as np
import pytest

from backward import DensityTable
from exceptions import NoOptimizableComponents, SchedulerError
from models import SchedulerStrategy
from scheduler import SchedulerState, boltzmann_probabilities, boltzmann_select, select_component


def table(rhos):
    densities = DensityTable([f"n{i}" for i in range(1, len(rhos) + 1)])
    for i, rho in enumerate(rhos, start=1):
        for _ in range(rho):
            densities.increment(f"n{i}")
    return densities


def frequencies(densities, tau, draws, seed=42):
    rng = np.random.default_rng(seed)
    counts = {cid: 0 for cid in densities.ids}
    for _ in range(draws):
        counts[boltzmann_select(densities, tau, rng)] += 1
    return {cid: n / draws for cid, n in counts.items()}


def test_uniform_when_densities_equal():
    assert boltzmann_probabilities([0, 0, 0], 1.0) == pytest.approx([1 / 3] * 3, abs=0)


def test_two_node_probability():
    expected = math.exp(2) / (math.exp(2) + 1)
    assert boltzmann_probabilities([2, 0], 1.0)[0] == pytest.approx(expected)
    assert frequencies(table([2, 0]), 1.0, 100000)["n1"] == pytest.approx(expected, abs=0.01)


def test_shift_invariance():
    rhos = np.array([5.0, 1.0, 3.0])
    base = boltzmann_probabilities(rhos, 0.7)
    for shift in (1.0, 100.0, 1e6):
        assert boltzmann_probabilities(rhos + shift, 0.7) == pytest.approx(base)


def test_low_temperature_is_greedy():
    assert boltzmann_probabilities([5, 1, 1], 1e-3)[0] == pytest.approx(1.0)
    assert frequencies(table([2, 0]), 0.01, 100000)["n1"] >= 0.999


def test_high_temperature_is_uniform():
    freq = frequencies(table([3, 0, 1]), 1000.0, 100000)
    tv = 0.5 * sum(abs(f - 1 / 3) for f in freq.values())
    assert tv < 0.02


def test_invalid_temperature():
    with pytest.raises(SchedulerError):
        boltzmann_probabilities([1, 2], 0.0)
    with pytest.raises(SchedulerError):
        SchedulerState(strategy=SchedulerStrategy.DENSITY_BOLTZMANN, tau=-1.0)


def test_no_candidates():
    with pytest.raises(NoOptimizableComponents):
        select_component(SchedulerState(), DensityTable([]))


def test_greedy_ties_break_to_lower_index():
    state = SchedulerState(strategy=SchedulerStrategy.GREEDY)
    assert select_component(state, table([3, 3, 1])) == "n1"
    assert select_component(state, table([1, 4, 4])) == "n2"


def test_round_robin_cycles():
    state = SchedulerState(strategy="round_robin")
    densities = table([0, 0, 0])
    picks = [select_component(state, densities) for _ in range(4)]
    assert picks == ["n1", "n2", "n3", "n1"]


def test_random_is_uniform_and_seeded():
    densities = table([9, 0, 0, 0])
    state = SchedulerState(strategy=SchedulerStrategy.RANDOM, rng_seed=42)
    picks = [select_component(state, densities) for _ in range(10000)]
    for cid in densities.ids:
        assert 0.23 <= picks.count(cid) / 10000 <= 0.27

    again = SchedulerState(strategy=SchedulerStrategy.RANDOM, rng_seed=42)
    assert [select_component(again, densities) for _ in range(10000)] == picks


def test_selection_restricted_to_given_ids():
    state = SchedulerState(strategy=SchedulerStrategy.GREEDY)
    assert select_component(state, table([9, 1, 2]), ["n2", "n3"]) == "n3"
