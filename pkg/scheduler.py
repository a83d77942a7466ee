import logging
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from exceptions import NoOptimizableComponents, SchedulerError
from models import DEFAULT_TAU, SchedulerStrategy

logger = logging.getLogger(__name__)


def boltzmann_probabilities(rhos, tau):
    """Softmax of rho / tau with max-subtraction"""
    if tau <= 0:
        raise SchedulerError(f"Boltzmann temperature must be positive, got {tau}")
    values = np.asarray(rhos, dtype=float)
    if values.size == 0:
        raise NoOptimizableComponents()
    logits = (values - values.max()) / tau
    weights = np.exp(logits)
    return weights / weights.sum()


def _candidates(densities, component_ids):
    ids = list(component_ids) if component_ids is not None else densities.ids
    if not ids:
        raise NoOptimizableComponents()
    return ids


def boltzmann_select(densities, tau, rng, component_ids=None):
    ids = _candidates(densities, component_ids)
    probs = boltzmann_probabilities([densities.rho(cid) for cid in ids], tau)
    return ids[int(rng.choice(len(ids), p=probs))]


@dataclass
class SchedulerState:
    strategy: SchedulerStrategy = SchedulerStrategy.DENSITY_BOLTZMANN
    tau: float = DEFAULT_TAU
    round_robin_cursor: int = 0
    rng_seed: int = 42
    rng: Optional[np.random.Generator] = field(default=None, repr=False)

    def __post_init__(self):
        self.strategy = SchedulerStrategy(self.strategy)
        if self.strategy is SchedulerStrategy.DENSITY_BOLTZMANN and self.tau <= 0:
            raise SchedulerError(f"Boltzmann temperature must be positive, got {self.tau}")
        if self.rng is None:
            self.rng = np.random.default_rng(self.rng_seed)


def select_component(state, densities, component_ids=None):
    ids = _candidates(densities, component_ids)
    strategy = state.strategy

    if strategy is SchedulerStrategy.RANDOM:
        chosen = ids[int(state.rng.integers(len(ids)))]
    elif strategy is SchedulerStrategy.ROUND_ROBIN:
        cursor = state.round_robin_cursor % len(ids)
        chosen = ids[cursor]
        state.round_robin_cursor = (cursor + 1) % len(ids)
    elif strategy is SchedulerStrategy.GREEDY:
        rhos = [densities.rho(cid) for cid in ids]
        chosen = ids[int(np.argmax(rhos))]
    else:
        chosen = boltzmann_select(densities, state.tau, state.rng, ids)

    logger.debug(f"Scheduler ({strategy.value}) selected {chosen}")
    return chosen
