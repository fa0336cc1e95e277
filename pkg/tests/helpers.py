"""Shared builders and independent brute-force oracles for the test suite.

The oracles here deliberately avoid the library's own solution paths:
win-set search is exhaustive enumeration, the realized multiplier jump is
found by density sorting, and expected values come from quadrature.
"""

from __future__ import annotations

import itertools

import numpy as np
from scipy.special import ndtri

from dualbid.mechanisms import MechanismSpec
from dualbid.oracle import LogRecord, OpportunityLog


def enumerate_best_winset(outcomes: list[tuple[float, float]], budget: float):
    """Exhaustive primal search over all win subsets.

    outcomes: (value, cost_if_won) per opportunity.  Returns
    (best_value, best_mask).
    """
    best_value = 0.0
    best_mask = (0,) * len(outcomes)
    for mask in itertools.product((0, 1), repeat=len(outcomes)):
        cost = sum(c for (_, c), m in zip(outcomes, mask) if m)
        if cost <= budget + 1e-12:
            value = sum(v for (v, _), m in zip(outcomes, mask) if m)
            if value > best_value:
                best_value = value
                best_mask = mask
    return best_value, best_mask


def threshold_lambda(outcomes: list[tuple[float, float]], budget: float):
    """Independent jump-point oracle for realized second-price logs.

    Bidding value/lam wins an opportunity iff lam <= value/cost, so replayed
    spend steps down at the sorted value-per-cost thresholds; the optimum is
    the first threshold where cumulative cost exceeds the budget.  Returns
    None when even winning everything fits the budget.
    """
    thresholds = sorted(((v / c, c) for v, c in outcomes), reverse=True)
    cumulative = 0.0
    for theta, cost in thresholds:
        cumulative += cost
        if cumulative > budget + 1e-12:
            return theta
    return None


def quantile_lognormal_log(
    n: int,
    mech: MechanismSpec,
    value_mu: float,
    value_sigma: float,
    placement: str = "p",
) -> OpportunityLog:
    """Distributional log whose values are lognormal quantile midpoints, so
    empirical averages match population integrals to O(1/n^2)."""
    qs = (np.arange(n) + 0.5) / n
    values = np.exp(value_mu + value_sigma * ndtri(qs))
    return OpportunityLog(
        [
            LogRecord(time=float(i), placement=placement, value=float(v), mechanism=mech)
            for i, v in enumerate(values)
        ]
    )


def stationary_scenario(**overrides) -> dict:
    """Single-placement second-price lognormal scenario config dict."""
    cfg = {
        "version": 1,
        "seed": 7,
        "intervals": 220,
        "budget": 110.0,
        "placements": [
            {
                "id": "feed",
                "auction": "second_price",
                "reserve": 0.0,
                "competitor": {"family": "lognormal", "mu": 0.0, "sigma": 1.0},
                "value": {"mu": -1.0, "sigma": 0.5},
                "intensity": 80.0,
            }
        ],
        "agent": {
            "mode": "additive",
            "xi": 2.0,
            "batch": "interval",
            "forecast": "total",
            "initialization": "coldstart",
        },
    }
    agent_overrides = overrides.pop("agent", {})
    cfg.update(overrides)
    cfg["agent"] = {**cfg["agent"], **agent_overrides}
    return cfg


def mixed_scenario(**overrides) -> dict:
    """Two placements, second price + first price, shared budget."""
    cfg = {
        "version": 1,
        "seed": 13,
        "intervals": 220,
        "budget": 120.0,
        "placements": [
            {
                "id": "feed",
                "auction": "second_price",
                "reserve": 0.0,
                "competitor": {"family": "lognormal", "mu": 0.0, "sigma": 1.0},
                "value": {"mu": -1.0, "sigma": 0.5},
                "intensity": 50.0,
            },
            {
                "id": "network",
                "auction": "first_price",
                "reserve": 0.0,
                "competitor": {"family": "lognormal", "mu": -0.3, "sigma": 0.8},
                "value": {"mu": -0.9, "sigma": 0.5},
                "intensity": 50.0,
            },
        ],
        "agent": {
            "mode": "additive",
            "xi": 2.0,
            "batch": "interval",
            "forecast": "total",
            "initialization": "coldstart",
        },
    }
    agent_overrides = overrides.pop("agent", {})
    cfg.update(overrides)
    cfg["agent"] = {**cfg["agent"], **agent_overrides}
    return cfg


def mc_outcomes(mech: MechanismSpec, bid: float, draws: np.ndarray):
    """Vectorized mirror of simulate_outcome for Monte Carlo checks.

    Agreement with the scalar operation is asserted elsewhere on a
    subsample; this exists purely so million-draw tests stay fast.
    """
    clearing = np.atleast_1d(np.asarray(mech.competitor.quantile(draws)))
    price = np.maximum(clearing, mech.reserve)
    won = bid >= price
    pay = bid if mech.is_first_price else price
    cost = np.where(won, pay, 0.0)
    return won, cost
