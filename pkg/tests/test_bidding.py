"""Bid engine tests: adjusted values, markup inversion, surplus optimality."""

import numpy as np
import pytest
from scipy.integrate import quad

from dualbid.bidding import (
    DEFAULT_BID_CAP,
    MultiplierVector,
    adjusted_value,
    invert_markup,
    make_bid,
    optimal_bid,
    shade_bids,
    stationarity_residual,
    surplus,
)
from dualbid.mechanisms import (
    EmpiricalBids,
    LognormalBids,
    MechanismSpec,
    UniformBids,
    win_prob,
)

UNIFORM_FP = MechanismSpec("first_price", 0.0, UniformBids(0.0, 1.0))
UNIFORM_SP = MechanismSpec("second_price", 0.0, UniformBids(0.0, 1.0))
LOGN_FP = MechanismSpec("first_price", 0.0, LognormalBids(0.0, 1.0))
LOGN_SP = MechanismSpec("second_price", 0.0, LognormalBids(0.0, 1.0))


class TestAdjustedValue:
    def test_budget_only(self):
        assert adjusted_value(1.0, MultiplierVector(lam=2.0)) == pytest.approx(0.5)

    def test_cost_control_term(self):
        m = MultiplierVector(lam=1.0, mu=1.0, cost_target=0.2)
        assert adjusted_value(1.0, m) == pytest.approx(0.6)

    def test_window_terms(self):
        m = MultiplierVector(lam=1.0, lam_k=1.0, mu_k=0.5)
        assert adjusted_value(1.0, m) == pytest.approx(0.75)

    def test_reduces_to_v_over_lam(self):
        for lam in (0.25, 1.0, 3.7):
            m = MultiplierVector(lam=lam)
            assert adjusted_value(2.3, m) == 2.3 / lam

    def test_validation(self):
        with pytest.raises(ValueError):
            MultiplierVector(lam=-1.0)
        with pytest.raises(ValueError):
            MultiplierVector(lam=1.0, mu=0.5)  # mu without a cost target
        with pytest.raises(ValueError):
            adjusted_value(-1.0, MultiplierVector(lam=1.0))


class TestInvertMarkup:
    def test_uniform_closed_form(self):
        # on uniform(0,1) the map is 2b, so the inverse is x/2
        assert invert_markup(UNIFORM_FP, 1.0) == pytest.approx(0.5, abs=1e-9)
        assert invert_markup(UNIFORM_FP, 0.62) == pytest.approx(0.31, abs=1e-9)

    def test_clamps_to_support_top(self):
        # surplus (3-b)*G(b) peaks at the support top where G is already 1
        grid = np.linspace(0, 3, 30001)
        best = grid[np.argmax(3.0 * win_prob(UNIFORM_FP, grid) - grid * win_prob(UNIFORM_FP, grid))]
        assert best == pytest.approx(1.0, abs=1e-3)
        assert invert_markup(UNIFORM_FP, 3.0) == pytest.approx(1.0, abs=1e-6)

    def test_zero(self):
        assert invert_markup(UNIFORM_FP, 0.0) == 0.0

    def test_second_price_rejected(self):
        with pytest.raises(ValueError):
            invert_markup(UNIFORM_SP, 1.0)


class TestOptimalBid:
    def test_second_price_identity(self):
        assert optimal_bid(UNIFORM_SP, 0.5).bid == 0.5

    def test_second_price_cap(self):
        decision = optimal_bid(UNIFORM_SP, 1e9)
        assert decision.bid == DEFAULT_BID_CAP
        assert "bid_capped" in decision.flags

    def test_first_price_uniform(self):
        assert optimal_bid(UNIFORM_FP, 1.0).bid == pytest.approx(0.5, abs=1e-9)

    def test_zero_value(self):
        assert optimal_bid(UNIFORM_FP, 0.0).bid == 0.0


class TestSurplus:
    def test_second_price_quadrature(self):
        h1, _ = quad(lambda z: z, 0.0, 1.0)
        assert surplus(UNIFORM_SP, 1.0, 1.0) == pytest.approx(1.0 - h1)

    def test_first_price(self):
        assert surplus(UNIFORM_FP, 1.0, 0.5) == pytest.approx(0.25)

    def test_zero(self):
        assert surplus(UNIFORM_SP, 0.0, 0.0) == 0.0


def _random_models(rng, n):
    models = []
    for _ in range(n):
        if rng.random() < 0.5:
            comp = LognormalBids(rng.uniform(-0.5, 0.5), rng.uniform(0.4, 1.4))
        else:
            lo = rng.uniform(0.0, 0.4)
            comp = UniformBids(lo, lo + rng.uniform(0.5, 2.0))
        models.append(MechanismSpec("first_price", 0.0, comp))
    return models


def test_shading_bound_and_grid_optimality():
    rng = np.random.default_rng(123)
    models = _random_models(rng, 200)
    for mech in models:
        x = float(rng.uniform(0.05, 4.0))
        decision = optimal_bid(mech, x)
        assert decision.bid <= x + 1e-12, "first price bid must not exceed the adjusted value"
        grid = np.linspace(0.0, min(x, DEFAULT_BID_CAP), 10_001)
        best = float(np.max(surplus(mech, x, grid)))
        assert decision.surplus_at_bid >= best - 1e-6


def test_stationarity_at_interior_optima():
    rng = np.random.default_rng(5)
    for _ in range(50):
        mech = MechanismSpec(
            "first_price", 0.0, LognormalBids(rng.uniform(-0.3, 0.3), rng.uniform(0.5, 1.2))
        )
        value = float(rng.uniform(0.2, 2.0))
        lam = float(rng.uniform(0.5, 3.0))
        bid = optimal_bid(mech, value / lam).bid
        assert stationarity_residual(mech, value, lam, bid) <= 1e-6


def test_second_price_stationarity():
    # identity bidding satisfies v*g = lam*h because h = b*g at b = v/lam
    assert stationarity_residual(LOGN_SP, 1.2, 2.0, optimal_bid(LOGN_SP, 0.6).bid) <= 1e-12


@pytest.mark.parametrize("mech", [UNIFORM_FP, LOGN_FP, UNIFORM_SP, LOGN_SP])
def test_bid_monotone_in_multiplier(mech):
    value = 1.0
    lams = np.linspace(0.5, 6.0, 40)
    bids = [optimal_bid(mech, value / lam).bid for lam in lams]
    assert np.all(np.diff(bids) <= 1e-9)


def test_shade_bids_vector_matches_scalar():
    rng = np.random.default_rng(17)
    xs = rng.uniform(0.01, 3.0, 64)
    vector, _ = shade_bids(LOGN_FP, xs)
    for x, b in zip(xs, vector):
        assert invert_markup(LOGN_FP, float(x)) == pytest.approx(float(b), abs=1e-9)


def test_empirical_fallback_produces_valid_bid():
    rng = np.random.default_rng(3)
    mech = MechanismSpec("first_price", 0.0, EmpiricalBids(tuple(rng.lognormal(0.0, 0.8, 60))))
    x = 1.5
    decision = optimal_bid(mech, x)
    assert 0.0 <= decision.bid <= x
    grid = np.linspace(0.0, x, 10_001)
    best = float(np.max(surplus(mech, x, grid)))
    assert decision.surplus_at_bid >= best - 1e-6


def test_make_bid_flags_clamped_denominator():
    decision = make_bid(UNIFORM_SP, 1.0, MultiplierVector(lam=0.0))
    assert "denominator_clamped" in decision.flags
    assert decision.bid == DEFAULT_BID_CAP


def test_reserve_jump_first_price():
    # with a reserve the optimum may sit exactly at the reserve price
    mech = MechanismSpec("first_price", 0.5, UniformBids(0.0, 1.0))
    x = 0.7
    decision = optimal_bid(mech, x)
    grid = np.linspace(0.0, x, 10_001)
    best = float(np.max(surplus(mech, x, grid)))
    assert decision.surplus_at_bid >= best - 1e-6
