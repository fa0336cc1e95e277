"""Optimal bid computation under a vector of constraint multipliers.

The bid for an opportunity of value v is driven by the adjusted value

    (1 + mu*C + mu_k) / (lam + lam_k + mu) * v

where lam paces the overall budget, mu enforces a cost-per-result target C,
and lam_k / mu_k act only inside their delivery or guarantee windows.  In a
second price auction the optimal bid equals the adjusted value; in a first
price auction it is shaded down through the inverse of b + G(b)/g(b).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .mechanisms import (
    EmpiricalBids,
    MechanismSpec,
    cost_derivative,
    expected_cost,
    win_density,
    win_prob,
)

LAMBDA_FLOOR = 1e-9
DEFAULT_BID_CAP = 1e4

_INVERT_REL_TOL = 1e-9
_INVERT_MAX_ITER = 64
_GRID_POINTS = 10_001


@dataclass(frozen=True)
class MultiplierVector:
    """Constraint multipliers in effect for one opportunity.

    lam_k and mu_k are the window multipliers of whichever delivery /
    guarantee window (if any) is active; 0 means inactive.
    """

    lam: float
    mu: float = 0.0
    cost_target: float | None = None
    lam_k: float = 0.0
    mu_k: float = 0.0

    def __post_init__(self):
        for name in ("lam", "mu", "lam_k", "mu_k"):
            if getattr(self, name) < 0:
                raise ValueError(f"multiplier {name} must be >= 0")
        if self.mu > 0 and self.cost_target is None:
            raise ValueError("mu > 0 requires a cost_target")

    @property
    def numerator(self) -> float:
        boost = self.mu * self.cost_target if self.cost_target is not None else 0.0
        return 1.0 + boost + self.mu_k

    @property
    def denominator(self) -> float:
        return self.lam + self.lam_k + self.mu


@dataclass(frozen=True)
class BidDecision:
    bid: float
    adjusted_value: float
    surplus_at_bid: float
    flags: tuple[str, ...] = ()


def adjusted_value(value: float, m: MultiplierVector) -> float:
    """Value scaled by the active multipliers; reduces to value/lam when only
    the budget constraint is active.  The denominator is floored at
    LAMBDA_FLOOR to keep bids finite."""
    if value < 0:
        raise ValueError("value must be >= 0")
    return m.numerator / max(m.denominator, LAMBDA_FLOOR) * value


def surplus(mech: MechanismSpec, adjusted: float, b) -> float:
    """adjusted * G(b) - H(b): the objective each bid maximizes."""
    return adjusted * win_prob(mech, b) - expected_cost(mech, b)


def _markup(mech: MechanismSpec, b):
    """b + G(b)/g(b), the map inverted for first price bidding.

    The ratio is 0 where the bid cannot win and +inf above the support top,
    which keeps the map monotone for log-concave bid models.
    """
    arr = np.asarray(b, dtype=float)
    G = np.asarray(win_prob(mech, arr))
    g = np.asarray(win_density(mech, arr))
    ratio = np.where(G <= 0.0, 0.0, np.where(g <= 0.0, np.inf, G / np.maximum(g, 1e-300)))
    return arr + ratio


def _refine_peak(mech: MechanismSpec, adjusted: float, lo: float, hi: float) -> float:
    """Golden-section polish of the surplus maximum inside [lo, hi]."""
    inv_phi = (np.sqrt(5.0) - 1.0) / 2.0
    a, b = lo, hi
    c = b - inv_phi * (b - a)
    d = a + inv_phi * (b - a)
    fc = surplus(mech, adjusted, c)
    fd = surplus(mech, adjusted, d)
    for _ in range(80):
        if fc >= fd:
            b, d, fd = d, c, fc
            c = b - inv_phi * (b - a)
            fc = surplus(mech, adjusted, c)
        else:
            a, c, fc = c, d, fd
            d = a + inv_phi * (b - a)
            fd = surplus(mech, adjusted, d)
    return 0.5 * (a + b)


def _grid_best_bid(mech: MechanismSpec, adjusted: float, hi: float) -> float:
    grid = np.linspace(0.0, hi, _GRID_POINTS)
    if isinstance(mech.competitor, EmpiricalBids):
        # step win curves peak exactly at the sample atoms
        atoms = np.asarray(mech.competitor.samples)
        grid = np.concatenate([grid, atoms[atoms <= hi]])
    values = surplus(mech, adjusted, grid)
    i = int(np.argmax(values))
    refined = _refine_peak(
        mech,
        adjusted,
        max(grid[i] - hi / (_GRID_POINTS - 1), 0.0),
        min(grid[i] + hi / (_GRID_POINTS - 1), hi),
    )
    if surplus(mech, adjusted, refined) >= values[i]:
        return float(refined)
    return float(grid[i])


def _empirical_markup_monotone(mech: MechanismSpec, hi: float) -> bool:
    probe = _markup(mech, np.linspace(0.0, hi, 64))
    finite = probe[np.isfinite(probe)]
    return bool(np.all(np.diff(finite) >= -1e-12))


def shade_bids(mech: MechanismSpec, adjusted, bid_cap: float = DEFAULT_BID_CAP):
    """Vectorized first-price shading: solve b + G(b)/g(b) = adjusted.

    Elements whose target exceeds the markup at the support top win with
    certainty at the top; anything else that fails the residual check
    (non-monotone empirical maps, reserve discontinuities) falls back to a
    grid maximization of the surplus.
    """
    xs = np.atleast_1d(np.asarray(adjusted, dtype=float))
    scalar = np.ndim(adjusted) == 0
    hi = np.minimum(xs, bid_cap)
    lo = np.zeros_like(xs)
    positive = xs > 0

    lo_w = lo.copy()
    hi_w = hi.copy()
    for _ in range(_INVERT_MAX_ITER):
        mid = 0.5 * (lo_w + hi_w)
        below = _markup(mech, mid) < xs
        lo_w = np.where(below, mid, lo_w)
        hi_w = np.where(below, hi_w, mid)
    bids = np.where(positive, 0.5 * (lo_w + hi_w), 0.0)

    residual = np.abs(_markup(mech, bids) - xs)
    ok = ~positive | (residual <= _INVERT_REL_TOL * np.maximum(1.0, xs))

    top = mech.competitor.support_top
    if np.isfinite(top) and top <= bid_cap:
        markup_top = float(_markup(mech, top))
        certain = positive & ~ok & (xs >= markup_top)
        bids = np.where(certain, top, bids)
        ok |= certain

    for i in np.flatnonzero(~ok):
        bids[i] = _grid_best_bid(mech, float(xs[i]), float(hi[i]))

    fell_back = bool(np.any(~ok))
    out = float(bids[0]) if scalar else bids
    return out, fell_back


def invert_markup(mech: MechanismSpec, x: float, bid_cap: float = DEFAULT_BID_CAP) -> float:
    """Inverse of the first-price markup map at x (scalar convenience)."""
    if x < 0:
        raise ValueError("markup target must be >= 0")
    if not mech.is_first_price:
        raise ValueError("markup inversion applies to first price auctions only")
    if isinstance(mech.competitor, EmpiricalBids) and not _empirical_markup_monotone(
        mech, min(x, bid_cap)
    ):
        return _grid_best_bid(mech, x, min(x, bid_cap))
    bid, _ = shade_bids(mech, x, bid_cap)
    return bid


def optimal_bid(
    mech: MechanismSpec, adjusted: float, bid_cap: float = DEFAULT_BID_CAP
) -> BidDecision:
    """Surplus-maximizing bid for an adjusted value.

    Second price bids the adjusted value itself (capped); first price shades
    it through the inverse markup map.
    """
    if adjusted < 0:
        raise ValueError("adjusted value must be >= 0")
    flags: tuple[str, ...] = ()
    if adjusted == 0.0:
        return BidDecision(bid=0.0, adjusted_value=0.0, surplus_at_bid=0.0)
    if mech.is_first_price:
        if isinstance(mech.competitor, EmpiricalBids) and not _empirical_markup_monotone(
            mech, min(adjusted, bid_cap)
        ):
            bid = _grid_best_bid(mech, adjusted, min(adjusted, bid_cap))
            flags = ("inversion_fallback",)
        else:
            bid, fell_back = shade_bids(mech, adjusted, bid_cap)
            if fell_back:
                flags = ("inversion_fallback",)
        bid = min(bid, adjusted, bid_cap)
    else:
        bid = adjusted
        if bid > bid_cap:
            bid = bid_cap
            flags = ("bid_capped",)
    return BidDecision(
        bid=bid,
        adjusted_value=adjusted,
        surplus_at_bid=surplus(mech, adjusted, bid),
        flags=flags,
    )


def optimal_bids(mech: MechanismSpec, adjusted, bid_cap: float = DEFAULT_BID_CAP):
    """Vectorized optimal_bid over an array of adjusted values (bids only)."""
    xs = np.asarray(adjusted, dtype=float)
    if mech.is_first_price:
        bids, _ = shade_bids(mech, xs, bid_cap)
        return np.minimum(np.atleast_1d(np.asarray(bids)), np.minimum(xs, bid_cap))
    return np.minimum(xs, bid_cap)


def make_bid(
    mech: MechanismSpec,
    value: float,
    m: MultiplierVector,
    bid_cap: float = DEFAULT_BID_CAP,
) -> BidDecision:
    """Full bid pipeline for one opportunity: adjust the value, then solve
    for the optimal bid.  A clamped denominator is surfaced in the flags."""
    adjusted = adjusted_value(value, m)
    decision = optimal_bid(mech, adjusted, bid_cap)
    if m.denominator < LAMBDA_FLOOR:
        decision = BidDecision(
            bid=decision.bid,
            adjusted_value=decision.adjusted_value,
            surplus_at_bid=decision.surplus_at_bid,
            flags=decision.flags + ("denominator_clamped",),
        )
    return decision


def stationarity_residual(mech: MechanismSpec, value: float, lam: float, bid: float) -> float:
    """|v*g(b) - lam*h(b)|, the first-order optimality residual at a bid."""
    return abs(value * win_density(mech, bid) - lam * cost_derivative(mech, bid))
