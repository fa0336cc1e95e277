"""Parametric auction mechanism models.

A mechanism couples an auction format (first or second price, with an
optional reserve) to a model of the highest competing bid.  From those two
ingredients it derives the quantities every other part of the system is
built on: the win probability ``G(b)``, the expected cost ``H(b)``, their
derivatives ``g`` and ``h``, and sampled auction outcomes.

Competing bids come in three flavours:

* ``LognormalBids(mu, sigma)`` -- heavy-tailed market, closed forms available.
* ``UniformBids(lo, hi)`` -- bounded support, closed forms available.
* ``EmpiricalBids(samples)`` -- step CDF from observed bids; the density is
  kernel-smoothed because bid inversion needs a derivative.

All functions accept a scalar bid or a numpy array of bids and return the
matching shape.  Nothing here holds random state: outcome simulation takes
the uniform draw as an argument.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import ndtr, ndtri

FIRST_PRICE = "first_price"
SECOND_PRICE = "second_price"

_SQRT_2PI = math.sqrt(2.0 * math.pi)


class MechanismError(ValueError):
    """Invalid mechanism parameters or bid outside the operation's domain."""


class UnsupportedPointError(MechanismError):
    """Density requested where the bid model has an atom (degenerate sample)."""


def _as_array(b):
    arr = np.asarray(b, dtype=float)
    return arr, arr.ndim == 0


def _ret(arr, scalar):
    return float(arr) if scalar else arr


@dataclass(frozen=True)
class LognormalBids:
    """Highest competing bid ~ Lognormal(mu, sigma)."""

    mu: float
    sigma: float

    family = "lognormal"

    def __post_init__(self):
        if not self.sigma > 0:
            raise MechanismError(f"lognormal sigma must be > 0, got {self.sigma}")

    def cdf(self, b):
        arr, scalar = _as_array(b)
        with np.errstate(divide="ignore"):
            z = (np.log(np.where(arr > 0, arr, 1.0)) - self.mu) / self.sigma
        out = np.where(arr > 0, ndtr(z), 0.0)
        return _ret(out, scalar)

    def pdf(self, b):
        arr, scalar = _as_array(b)
        safe = np.where(arr > 0, arr, 1.0)
        z = (np.log(safe) - self.mu) / self.sigma
        out = np.where(arr > 0, np.exp(-0.5 * z * z) / (safe * self.sigma * _SQRT_2PI), 0.0)
        return _ret(out, scalar)

    def partial_expectation(self, b):
        """Integral of z dF(z) from 0 to b (partial mean of the bid)."""
        arr, scalar = _as_array(b)
        safe = np.where(arr > 0, arr, 1.0)
        z = (np.log(safe) - self.mu - self.sigma**2) / self.sigma
        out = np.where(arr > 0, math.exp(self.mu + 0.5 * self.sigma**2) * ndtr(z), 0.0)
        return _ret(out, scalar)

    def quantile(self, u):
        arr, scalar = _as_array(u)
        out = np.exp(self.mu + self.sigma * ndtri(np.clip(arr, 1e-300, 1.0 - 1e-16)))
        out = np.where(arr <= 0.0, 0.0, out)
        return _ret(out, scalar)

    @property
    def support_top(self) -> float:
        return math.inf

    def mean(self) -> float:
        return math.exp(self.mu + 0.5 * self.sigma**2)


@dataclass(frozen=True)
class UniformBids:
    """Highest competing bid ~ Uniform(lo, hi) with 0 <= lo < hi."""

    lo: float
    hi: float

    family = "uniform"

    def __post_init__(self):
        if not (0 <= self.lo < self.hi):
            raise MechanismError(f"uniform bounds need 0 <= lo < hi, got [{self.lo}, {self.hi}]")

    def cdf(self, b):
        arr, scalar = _as_array(b)
        out = np.clip((arr - self.lo) / (self.hi - self.lo), 0.0, 1.0)
        return _ret(out, scalar)

    def pdf(self, b):
        arr, scalar = _as_array(b)
        inside = (arr >= self.lo) & (arr <= self.hi)
        out = np.where(inside, 1.0 / (self.hi - self.lo), 0.0)
        return _ret(out, scalar)

    def partial_expectation(self, b):
        arr, scalar = _as_array(b)
        x = np.clip(arr, self.lo, self.hi)
        out = (x**2 - self.lo**2) / (2.0 * (self.hi - self.lo))
        out = np.where(arr < self.lo, 0.0, out)
        return _ret(out, scalar)

    def quantile(self, u):
        arr, scalar = _as_array(u)
        return _ret(self.lo + np.clip(arr, 0.0, 1.0) * (self.hi - self.lo), scalar)

    @property
    def support_top(self) -> float:
        return self.hi

    def mean(self) -> float:
        return 0.5 * (self.lo + self.hi)


@dataclass(frozen=True)
class EmpiricalBids:
    """Highest competing bid drawn from an observed sample.

    The CDF is the sample step function; the density is a Gaussian kernel
    estimate (Silverman bandwidth 1.06 * s * n^(-1/5)) because downstream
    bid inversion needs a derivative.  Partial expectations integrate the
    step measure exactly so that simulated outcomes match expected cost.
    """

    samples: tuple[float, ...]
    _sorted: np.ndarray = field(init=False, repr=False, compare=False)
    _cumsum: np.ndarray = field(init=False, repr=False, compare=False)
    _bandwidth: float = field(init=False, repr=False, compare=False)

    family = "empirical"

    def __post_init__(self):
        if len(self.samples) == 0:
            raise MechanismError("empirical bid model needs at least one sample")
        arr = np.sort(np.asarray(self.samples, dtype=float))
        if arr[0] < 0:
            raise MechanismError("empirical bid samples must be >= 0")
        object.__setattr__(self, "_sorted", arr)
        object.__setattr__(self, "_cumsum", np.concatenate([[0.0], np.cumsum(arr)]))
        n = len(arr)
        sd = float(np.std(arr, ddof=1)) if n > 1 else 0.0
        object.__setattr__(self, "_bandwidth", 1.06 * sd * n ** (-0.2))

    def cdf(self, b):
        arr, scalar = _as_array(b)
        idx = np.searchsorted(self._sorted, arr, side="right")
        return _ret(idx / len(self._sorted), scalar)

    def pdf(self, b):
        if self._bandwidth <= 0:
            raise UnsupportedPointError(
                "empirical bid sample is degenerate (single atom); no density exists"
            )
        arr, scalar = _as_array(b)
        z = (arr[..., None] - self._sorted) / self._bandwidth
        out = np.exp(-0.5 * z * z).sum(axis=-1) / (len(self._sorted) * self._bandwidth * _SQRT_2PI)
        return _ret(out, scalar)

    def partial_expectation(self, b):
        arr, scalar = _as_array(b)
        idx = np.searchsorted(self._sorted, arr, side="right")
        return _ret(self._cumsum[idx] / len(self._sorted), scalar)

    def quantile(self, u):
        arr, scalar = _as_array(u)
        n = len(self._sorted)
        idx = np.clip((np.clip(arr, 0.0, 1.0) * n).astype(int), 0, n - 1)
        return _ret(self._sorted[idx], scalar)

    @property
    def support_top(self) -> float:
        return float(self._sorted[-1])

    def mean(self) -> float:
        return float(self._sorted.mean())


CompetitorModel = LognormalBids | UniformBids | EmpiricalBids


def competitor_from_dict(spec: dict) -> CompetitorModel:
    """Build a competing-bid model from its wire format, e.g.
    ``{"family": "lognormal", "mu": 0.0, "sigma": 1.0}``."""
    try:
        family = spec["family"]
    except (KeyError, TypeError):
        raise MechanismError("competitor spec needs a 'family' field") from None
    if family == "lognormal":
        return LognormalBids(mu=float(spec["mu"]), sigma=float(spec["sigma"]))
    if family == "uniform":
        return UniformBids(lo=float(spec["lo"]), hi=float(spec["hi"]))
    if family == "empirical":
        return EmpiricalBids(samples=tuple(float(s) for s in spec["samples"]))
    raise MechanismError(f"unknown competitor family {family!r}")


def competitor_to_dict(model: CompetitorModel) -> dict:
    if isinstance(model, LognormalBids):
        return {"family": "lognormal", "mu": model.mu, "sigma": model.sigma}
    if isinstance(model, UniformBids):
        return {"family": "uniform", "lo": model.lo, "hi": model.hi}
    return {"family": "empirical", "samples": list(model.samples)}


@dataclass(frozen=True)
class MechanismSpec:
    """Auction format plus a competing-bid model; defines G, H, g, h."""

    auction_type: str
    reserve: float
    competitor: CompetitorModel

    def __post_init__(self):
        if self.auction_type not in (FIRST_PRICE, SECOND_PRICE):
            raise MechanismError(f"unknown auction type {self.auction_type!r}")
        if self.reserve < 0:
            raise MechanismError(f"reserve must be >= 0, got {self.reserve}")

    @property
    def is_first_price(self) -> bool:
        return self.auction_type == FIRST_PRICE


@dataclass(frozen=True)
class RealizedLandscape:
    """Resolved competition for one auction: the competing clearing bid and
    the payment a winner would owe."""

    clearing_bid: float
    cost_if_won: float


def _check_nonnegative(b):
    arr, scalar = _as_array(b)
    if np.any(arr < 0):
        raise MechanismError("bid must be >= 0")
    return arr, scalar


def win_prob(mech: MechanismSpec, b):
    """G(b): probability the bid wins, zero below the reserve."""
    arr, scalar = _check_nonnegative(b)
    out = np.where(arr >= mech.reserve, mech.competitor.cdf(arr), 0.0)
    return _ret(out, scalar)


def win_density(mech: MechanismSpec, b):
    """g(b): derivative of the win probability on the support interior."""
    arr, scalar = _check_nonnegative(b)
    out = np.where(arr >= mech.reserve, mech.competitor.pdf(arr), 0.0)
    return _ret(out, scalar)


def expected_cost(mech: MechanismSpec, b):
    """H(b): expected payment at bid b.

    First price pays the bid itself: H = b * G(b).  Second price pays the
    larger of the competing bid and the reserve, so H accumulates the
    partial expectation of the competing bid above the reserve plus the
    reserve-price mass below it.
    """
    arr, scalar = _check_nonnegative(b)
    if mech.is_first_price:
        out = arr * win_prob(mech, arr)
        return _ret(out, scalar)
    comp = mech.competitor
    floor_mass = mech.reserve * comp.cdf(mech.reserve)
    tail = comp.partial_expectation(arr) - comp.partial_expectation(mech.reserve)
    out = np.where(arr >= mech.reserve, floor_mass + np.maximum(tail, 0.0), 0.0)
    return _ret(out, scalar)


def cost_derivative(mech: MechanismSpec, b):
    """h(b): derivative of expected cost; b*g for second price,
    G + b*g for first price."""
    arr, scalar = _check_nonnegative(b)
    g = win_density(mech, arr)
    if mech.is_first_price:
        out = win_prob(mech, arr) + arr * g
    else:
        out = arr * g
    return _ret(out, scalar)


def simulate_outcome(mech: MechanismSpec, b: float, draw: float):
    """Resolve one auction from a uniform draw in [0, 1).

    The competing clearing bid is the draw pushed through the inverse CDF;
    the bid wins on ties (b >= max(clearing, reserve)).

    Returns (won, cost, RealizedLandscape).
    """
    if b < 0:
        raise MechanismError("bid must be >= 0")
    if not (0.0 <= draw < 1.0):
        raise MechanismError(f"draw must lie in [0, 1), got {draw}")
    clearing = float(mech.competitor.quantile(draw))
    price = max(clearing, mech.reserve)
    won = b >= price
    cost_if_won = b if mech.is_first_price else price
    landscape = RealizedLandscape(clearing_bid=clearing, cost_if_won=cost_if_won)
    return won, (cost_if_won if won else 0.0), landscape
