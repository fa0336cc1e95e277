"""Hindsight-optimal multipliers from a complete opportunity log.

Given every opportunity's value and auction model (distributional mode) or
resolved competing bid (realized mode), replay answers "what would we have
spent and won at multipliers m".  Replayed spend decreases in the budget
multiplier, so the spend-matching optimum comes out of a bisection; extra
constraints are handled by nested searches over their own multipliers with
complementary-slackness shortcuts.  Everything here is the ground truth the
online controllers are judged against.
"""

from __future__ import annotations

import bisect
from dataclasses import dataclass, field
from types import MappingProxyType
from typing import Mapping

import numpy as np
from scipy.special import ndtr

from .bidding import DEFAULT_BID_CAP, LAMBDA_FLOOR, MultiplierVector, _grid_best_bid, shade_bids
from .mechanisms import (
    LognormalBids,
    MechanismSpec,
    UniformBids,
    expected_cost,
    win_prob,
)

_SQRT_2PI = float(np.sqrt(2.0 * np.pi))


class OracleError(ValueError):
    pass


@dataclass(frozen=True)
class LogRecord:
    """One logged opportunity.  clearing_bid set means realized mode: the
    auction resolves by indicator instead of the smooth G/H model."""

    time: float
    placement: str
    value: float
    mechanism: MechanismSpec
    clearing_bid: float | None = None
    windows: tuple[str, ...] = ()

    def __post_init__(self):
        if self.value < 0:
            raise OracleError(f"value must be >= 0, got {self.value}")
        if self.clearing_bid is not None and self.clearing_bid < 0:
            raise OracleError(f"clearing bid must be >= 0, got {self.clearing_bid}")


@dataclass(frozen=True)
class _Group:
    mechanism: MechanismSpec
    windows: tuple[str, ...]
    placement: str
    realized: bool
    values: np.ndarray
    prices: np.ndarray | None  # max(clearing, reserve) in realized mode
    indices: np.ndarray


class _Columns:
    """Flat per-record arrays for closed-form bid models.

    p1/p2 hold (mu, sigma) for lognormal rows and (lo, hi) for uniform
    rows; win curves, costs, and first-price shading all evaluate in a
    handful of whole-log vector operations.
    """

    def __init__(self, log: OpportunityLog, idx: list[int]):
        records = [log.records[i] for i in idx]
        n = len(records)
        self._log = log
        self._idx = list(idx)
        self._fp_subset: _Columns | None = None
        self.indices = np.array(idx, dtype=int)
        self.values = np.array([r.value for r in records])
        self.reserves = np.array([r.mechanism.reserve for r in records])
        self.is_logn = np.array(
            [isinstance(r.mechanism.competitor, LognormalBids) for r in records]
        )
        self.p1 = np.array(
            [
                r.mechanism.competitor.mu if isinstance(r.mechanism.competitor, LognormalBids)
                else r.mechanism.competitor.lo
                for r in records
            ]
        )
        self.p2 = np.array(
            [
                r.mechanism.competitor.sigma if isinstance(r.mechanism.competitor, LognormalBids)
                else r.mechanism.competitor.hi
                for r in records
            ]
        )
        self.first_price = np.array([r.mechanism.is_first_price for r in records])
        self.realized = np.array([r.clearing_bid is not None for r in records])
        clearing = np.array(
            [r.clearing_bid if r.clearing_bid is not None else np.nan for r in records]
        )
        self.prices = np.maximum(clearing, self.reserves)
        self.support_top = np.where(self.is_logn, np.inf, self.p2)
        self.cdf_at_reserve = self._cdf(self.reserves)
        self.pe_at_reserve = self._partial_expectation(self.reserves)

        names: dict[str, int] = {}
        codes = np.empty(n, dtype=int)
        for j, r in enumerate(records):
            codes[j] = names.setdefault(r.placement, len(names))
        self.placement_names = list(names)
        self.placement_codes = codes

        combos: dict[tuple[str, ...], int] = {}
        combo_codes = np.empty(n, dtype=int)
        for j, r in enumerate(records):
            combo_codes[j] = combos.setdefault(r.windows, len(combos))
        self.window_combos = list(combos)
        self.combo_codes = combo_codes
        self.window_masks: dict[str, np.ndarray] = {}
        for j, r in enumerate(records):
            for w in r.windows:
                self.window_masks.setdefault(w, np.zeros(n, dtype=bool))[j] = True
        self.mechanisms = [r.mechanism for r in records]

    @classmethod
    def build(cls, log: OpportunityLog, idx: list[int]) -> _Columns:
        return cls(log, idx)

    def fp_subset(self) -> _Columns:
        """Columns restricted to the first-price rows (shading is the
        expensive part, so it runs on as few rows as possible)."""
        if self._fp_subset is None:
            fp_idx = [self._idx[j] for j in np.flatnonzero(self.first_price)]
            self._fp_subset = _Columns(self._log, fp_idx)
        return self._fp_subset

    def _cdf(self, b: np.ndarray) -> np.ndarray:
        out = np.empty_like(b)
        m = self.is_logn
        if m.any():
            safe = np.where(b[m] > 0, b[m], 1.0)
            z = (np.log(safe) - self.p1[m]) / self.p2[m]
            out[m] = np.where(b[m] > 0, ndtr(z), 0.0)
        u = ~m
        if u.any():
            out[u] = np.clip((b[u] - self.p1[u]) / (self.p2[u] - self.p1[u]), 0.0, 1.0)
        return out

    def _pdf(self, b: np.ndarray) -> np.ndarray:
        out = np.empty_like(b)
        m = self.is_logn
        if m.any():
            safe = np.where(b[m] > 0, b[m], 1.0)
            z = (np.log(safe) - self.p1[m]) / self.p2[m]
            dens = np.exp(-0.5 * z * z) / (safe * self.p2[m] * _SQRT_2PI)
            out[m] = np.where(b[m] > 0, dens, 0.0)
        u = ~m
        if u.any():
            inside = (b[u] >= self.p1[u]) & (b[u] <= self.p2[u])
            out[u] = np.where(inside, 1.0 / (self.p2[u] - self.p1[u]), 0.0)
        return out

    def _partial_expectation(self, b: np.ndarray) -> np.ndarray:
        out = np.empty_like(b)
        m = self.is_logn
        if m.any():
            safe = np.where(b[m] > 0, b[m], 1.0)
            z = (np.log(safe) - self.p1[m] - self.p2[m] ** 2) / self.p2[m]
            pe = np.exp(self.p1[m] + 0.5 * self.p2[m] ** 2) * ndtr(z)
            out[m] = np.where(b[m] > 0, pe, 0.0)
        u = ~m
        if u.any():
            x = np.clip(b[u], self.p1[u], self.p2[u])
            pe = (x**2 - self.p1[u] ** 2) / (2.0 * (self.p2[u] - self.p1[u]))
            out[u] = np.where(b[u] < self.p1[u], 0.0, pe)
        return out

    def win_prob(self, b: np.ndarray) -> np.ndarray:
        return np.where(b >= self.reserves, self._cdf(b), 0.0)

    def expected_cost(self, b: np.ndarray) -> np.ndarray:
        first = b * self.win_prob(b)
        tail = np.maximum(self._partial_expectation(b) - self.pe_at_reserve, 0.0)
        second = np.where(b >= self.reserves, self.reserves * self.cdf_at_reserve + tail, 0.0)
        return np.where(self.first_price, first, second)

    def _markup(self, b: np.ndarray) -> np.ndarray:
        G = self.win_prob(b)
        g = np.where(b >= self.reserves, self._pdf(b), 0.0)
        ratio = np.where(G <= 0.0, 0.0, np.where(g <= 0.0, np.inf, G / np.maximum(g, 1e-300)))
        return b + ratio

    def shade(self, adjusted: np.ndarray, bid_cap: float) -> np.ndarray:
        """First-price shading for the whole log at once; rows that are not
        first price pass through untouched by the caller."""
        # uniform bids invert in closed form: b + G/g = 2b - lo on support
        analytic = ~self.is_logn & (self.reserves <= self.p1)
        bids = np.zeros_like(adjusted)
        rest = ~analytic
        if rest.any():
            hi = np.minimum(adjusted, bid_cap)
            lo = np.zeros_like(adjusted)
            for _ in range(48):
                mid = 0.5 * (lo + hi)
                below = self._markup(mid) < adjusted
                lo = np.where(below, mid, lo)
                hi = np.where(below, hi, mid)
            bids = np.where(adjusted > 0, 0.5 * (lo + hi), 0.0)
            residual = np.abs(self._markup(bids) - adjusted)
            ok = analytic | (adjusted <= 0) | (residual <= 1e-9 * np.maximum(1.0, adjusted))
            # finite support: certain win at the top once the target clears it
            finite = np.isfinite(self.support_top) & ~ok
            if finite.any():
                certain = (
                    finite & (adjusted >= self._markup_at_top()) & (self.support_top <= bid_cap)
                )
                bids = np.where(certain, self.support_top, bids)
                ok |= certain
            for j in np.flatnonzero(~ok & self.first_price):
                bids[j] = _grid_best_bid(
                    self.mechanisms[j], float(adjusted[j]), float(min(adjusted[j], bid_cap))
                )
        if analytic.any():
            lo_a, hi_a = self.p1[analytic], self.p2[analytic]
            x = adjusted[analytic]
            bids[analytic] = np.where(
                x >= 2.0 * hi_a - lo_a, hi_a, np.where(x >= lo_a, 0.5 * (x + lo_a), x)
            )
        return np.minimum(np.minimum(bids, adjusted), bid_cap)

    def _markup_at_top(self) -> np.ndarray:
        top = np.where(np.isfinite(self.support_top), self.support_top, 1.0)
        return np.where(np.isfinite(self.support_top), self._markup(top), np.inf)


class OpportunityLog:
    """Ordered opportunity records with cached per-mechanism group arrays."""

    def __init__(self, records: list[LogRecord]):
        if not records:
            raise OracleError("opportunity log must not be empty")
        times = [r.time for r in records]
        if any(b < a for a, b in zip(times, times[1:])):
            raise OracleError("record times must be nondecreasing")
        self.records = list(records)
        self._groups: list[_Group] | None = None
        self._columns_cache: tuple[_Columns | None, list[_Group]] | None = None

    def __len__(self) -> int:
        return len(self.records)

    @property
    def mode(self) -> str:
        realized = sum(1 for r in self.records if r.clearing_bid is not None)
        if realized == 0:
            return "distributional"
        if realized == len(self.records):
            return "realized"
        return "mixed"

    def placements(self) -> tuple[str, ...]:
        seen: dict[str, None] = {}
        for r in self.records:
            seen.setdefault(r.placement, None)
        return tuple(seen)

    def restrict_to_placement(self, placement: str) -> OpportunityLog:
        subset = [r for r in self.records if r.placement == placement]
        if not subset:
            raise OracleError(f"no records for placement {placement!r}")
        return OpportunityLog(subset)

    def groups(self) -> list[_Group]:
        if self._groups is None:
            buckets: dict[tuple, list[int]] = {}
            for i, r in enumerate(self.records):
                key = (id(r.mechanism), r.windows, r.placement, r.clearing_bid is None)
                buckets.setdefault(key, []).append(i)
            groups = []
            for idx in buckets.values():
                first = self.records[idx[0]]
                realized = first.clearing_bid is not None
                values = np.array([self.records[i].value for i in idx], dtype=float)
                prices = None
                if realized:
                    prices = np.maximum(
                        np.array([self.records[i].clearing_bid for i in idx], dtype=float),
                        first.mechanism.reserve,
                    )
                groups.append(
                    _Group(
                        mechanism=first.mechanism,
                        windows=first.windows,
                        placement=first.placement,
                        realized=realized,
                        values=values,
                        prices=prices,
                        indices=np.array(idx, dtype=int),
                    )
                )
            self._groups = groups
        return self._groups

    def columns(self) -> tuple[_Columns | None, list[_Group]]:
        """Columnar view of the lognormal/uniform records (one flat array
        pass per replay, however many mechanisms drift created) plus the
        leftover groups that need per-mechanism handling."""
        if self._columns_cache is None:
            flat_idx = [
                i
                for i, r in enumerate(self.records)
                if isinstance(r.mechanism.competitor, (LognormalBids, UniformBids))
            ]
            flat = _Columns.build(self, flat_idx) if flat_idx else None
            rest = set(range(len(self.records))) - set(flat_idx)
            residual = [g for g in self.groups() if g.indices[0] in rest]
            self._columns_cache = (flat, residual)
        return self._columns_cache


@dataclass(frozen=True)
class MultiplierProfile:
    """Global multipliers plus per-window ones, applied to the windows each
    record belongs to."""

    lam: float
    mu: float = 0.0
    cost_target: float | None = None
    window_lambda: Mapping[str, float] = field(default_factory=dict)
    window_mu: Mapping[str, float] = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "window_lambda", MappingProxyType(dict(self.window_lambda)))
        object.__setattr__(self, "window_mu", MappingProxyType(dict(self.window_mu)))

    def vector_for(self, windows: tuple[str, ...]) -> MultiplierVector:
        lam_k = sum(self.window_lambda.get(w, 0.0) for w in windows)
        mu_k = sum(self.window_mu.get(w, 0.0) for w in windows)
        return MultiplierVector(
            lam=self.lam,
            mu=self.mu,
            cost_target=self.cost_target,
            lam_k=lam_k,
            mu_k=mu_k,
        )

    def with_lam(self, lam: float) -> MultiplierProfile:
        return MultiplierProfile(
            lam=lam,
            mu=self.mu,
            cost_target=self.cost_target,
            window_lambda=dict(self.window_lambda),
            window_mu=dict(self.window_mu),
        )


@dataclass(frozen=True)
class ReplayResult:
    spend: float
    value: float
    per_placement: dict[str, tuple[float, float]]
    per_window: dict[str, tuple[float, float]]


def _group_bids(group: _Group, vector: MultiplierVector, bid_cap: float) -> np.ndarray:
    factor = vector.numerator / max(vector.denominator, LAMBDA_FLOOR)
    adjusted = factor * group.values
    if group.mechanism.is_first_price:
        bids, _ = shade_bids(group.mechanism, adjusted, bid_cap)
        return np.minimum(np.atleast_1d(bids), adjusted)
    return np.minimum(adjusted, bid_cap)


def _group_spend_value(
    group: _Group, profile: MultiplierProfile, bid_cap: float
) -> tuple[np.ndarray, np.ndarray]:
    vector = profile.vector_for(group.windows)
    bids = _group_bids(group, vector, bid_cap)
    if group.realized:
        won = bids >= group.prices
        pay = bids if group.mechanism.is_first_price else group.prices
        spend = np.where(won, pay, 0.0)
        value = np.where(won, group.values, 0.0)
    else:
        spend = np.asarray(expected_cost(group.mechanism, bids), dtype=float)
        value = group.values * np.asarray(win_prob(group.mechanism, bids), dtype=float)
    return spend, value


def _columns_spend_value(
    cols: _Columns, profile: MultiplierProfile, bid_cap: float
) -> tuple[np.ndarray, np.ndarray]:
    vectors = [profile.vector_for(c) for c in cols.window_combos]
    combo_factors = np.array(
        [v.numerator / max(v.denominator, LAMBDA_FLOOR) for v in vectors]
    )
    adjusted = combo_factors[cols.combo_codes] * cols.values
    bids = np.minimum(adjusted, bid_cap)
    fp = cols.first_price
    if fp.any():
        bids[fp] = cols.fp_subset().shade(adjusted[fp], bid_cap)
    spend = np.zeros_like(bids)
    value = np.zeros_like(bids)
    realized = cols.realized
    if realized.any():
        won = realized & (bids >= cols.prices)
        spend[won] = np.where(cols.first_price, bids, cols.prices)[won]
        value[won] = cols.values[won]
    dist = ~realized
    if dist.any():
        spend[dist] = cols.expected_cost(bids)[dist]
        value[dist] = (cols.values * cols.win_prob(bids))[dist]
    return spend, value


def replay(
    log: OpportunityLog, profile: MultiplierProfile, bid_cap: float = DEFAULT_BID_CAP
) -> ReplayResult:
    """Total and per-placement/per-window spend and value at the given
    multipliers; exact in distributional mode, deterministic in realized."""
    spend_total = 0.0
    value_total = 0.0
    per_placement: dict[str, list[float]] = {}
    per_window: dict[str, list[float]] = {}

    cols, residual = log.columns()
    if cols is not None:
        spend, value = _columns_spend_value(cols, profile, bid_cap)
        spend_total += float(spend.sum())
        value_total += float(value.sum())
        p_spend = np.bincount(
            cols.placement_codes, weights=spend, minlength=len(cols.placement_names)
        )
        p_value = np.bincount(
            cols.placement_codes, weights=value, minlength=len(cols.placement_names)
        )
        for name, s, v in zip(cols.placement_names, p_spend, p_value):
            acc = per_placement.setdefault(name, [0.0, 0.0])
            acc[0] += float(s)
            acc[1] += float(v)
        for w, mask in cols.window_masks.items():
            acc = per_window.setdefault(w, [0.0, 0.0])
            acc[0] += float(spend[mask].sum())
            acc[1] += float(value[mask].sum())

    for group in residual:
        spend, value = _group_spend_value(group, profile, bid_cap)
        s = float(spend.sum())
        v = float(value.sum())
        spend_total += s
        value_total += v
        acc = per_placement.setdefault(group.placement, [0.0, 0.0])
        acc[0] += s
        acc[1] += v
        for w in group.windows:
            acc = per_window.setdefault(w, [0.0, 0.0])
            acc[0] += s
            acc[1] += v

    return ReplayResult(
        spend=spend_total,
        value=value_total,
        per_placement={k: (a, b) for k, (a, b) in per_placement.items()},
        per_window={k: (a, b) for k, (a, b) in per_window.items()},
    )


def _per_record_spend(
    log: OpportunityLog, profile: MultiplierProfile, bid_cap: float
) -> np.ndarray:
    out = np.zeros(len(log))
    cols, residual = log.columns()
    if cols is not None:
        spend, _ = _columns_spend_value(cols, profile, bid_cap)
        out[cols.indices] = spend
    for group in residual:
        spend, _ = _group_spend_value(group, profile, bid_cap)
        out[group.indices] = spend
    return out


class _SpendCurve:
    """Memoized spend as a function of the budget multiplier, with a
    monotonicity guard that names the offending record on violation."""

    def __init__(self, log: OpportunityLog, profile: MultiplierProfile, bid_cap: float):
        self.log = log
        self.profile = profile
        self.bid_cap = bid_cap
        self._lams: list[float] = []
        self._replays: dict[float, ReplayResult] = {}

    def at(self, lam: float) -> ReplayResult:
        if lam in self._replays:
            return self._replays[lam]
        result = replay(self.log, self.profile.with_lam(lam), self.bid_cap)
        pos = bisect.bisect_left(self._lams, lam)
        slack = 1e-9 * (1.0 + abs(result.spend))
        if pos > 0:
            left = self._lams[pos - 1]
            if result.spend > self._replays[left].spend + slack:
                self._raise_non_monotone(left, lam)
        if pos < len(self._lams):
            right = self._lams[pos]
            if result.spend + slack < self._replays[right].spend:
                self._raise_non_monotone(lam, right)
        self._lams.insert(pos, lam)
        self._replays[lam] = result
        return result

    def _raise_non_monotone(self, lo: float, hi: float) -> None:
        s_lo = _per_record_spend(self.log, self.profile.with_lam(lo), self.bid_cap)
        s_hi = _per_record_spend(self.log, self.profile.with_lam(hi), self.bid_cap)
        worst = int(np.argmax(s_hi - s_lo))
        raise OracleError(
            f"replayed spend increases with the multiplier between {lo:g} and {hi:g}; "
            f"record {worst} spends {s_lo[worst]:g} -> {s_hi[worst]:g}"
        )


@dataclass(frozen=True)
class LambdaSolution:
    lam: float
    unconstrained: bool
    bracket: tuple[float, float] | None
    spend: float
    value: float


def _solve_budget_multiplier(
    curve: _SpendCurve,
    budget: float,
    rel_tol: float = 1e-6,
    hint: float | None = None,
    width_rel: float = 1e-12,
) -> LambdaSolution:
    base = curve.at(LAMBDA_FLOOR)
    if base.spend <= budget:
        return LambdaSolution(
            lam=LAMBDA_FLOOR,
            unconstrained=True,
            bracket=None,
            spend=base.spend,
            value=base.value,
        )
    if hint is not None and hint > 16 * LAMBDA_FLOOR:
        lo, hi = hint / 4.0, hint * 4.0
        for _ in range(200):
            if curve.at(hi).spend <= budget:
                break
            lo = hi
            hi *= 4.0
        else:
            raise OracleError("could not bracket the budget multiplier")
        for _ in range(200):
            if lo <= LAMBDA_FLOOR or curve.at(lo).spend > budget:
                break
            hi = lo
            lo = max(lo / 4.0, LAMBDA_FLOOR)
    else:
        lo = LAMBDA_FLOOR
        hi = 1.0
        for _ in range(200):
            if curve.at(hi).spend <= budget:
                break
            lo = hi
            hi *= 4.0
        else:
            raise OracleError("could not bracket the budget multiplier")

    smooth = curve.log.mode == "distributional"
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        r = curve.at(mid)
        if smooth and abs(r.spend - budget) <= rel_tol * budget:
            return LambdaSolution(
                lam=mid, unconstrained=False, bracket=(lo, hi), spend=r.spend, value=r.value
            )
        if r.spend <= budget:
            hi = mid
        else:
            lo = mid
        if hi - lo <= width_rel * max(1.0, hi):
            break
    r = curve.at(hi)
    return LambdaSolution(
        lam=hi, unconstrained=False, bracket=(lo, hi), spend=r.spend, value=r.value
    )


def solve_lambda_star(
    log: OpportunityLog,
    budget: float,
    rel_tol: float = 1e-6,
    bid_cap: float = DEFAULT_BID_CAP,
) -> LambdaSolution:
    """Budget-only hindsight multiplier.

    Unconstrained branch: if replayed spend at the floor multiplier fits the
    budget, the floor is returned flagged.  Otherwise bisection matches
    spend to budget (distributional mode) or returns the conservative high
    side of the step bracket (realized mode, never overspending).
    """
    if not budget > 0:
        raise OracleError(f"budget must be > 0, got {budget}")
    curve = _SpendCurve(log, MultiplierProfile(lam=1.0), bid_cap)
    return _solve_budget_multiplier(curve, budget, rel_tol)


def dual_value(log: OpportunityLog, budget: float, lam: float, bid_cap: float = DEFAULT_BID_CAP) -> float:
    """Lagrangian dual objective V(lam) - lam*S(lam) + lam*B."""
    r = replay(log, MultiplierProfile(lam=lam), bid_cap)
    return r.value - lam * r.spend + lam * budget


@dataclass(frozen=True)
class KktSolution:
    profile: MultiplierProfile
    replay: ReplayResult
    residuals: dict[str, float]
    feasible: bool
    notes: tuple[str, ...]


def _grid_bracket_bisect(evaluate, grid: np.ndarray, rel_tol: float, max_iter: int = 100):
    """Find the smallest multiplier whose residual crosses <= 0 on the grid,
    then refine the crossing by bisection.  evaluate(x) returns the residual
    (positive while the constraint is violated).  Returns (x, residual) or
    None when the residual never crosses."""
    prev_x = 0.0
    prev_res = evaluate(0.0)
    if prev_res <= 0:
        return 0.0, prev_res
    for x in grid:
        res = evaluate(x)
        if res <= 0:
            lo, hi = prev_x, x
            for _ in range(max_iter):
                mid = 0.5 * (lo + hi)
                r = evaluate(mid)
                if abs(r) <= rel_tol:
                    return mid, r
                if r > 0:
                    lo = mid
                else:
                    hi = mid
            return hi, evaluate(hi)
        prev_x, prev_res = x, res
    return None


def solve_kkt_grid(
    log: OpportunityLog,
    constraints,
    bid_cap: float = DEFAULT_BID_CAP,
    rel_tol: float = 1e-4,
) -> KktSolution:
    """Hindsight multipliers for budget + cost target + one delivery window
    + one guarantee window, satisfying each KKT branch: a multiplier is
    either ~0 (slack constraint) or its constraint holds with equality
    within rel_tol.

    Built for small test instances: nested coarse-grid searches with
    bisection refinement, the budget multiplier re-solved innermost.
    """
    if len(constraints.delivery_windows) > 1 or len(constraints.guarantee_windows) > 1:
        raise OracleError("kkt oracle supports at most one window of each kind")
    budget = constraints.budget
    cost_target = constraints.cost_target
    delivery = constraints.delivery_windows[0] if constraints.delivery_windows else None
    guarantee = constraints.guarantee_windows[0] if constraints.guarantee_windows else None
    notes: list[str] = []
    hints: dict[str, float] = {}

    def solve_inner(mu: float, lam_k: float, mu_k: float) -> tuple[MultiplierProfile, ReplayResult, bool]:
        profile = MultiplierProfile(
            lam=1.0,
            mu=mu,
            cost_target=cost_target,
            window_lambda={delivery.id: lam_k} if delivery else {},
            window_mu={guarantee.id: mu_k} if guarantee else {},
        )
        curve = _SpendCurve(log, profile, bid_cap)
        sol = _solve_budget_multiplier(
            curve, budget, rel_tol=1e-7, hint=hints.get("lam"), width_rel=1e-7
        )
        if not sol.unconstrained:
            hints["lam"] = sol.lam
        final = profile.with_lam(sol.lam)
        return final, curve.at(sol.lam), sol.unconstrained

    def solve_mu(lam_k: float, mu_k: float) -> tuple[float, MultiplierProfile, ReplayResult, bool]:
        if cost_target is None:
            profile, rep, unconstrained = solve_inner(0.0, lam_k, mu_k)
            return 0.0, profile, rep, unconstrained

        def residual(mu: float) -> float:
            _, rep, _ = solve_inner(mu, lam_k, mu_k)
            return rep.spend - cost_target * rep.value

        scale = 1.0 / cost_target
        found = _grid_bracket_bisect(
            residual,
            np.geomspace(1e-6 * scale, 1e6 * scale, 64),
            rel_tol * budget,
        )
        if found is None:
            notes.append("cost target unattainable even at the multiplier bound")
            mu = 1e6 * scale
        else:
            mu = found[0]
        profile, rep, unconstrained = solve_inner(mu, lam_k, mu_k)
        return mu, profile, rep, unconstrained

    def solve_lam_k(mu_k: float) -> tuple[float, float, MultiplierProfile, ReplayResult, bool]:
        if delivery is None:
            mu, profile, rep, unconstrained = solve_mu(0.0, mu_k)
            return 0.0, mu, profile, rep, unconstrained

        def residual(lam_k: float) -> float:
            _, _, rep, _ = solve_mu(lam_k, mu_k)
            return rep.per_window.get(delivery.id, (0.0, 0.0))[0] - delivery.cap

        found = _grid_bracket_bisect(
            residual, np.geomspace(1e-8, 1e8, 64), rel_tol * delivery.cap
        )
        if found is None:
            notes.append(f"delivery window {delivery.id!r} cap unattainable")
            lam_k = 1e8
        else:
            lam_k = found[0]
        mu, profile, rep, unconstrained = solve_mu(lam_k, mu_k)
        return lam_k, mu, profile, rep, unconstrained

    feasible = True
    if guarantee is None:
        lam_k, mu, profile, rep, lam_unconstrained = solve_lam_k(0.0)
        mu_k = 0.0
    else:

        def shortfall(mu_k: float) -> float:
            _, _, _, rep, _ = solve_lam_k(mu_k)
            return guarantee.floor - rep.per_window.get(guarantee.id, (0.0, 0.0))[1]

        found = _grid_bracket_bisect(
            shortfall, np.geomspace(1e-6, 1e4, 64), rel_tol * guarantee.floor
        )
        if found is None:
            feasible = False
            mu_k = 1e4
            _, _, _, rep_max, _ = solve_lam_k(mu_k)
            achieved = rep_max.per_window.get(guarantee.id, (0.0, 0.0))[1]
            notes.append(
                f"guarantee {guarantee.id!r} infeasible: max achievable value "
                f"{achieved:g} < floor {guarantee.floor:g}"
            )
        else:
            mu_k = found[0]
        lam_k, mu, profile, rep, lam_unconstrained = solve_lam_k(mu_k)

    if lam_unconstrained:
        notes.append("budget unconstrained")

    residuals: dict[str, float] = {
        "budget": abs(rep.spend - budget) / budget if not lam_unconstrained else 0.0
    }
    if cost_target is not None and mu > LAMBDA_FLOOR:
        residuals["cost_target"] = abs(rep.spend - cost_target * rep.value) / (
            cost_target * max(rep.value, 1e-300)
        )
    if delivery is not None and lam_k > LAMBDA_FLOOR:
        residuals["delivery"] = (
            abs(rep.per_window.get(delivery.id, (0.0, 0.0))[0] - delivery.cap) / delivery.cap
        )
    if guarantee is not None and mu_k > LAMBDA_FLOOR and feasible:
        residuals["guarantee"] = (
            abs(rep.per_window.get(guarantee.id, (0.0, 0.0))[1] - guarantee.floor)
            / guarantee.floor
        )

    return KktSolution(
        profile=profile,
        replay=rep,
        residuals=residuals,
        feasible=feasible,
        notes=tuple(notes),
    )


@dataclass(frozen=True)
class MarginalRoi:
    roi: dict[str, float]
    inactive: tuple[str, ...]
    lam: float


def marginal_roi(
    log: OpportunityLog,
    budget: float,
    delta: float | None = None,
    bid_cap: float = DEFAULT_BID_CAP,
) -> MarginalRoi:
    """Central-difference value gain per extra unit of budget routed to each
    placement at the joint optimum.  At the optimum these all coincide with
    the budget multiplier.  Needs a distributional log (smooth curves)."""
    if log.mode != "distributional":
        raise OracleError("marginal ROI needs a distributional log")
    if delta is None:
        delta = 1e-3 * budget
    global_sol = solve_lambda_star(log, budget, bid_cap=bid_cap)
    if global_sol.unconstrained:
        base = replay(log, MultiplierProfile(lam=global_sol.lam), bid_cap)
        return MarginalRoi(
            roi={p: 0.0 for p in base.per_placement}, inactive=(), lam=global_sol.lam
        )
    base = replay(log, MultiplierProfile(lam=global_sol.lam), bid_cap)
    roi: dict[str, float] = {}
    inactive: list[str] = []
    for placement, (spend_k, _) in base.per_placement.items():
        if spend_k <= delta:
            inactive.append(placement)
            continue
        sub = log.restrict_to_placement(placement)
        values = []
        for target in (spend_k + delta, spend_k - delta):
            sol = solve_lambda_star(sub, target, bid_cap=bid_cap)
            if sol.unconstrained:
                values = None
                break
            values.append(sol.value)
        if values is None:
            inactive.append(placement)
            continue
        roi[placement] = (values[0] - values[1]) / (2.0 * delta)
    return MarginalRoi(roi=roi, inactive=tuple(inactive), lam=global_sol.lam)


@dataclass(frozen=True)
class FixedBidBaseline:
    bid: float
    spend: float
    value: float


def fixed_bid_baseline(
    log: OpportunityLog, budget: float, bid_cap: float = DEFAULT_BID_CAP
) -> FixedBidBaseline:
    """Naive reference policy: one constant bid for every opportunity, set in
    hindsight to the largest level whose realized spend fits the budget."""
    if log.mode != "realized":
        raise OracleError("the fixed-bid baseline needs a realized log")

    def outcome(bid: float) -> tuple[float, float]:
        spend = 0.0
        value = 0.0
        for group in log.groups():
            won = bid >= group.prices
            pay = np.where(won, bid if group.mechanism.is_first_price else group.prices, 0.0)
            spend += float(pay.sum())
            value += float(np.where(won, group.values, 0.0).sum())
        return spend, value

    lo, hi = 0.0, bid_cap
    if outcome(hi)[0] <= budget:
        spend, value = outcome(hi)
        return FixedBidBaseline(bid=hi, spend=spend, value=value)
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if outcome(mid)[0] <= budget:
            lo = mid
        else:
            hi = mid
        if hi - lo <= 1e-12 * max(1.0, hi):
            break
    spend, value = outcome(lo)
    return FixedBidBaseline(bid=lo, spend=spend, value=value)


@dataclass(frozen=True)
class Prop1Check:
    v_prime: float
    s_prime: float
    residual: float


def prop1_residual(
    log: OpportunityLog,
    lam: float,
    delta: float | None = None,
    bid_cap: float = DEFAULT_BID_CAP,
) -> Prop1Check:
    """Central-difference check that value and spend derivatives stay
    linearly related: V'(lam) = lam * S'(lam)."""
    if not lam > 0:
        raise OracleError(f"lam must be > 0, got {lam}")
    if delta is None:
        delta = 1e-4 * lam
    hi = replay(log, MultiplierProfile(lam=lam + delta), bid_cap)
    lo = replay(log, MultiplierProfile(lam=lam - delta), bid_cap)
    v_prime = (hi.value - lo.value) / (2.0 * delta)
    s_prime = (hi.spend - lo.spend) / (2.0 * delta)
    return Prop1Check(
        v_prime=v_prime, s_prime=s_prime, residual=abs(v_prime - lam * s_prime)
    )
