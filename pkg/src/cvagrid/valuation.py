"""Pathwise valuation of linear cashflows and Bermudan swaptions into value cubes.

A value cube holds ``V(t_i, path)``: the value, seen at grid time ``t_i`` on a
path, of every flow paid at or after ``t_i``.  A flow paid exactly at ``t_i``
is still counted at ``t_i``, so the last relevant grid point carries the
terminal cashflow.

Floating coupons ``N (1/P(s, e) - 1)`` pay at ``e``.  They are projected with
the model's own zero-coupon bonds, so a floating leg reprices to
``N (P(t, s) - P(t, e))`` exactly before its fixing.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Callable, Iterable, Sequence

import numpy as np

from .scenarios import GRID_TOL, MarketScenarioSet, TimeGrid, ZeroCurve, shift_market_params

__all__ = [
    "FixedFlow", "FloatingFlow", "CashflowInstrument", "SwapSpec", "BermudanSwaption",
    "ValueCube", "LSMConfig", "collapse_cashflows", "value_cashflow_instrument",
    "value_bermudan_swaption", "exercise_policy", "shift_market_params", "deal_from_dict",
    "deal_to_dict", "european_value", "value_deal", "portfolio_event_dates", "ExercisePolicy",
]


# --------------------------------------------------------------------------
# instruments
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class FixedFlow:
    time: float
    amount: float


@dataclass(frozen=True)
class FloatingFlow:
    """Pays ``notional * (1/P(start, end) - 1)`` at ``end``."""

    start: float
    end: float
    notional: float

    def __post_init__(self):
        if not self.end > self.start >= 0.0:
            raise ValueError(f"floating period must satisfy 0 <= start < end, got ({self.start}, {self.end})")


@dataclass(frozen=True)
class CashflowInstrument:
    deal_id: str
    fixed: tuple[FixedFlow, ...] = ()
    floating: tuple[FloatingFlow, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "fixed", tuple(self.fixed))
        object.__setattr__(self, "floating", tuple(self.floating))
        if any(f.time < 0 for f in self.fixed):
            raise ValueError(f"{self.deal_id}: negative pay time")

    @property
    def maturity(self) -> float:
        ends = [f.time for f in self.fixed] + [f.end for f in self.floating]
        return max(ends, default=0.0)

    def event_dates(self) -> list[float]:
        out = {f.time for f in self.fixed}
        for f in self.floating:
            out.update((f.start, f.end))
        return sorted(out)

    def scaled(self, k: float) -> "CashflowInstrument":
        return CashflowInstrument(
            self.deal_id,
            tuple(FixedFlow(f.time, k * f.amount) for f in self.fixed),
            tuple(FloatingFlow(f.start, f.end, k * f.notional) for f in self.floating))


@dataclass(frozen=True)
class SwapSpec:
    """Vanilla fixed/float swap.  ``payer=True`` pays fixed, receives float."""

    notional: float
    fixed_rate: float
    start: float
    maturity: float
    fixed_period: float = 1.0
    float_period: float = 0.5
    payer: bool = True
    spread: float = 0.0

    def __post_init__(self):
        if not self.maturity > self.start >= 0.0:
            raise ValueError("swap needs 0 <= start < maturity")
        if self.fixed_period <= 0 or self.float_period <= 0:
            raise ValueError("periods must be positive")

    @staticmethod
    def _schedule(start: float, end: float, period: float) -> np.ndarray:
        n = max(1, int(round((end - start) / period)))
        return np.linspace(start, end, n + 1)

    def fixed_schedule(self) -> np.ndarray:
        return self._schedule(self.start, self.maturity, self.fixed_period)

    def float_schedule(self) -> np.ndarray:
        return self._schedule(self.start, self.maturity, self.float_period)

    def legs(self, from_time: float = 0.0) -> tuple[list[tuple[float, float]], list[tuple[float, float]]]:
        """Fixed accrual periods and float periods starting at or after ``from_time``."""
        fx = self.fixed_schedule()
        fl = self.float_schedule()
        keep = lambda a: a >= from_time - GRID_TOL
        fixed = [(a, b) for a, b in zip(fx[:-1], fx[1:]) if keep(a)]
        floating = [(a, b) for a, b in zip(fl[:-1], fl[1:]) if keep(a)]
        return fixed, floating

    def instrument(self, deal_id: str, from_time: float = 0.0) -> CashflowInstrument:
        sign = 1.0 if self.payer else -1.0
        fixed_p, float_p = self.legs(from_time)
        fixed = [FixedFlow(b, -sign * self.notional * self.fixed_rate * (b - a)) for a, b in fixed_p]
        if self.spread:
            fixed += [FixedFlow(b, sign * self.notional * self.spread * (b - a)) for a, b in float_p]
        floating = [FloatingFlow(a, b, sign * self.notional) for a, b in float_p]
        return CashflowInstrument(deal_id, tuple(fixed), tuple(floating))

    def par_rate(self, curve: ZeroCurve) -> float:
        fx = self.fixed_schedule()
        annuity = float(np.sum(np.diff(fx) * curve.discount(fx[1:])))
        fl = self.float_schedule()
        float_pv = float(curve.discount(self.start) - curve.discount(self.maturity)
                         + self.spread * np.sum(np.diff(fl) * curve.discount(fl[1:])))
        return float_pv / annuity

    def event_dates(self) -> list[float]:
        return sorted(set(self.fixed_schedule()) | set(self.float_schedule()))


@dataclass(frozen=True)
class BermudanSwaption:
    """Physically settled right to enter the remainder of ``swap``.

    Exercising at ``e`` enters every period of ``swap`` starting at or after
    ``e``; the payer/receiver side is the swap's.
    """

    deal_id: str
    exercise_dates: tuple[float, ...]
    swap: SwapSpec
    basis_degree: int = 2

    def __post_init__(self):
        ex = tuple(sorted(float(e) for e in self.exercise_dates))
        if not ex:
            raise ValueError(f"{self.deal_id}: at least one exercise date required")
        if ex[-1] >= self.swap.maturity:
            raise ValueError(f"{self.deal_id}: exercise dates must precede swap maturity")
        if self.basis_degree < 0:
            raise ValueError("basis degree must be non-negative")
        object.__setattr__(self, "exercise_dates", ex)

    @property
    def payer(self) -> bool:
        return self.swap.payer

    @property
    def maturity(self) -> float:
        return self.swap.maturity

    def underlying(self, exercise_date: float) -> CashflowInstrument:
        return self.swap.instrument(f"{self.deal_id}@{exercise_date:g}", from_time=exercise_date)

    def event_dates(self) -> list[float]:
        return sorted(set(self.swap.event_dates()) | set(self.exercise_dates))

    def with_fixed_rate(self, k: float) -> "BermudanSwaption":
        return replace(self, swap=replace(self.swap, fixed_rate=k))


# --------------------------------------------------------------------------
# value cubes
# --------------------------------------------------------------------------

@dataclass(eq=False)
class ValueCube:
    """Deal (or netting-set) values per (time, path)."""

    deal_id: str
    grid: TimeGrid
    values: np.ndarray
    seed: int = 0
    scenario_id: int = 0
    exercise: np.ndarray | None = None
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        self.values = np.ascontiguousarray(self.values, dtype=np.float64)
        if self.values.ndim != 2 or self.values.shape[0] != len(self.grid):
            raise ValueError("values must be (n_times, n_paths) on the cube's grid")
        if self.exercise is not None:
            self.exercise = np.ascontiguousarray(self.exercise, dtype=np.int8)
            if self.exercise.shape != self.values.shape:
                raise ValueError("exercise indicator shape differs from values")

    @property
    def n_paths(self) -> int:
        return self.values.shape[1]

    def mean_value(self, time_index: int = 0) -> float:
        return float(np.mean(self.values[time_index]))


def _check_flows_on_grid(instr: CashflowInstrument, grid: TimeGrid) -> None:
    if instr.maturity > grid.horizon + GRID_TOL:
        raise ValueError(f"{instr.deal_id}: flows beyond grid horizon {grid.horizon}")
    for f in instr.floating:
        try:
            grid.index_of(f.start)
        except KeyError:
            raise ValueError(f"{instr.deal_id}: fixing date {f.start} is not a grid point") from None


Survival = Callable[[np.ndarray], np.ndarray]


def _instrument_values(instr: CashflowInstrument, market: MarketScenarioSet,
                       survival: Survival | None = None) -> np.ndarray:
    """(n_times, n_paths) values; ``survival(t)`` optionally scales a flow at T by S(T)/S(t)."""
    grid = market.grid
    _check_flows_on_grid(instr, grid)
    t = grid.times
    n_t, n_p = len(grid), market.n_paths
    out = np.zeros((n_t, n_p))
    params = market.params
    fx_t = np.array([f.time for f in instr.fixed])
    fx_a = np.array([f.amount for f in instr.fixed])
    fl_s = np.array([f.start for f in instr.floating])
    fl_e = np.array([f.end for f in instr.floating])
    fl_n = np.array([f.notional for f in instr.floating])
    fix_idx = np.array([grid.index_of(s) for s in fl_s], dtype=int)
    S = (lambda u: np.ones_like(np.asarray(u, dtype=float))) if survival is None else survival
    # fixing ratio 1/P(s, e | x_s) per floating period, known from its fixing date on
    fixings = np.empty((len(fl_s), n_p))
    for k in range(len(fl_s)):
        fixings[k] = 1.0 / market.zero_bond(fix_idx[k], [fl_e[k]])[:, 0]
    for i in range(n_t):
        ti = t[i]
        x = market.state[i]
        s_t = float(S(np.array([ti]))[0])
        live = fx_t >= ti - GRID_TOL
        if live.any():
            T = np.maximum(fx_t[live], ti)
            w = fx_a[live] * S(T) / s_t
            lnA, B = params.log_bond_coefficients(ti, T)
            out[i] += np.exp(lnA[None, :] - x[:, None] * B[None, :]) @ w
        if len(fl_s):
            fwd = fl_s >= ti - GRID_TOL             # not yet fixed
            run = (~fwd) & (fl_e >= ti - GRID_TOL)  # fixed, not yet paid
            if fwd.any():
                s, e = np.maximum(fl_s[fwd], ti), fl_e[fwd]
                lnA_s, B_s = params.log_bond_coefficients(ti, s)
                lnA_e, B_e = params.log_bond_coefficients(ti, e)
                P_s = np.exp(lnA_s[None, :] - x[:, None] * B_s[None, :])
                P_e = np.exp(lnA_e[None, :] - x[:, None] * B_e[None, :])
                out[i] += (P_s - P_e) @ (fl_n[fwd] * S(e) / s_t)
            if run.any():
                e = np.maximum(fl_e[run], ti)
                lnA_e, B_e = params.log_bond_coefficients(ti, e)
                P_e = np.exp(lnA_e[None, :] - x[:, None] * B_e[None, :])
                out[i] += np.sum((fixings[run].T - 1.0) * P_e * (fl_n[run] * S(e) / s_t)[None, :],
                                 axis=1)
    return out


def value_cashflow_instrument(instr: CashflowInstrument, market: MarketScenarioSet) -> ValueCube:
    """Value every remaining flow at every grid time and path."""
    values = _instrument_values(instr, market)
    return ValueCube(instr.deal_id, market.grid, values, market.seed, market.scenario_id,
                     metadata={"kind": "cashflows"})


def collapse_cashflows(deals: Sequence, deal_id: str = "collapsed") -> CashflowInstrument:
    """Merge linear deals into one instrument with netted flows.

    Fixed amounts on the same date are summed; floating notionals are netted
    per accrual period.  Swaps are expanded to their cashflows first.
    """
    fixed: dict[float, float] = {}
    floating: dict[tuple[float, float], float] = {}

    def key(t: float) -> float:
        for k in fixed:
            if abs(k - t) <= GRID_TOL:
                return k
        return t

    def fkey(s: float, e: float) -> tuple[float, float]:
        for a, b in floating:
            if abs(a - s) <= GRID_TOL and abs(b - e) <= GRID_TOL:
                return a, b
        return s, e

    for d in deals:
        if isinstance(d, BermudanSwaption):
            raise ValueError(f"{d.deal_id}: optioned deals cannot be collapsed")
        if isinstance(d, tuple) and len(d) == 2 and isinstance(d[1], SwapSpec):
            d = d[1].instrument(d[0])
        if not isinstance(d, CashflowInstrument):
            raise TypeError(f"cannot collapse {type(d).__name__}")
        for f in d.fixed:
            k = key(f.time)
            fixed[k] = fixed.get(k, 0.0) + f.amount
        for f in d.floating:
            k = fkey(f.start, f.end)
            floating[k] = floating.get(k, 0.0) + f.notional
    return CashflowInstrument(
        deal_id,
        tuple(FixedFlow(t, a) for t, a in sorted(fixed.items())),
        tuple(FloatingFlow(s, e, n) for (s, e), n in sorted(floating.items())))


# --------------------------------------------------------------------------
# Longstaff-Schwartz
# --------------------------------------------------------------------------

@dataclass
class LSMConfig:
    """Regression settings.  ``asset_state`` adds a credit-state regressor."""

    degree: int | None = None
    itm_only: bool = True
    asset_state: np.ndarray | None = None


def _basis(columns: Sequence[np.ndarray], degree: int) -> np.ndarray:
    std = []
    for c in columns:
        s = float(np.std(c))
        if s > 1e-14 * max(1.0, float(np.max(np.abs(c)))):
            std.append((c - np.mean(c)) / s)
    n = len(columns[0])
    cols = [np.ones(n)]
    if degree >= 1:
        cols += std
    if degree >= 2:
        for a in range(len(std)):
            for b in range(a, len(std)):
                cols.append(std[a] * std[b])
    return np.column_stack(cols)


def _regress(columns: Sequence[np.ndarray], y: np.ndarray, degree: int, mask: np.ndarray | None,
             log: list, where: float) -> np.ndarray:
    """Fitted conditional mean of ``y`` for every path (fit on ``mask`` paths)."""
    if mask is None:
        mask = np.ones(len(y), dtype=bool)
    for d in range(degree, -1, -1):
        X = _basis([c for c in columns], d)
        Xm = X[mask]
        if Xm.shape[0] < Xm.shape[1]:
            continue
        coef, _, rank, _ = np.linalg.lstsq(Xm, y[mask], rcond=None)
        if rank == Xm.shape[1]:
            if d < degree:
                log.append({"time": where, "degree_used": d, "requested": degree})
            return X @ coef
    log.append({"time": where, "degree_used": -1, "requested": degree})
    return np.full(len(y), float(np.mean(y[mask])) if mask.any() else 0.0)


@dataclass
class _Underlyings:
    """Per exercise date: grid index and underlying value cube."""

    index: np.ndarray
    cubes: list[np.ndarray]


def _underlyings(instr: BermudanSwaption, market: MarketScenarioSet,
                 survival: Survival | None = None) -> _Underlyings:
    grid = market.grid
    try:
        idx = np.array([grid.index_of(e) for e in instr.exercise_dates], dtype=int)
    except KeyError as exc:
        raise ValueError(f"{instr.deal_id}: exercise date not on grid ({exc})") from None
    cubes = [_instrument_values(instr.underlying(e), market, survival) for e in instr.exercise_dates]
    return _Underlyings(idx, cubes)


@dataclass
class ExercisePolicy:
    """First exercise per path as a grid index (``n_times`` = never)."""

    tau: np.ndarray
    which: np.ndarray              # exercise date position used, -1 never
    exercise_value_0: float
    continuation_0: float
    regression_log: list


def _loss_stream(U: np.ndarray, market: MarketScenarioSet, start: int,
                 pd_curve, recovery: float) -> np.ndarray:
    """Realised unilateral credit loss on the swap entered at grid index ``start``, in t_start money."""
    t = market.grid.times
    D = market.discount
    pd = pd_curve.pd(t)
    alive = 1.0 - pd[start]
    if alive <= 0.0:
        return np.zeros(U.shape[1])
    dP = np.diff(pd)[start:] / alive          # buckets (t_j-1, t_j], j > start
    pos = np.maximum(U[start + 1:], 0.0) * D[start + 1:] * dP[:, None]
    return (1.0 - recovery) * pos.sum(axis=0) / D[start]


def exercise_policy(instr: BermudanSwaption, market: MarketScenarioSet,
                    config: LSMConfig | None = None, credit=None,
                    underlyings: _Underlyings | None = None) -> ExercisePolicy:
    """Backward Longstaff-Schwartz exercise decisions.

    ``credit`` is an optional counterparty ``PDTermStructure``.  When given,
    decisions compare the exercise value net of the entered swap's credit
    loss with a continuation value discounted by ``1 - (1 - R) PD(t)``.
    """
    config = config or LSMConfig()
    degree = instr.basis_degree if config.degree is None else config.degree
    und = underlyings or _underlyings(instr, market)
    D = market.discount
    r = market.short_rate
    n_t, n_p = D.shape
    if credit is not None:
        rec = credit.recovery
        S = 1.0 - (1.0 - rec) * credit.pd(market.grid.times)
    else:
        S = np.ones(n_t)
    Y = np.zeros(n_p)             # realised decision value, discounted to 0
    tau = np.full(n_p, n_t, dtype=int)
    which = np.full(n_p, -1, dtype=int)
    log: list = []
    ex0 = cont0 = 0.0
    for k in range(len(und.index) - 1, -1, -1):
        i = int(und.index[k])
        U = und.cubes[k][i]
        loss = _loss_stream(und.cubes[k], market, i, credit, credit.recovery) if credit is not None \
            else np.zeros(n_p)
        cont_resp = Y / (D[i] * S[i])
        cols = [r[i], U]
        if config.asset_state is not None:
            cols.append(config.asset_state[i])
        if i == 0:
            ex_val = U - float(np.mean(loss))
            cont = np.full(n_p, float(np.mean(cont_resp)))
            ex0, cont0 = float(ex_val[0]), float(cont[0])
        else:
            ex_val = U - (_regress(cols, loss, degree, None, log, market.grid.times[i])
                          if credit is not None else 0.0)
            itm = ex_val > 0 if config.itm_only else None
            if itm is not None and not itm.any():
                continue
            cont = _regress(cols, cont_resp, degree, itm, log, market.grid.times[i])
        go = (ex_val > 0) & (ex_val > cont)
        Y = np.where(go, D[i] * S[i] * (U - loss), Y)
        tau = np.where(go, i, tau)
        which = np.where(go, k, which)
    return ExercisePolicy(tau, which, ex0, cont0, log)


def _cube_from_policy(instr: BermudanSwaption, market: MarketScenarioSet, und: _Underlyings,
                      policy: ExercisePolicy, degree: int, asset_state=None) -> tuple[np.ndarray, np.ndarray, list]:
    D = market.discount
    r = market.short_rate
    n_t, n_p = D.shape
    paths = np.arange(n_p)
    done = policy.which >= 0
    Y = np.zeros(n_p)
    for k, cube in enumerate(und.cubes):
        m = policy.which == k
        Y[m] = D[policy.tau[m], paths[m]] * cube[policy.tau[m], paths[m]]
    values = np.zeros((n_t, n_p))
    exercise = np.zeros((n_t, n_p), dtype=np.int8)
    exercise[policy.tau[done], paths[done]] = 1
    log: list = []
    last_ex = int(und.index[-1])
    for i in range(n_t):
        post = policy.tau <= i
        if post.any():
            stack = np.stack([c[i] for c in und.cubes])      # (n_ex, n_paths)
            values[i, post] = stack[policy.which[post], paths[post]]
        pre = ~post
        if not pre.any() or i > last_ex:
            continue
        if i == 0:
            values[0, pre] = max(float(np.mean(Y)), 0.0)
            continue
        k_next = int(np.searchsorted(und.index, i))
        cols = [r[i], und.cubes[k_next][i]]
        if asset_state is not None:
            cols.append(asset_state[i])
        fit = _regress(cols, Y / D[i], degree, pre, log, market.grid.times[i])
        values[i, pre] = np.maximum(fit[pre], 0.0)
    return values, exercise, log


def value_bermudan_swaption(instr: BermudanSwaption, market: MarketScenarioSet,
                            config: LSMConfig | None = None, credit=None) -> ValueCube:
    """Least-squares Monte Carlo cube with physical settlement.

    Decisions are credit-blind unless ``credit`` is supplied; cube values are
    always risk-free so the cube can be aggregated like any other.  Before
    exercise a path carries the regressed continuation value (floored at 0),
    from the exercise step on it carries the entered swap.
    """
    config = config or LSMConfig()
    degree = instr.basis_degree if config.degree is None else config.degree
    m = 2 + (config.asset_state is not None)
    n_basis = 1 + (m if degree >= 1 else 0) + (m * (m + 1) // 2 if degree >= 2 else 0)
    if market.n_paths < 10 * n_basis:
        raise ValueError(f"need at least {10 * n_basis} paths for a {n_basis}-term basis")
    und = _underlyings(instr, market)
    policy = exercise_policy(instr, market, config, credit, und)
    values, exercise, log = _cube_from_policy(instr, market, und, policy, degree, config.asset_state)
    meta = {"kind": "bermudan", "credit_aware": credit is not None,
            "regression_fallbacks": policy.regression_log + log,
            "exercise_value_0": policy.exercise_value_0, "continuation_0": policy.continuation_0}
    return ValueCube(instr.deal_id, market.grid, values, market.seed, market.scenario_id,
                     exercise, meta)


def european_value(instr: BermudanSwaption, market: MarketScenarioSet, exercise_date: float) -> float:
    """Mean discounted ``max(U, 0)`` at one exercise date."""
    i = market.grid.index_of(exercise_date)
    U = _instrument_values(instr.underlying(exercise_date), market)[i]
    return float(np.mean(market.discount[i] * np.maximum(U, 0.0)))


# --------------------------------------------------------------------------
# portfolio files
# --------------------------------------------------------------------------

def _swap_from_dict(d: dict) -> SwapSpec:
    side = d.get("side", "payer").lower()
    if side not in ("payer", "receiver"):
        raise ValueError(f"swap side must be payer or receiver, got {side!r}")
    return SwapSpec(float(d["notional"]), float(d["fixed_rate"]), float(d.get("start", 0.0)),
                    float(d["maturity"]), float(d.get("fixed_period", 1.0)),
                    float(d.get("float_period", 0.5)), side == "payer", float(d.get("spread", 0.0)))


def deal_from_dict(d: dict):
    """Build a deal from its portfolio-file record.

    Returns a :class:`CashflowInstrument` for swaps and raw cashflows and a
    :class:`BermudanSwaption` for swaptions.
    """
    kind = d.get("type")
    deal_id = str(d["id"])
    if kind == "swap":
        return _swap_from_dict(d).instrument(deal_id)
    if kind == "cashflows":
        fixed = tuple(FixedFlow(float(t), float(a)) for t, a in d.get("fixed", []))
        floating = tuple(FloatingFlow(float(s), float(e), float(n)) for s, e, n in d.get("floating", []))
        return CashflowInstrument(deal_id, fixed, floating)
    if kind == "bermudan_swaption":
        return BermudanSwaption(deal_id, tuple(d["exercise_dates"]), _swap_from_dict(d["swap"]),
                                int(d.get("basis_degree", 2)))
    raise ValueError(f"deal {deal_id}: unknown type {kind!r}")


def deal_to_dict(deal) -> dict:
    if isinstance(deal, CashflowInstrument):
        return {"id": deal.deal_id, "type": "cashflows",
                "fixed": [[f.time, f.amount] for f in deal.fixed],
                "floating": [[f.start, f.end, f.notional] for f in deal.floating]}
    if isinstance(deal, BermudanSwaption):
        s = deal.swap
        return {"id": deal.deal_id, "type": "bermudan_swaption",
                "exercise_dates": list(deal.exercise_dates), "basis_degree": deal.basis_degree,
                "swap": {"notional": s.notional, "fixed_rate": s.fixed_rate, "start": s.start,
                         "maturity": s.maturity, "fixed_period": s.fixed_period,
                         "float_period": s.float_period, "spread": s.spread,
                         "side": "payer" if s.payer else "receiver"}}
    raise TypeError(f"cannot serialise {type(deal).__name__}")


def value_deal(deal, market: MarketScenarioSet, config: LSMConfig | None = None) -> ValueCube:
    if isinstance(deal, BermudanSwaption):
        return value_bermudan_swaption(deal, market, config)
    return value_cashflow_instrument(deal, market)


def portfolio_event_dates(deals: Iterable) -> list[float]:
    out: set[float] = set()
    for d in deals:
        out.update(d.event_dates())
    return sorted(out)
