"""Time grid, factor structure and risk-neutral short-rate scenarios.

The market model is a one-factor Hull-White short rate ``r = x + alpha(t)``
where ``x`` is a zero-mean Ornstein-Uhlenbeck state.  The state and its time
integral are simulated jointly and exactly over each grid step, which makes
the pathwise discount factor an exact martingale against the input curve.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import rng
from .hashing import hash_array, hash_json

GRID_TOL = 1e-9

SYNTHETIC = "synthetic"
CASHFLOW = "cashflow"
EXERCISE = "exercise"
_TAG_PRIORITY = {SYNTHETIC: 0, CASHFLOW: 1, EXERCISE: 2}

DEFAULT_DENSITY = ((1.0, 1.0 / 12.0), (5.0, 0.25), (math.inf, 1.0))


# --------------------------------------------------------------------------
# time grid
# --------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class TimeGrid:
    times: np.ndarray
    source_tags: tuple[str, ...]

    def __post_init__(self):
        t = np.asarray(self.times, dtype=float)
        object.__setattr__(self, "times", t)
        if t.ndim != 1 or len(t) == 0 or t[0] != 0.0:
            raise ValueError("grid must be one-dimensional and start at 0")
        if np.any(np.diff(t) <= 0):
            raise ValueError("grid times must be strictly increasing")
        if len(self.source_tags) != len(t):
            raise ValueError("one source tag per grid point is required")

    def __len__(self) -> int:
        return len(self.times)

    @property
    def horizon(self) -> float:
        return float(self.times[-1])

    @property
    def hash(self) -> int:
        return hash_array(self.times)

    def index_of(self, t: float, tol: float = GRID_TOL) -> int:
        """Grid index of time ``t``; raises ``KeyError`` when ``t`` is not on the grid."""
        i = int(np.searchsorted(self.times, t - tol))
        if i < len(self.times) and abs(self.times[i] - t) <= tol:
            return i
        raise KeyError(f"time {t!r} is not on the grid")

    def same_as(self, other: "TimeGrid") -> bool:
        return len(self) == len(other) and bool(np.array_equal(self.times, other.times))

    def to_dict(self) -> dict:
        return {"times": self.times.tolist(), "source_tags": list(self.source_tags)}

    @classmethod
    def from_dict(cls, d: dict) -> "TimeGrid":
        return cls(np.array(d["times"], dtype=float), tuple(d["source_tags"]))


def _synthetic_points(horizon: float, rule: Sequence[tuple[float, float]]) -> list[float]:
    points = []
    start = 0.0
    for until, step in rule:
        if step <= 0:
            raise ValueError("density rule steps must be positive")
        end = min(until, horizon)
        k = 1
        while True:
            t = start + k * step
            if t > end + GRID_TOL:
                break
            points.append(t)
            k += 1
        if end >= horizon:
            break
        start = end
    return points


def build_time_grid(horizon: float,
                    event_dates: Iterable[float] = (),
                    density_rule: Sequence[tuple[float, float]] | None = None,
                    *,
                    exercise_dates: Iterable[float] = ()) -> TimeGrid:
    """Generic simulation grid, dense at the front and sparse at the back.

    Parameters
    ----------
    horizon : float
        Last grid time in years.
    event_dates : iterable of float
        Cashflow and fixing dates that must appear on the grid exactly.
    density_rule : sequence of (until, step)
        Piecewise synthetic spacing; ``step`` applies on ``(previous until, until]``.
        Defaults to monthly to 1y, quarterly to 5y, annual afterwards.
    exercise_dates : iterable of float
        Option exercise dates; tagged ``"exercise"`` on the grid.

    Points closer than 1e-9 years are merged; event dates always win over
    synthetic points.
    """
    if not horizon > 0:
        raise ValueError(f"horizon must be positive, got {horizon!r}")
    rule = DEFAULT_DENSITY if density_rule is None else tuple(density_rule)

    candidates: list[tuple[float, str]] = [(0.0, SYNTHETIC), (float(horizon), SYNTHETIC)]
    for tag, dates in ((CASHFLOW, event_dates), (EXERCISE, exercise_dates)):
        for d in dates:
            d = float(d)
            if d < -GRID_TOL or d > horizon + GRID_TOL:
                raise ValueError(f"event date {d!r} lies outside [0, {horizon}]")
            candidates.append((min(max(d, 0.0), float(horizon)), tag))
    candidates += [(t, SYNTHETIC) for t in _synthetic_points(horizon, rule)]
    candidates.sort(key=lambda c: c[0])

    times: list[float] = []
    tags: list[str] = []
    for t, tag in candidates:
        if times and t - times[-1] <= GRID_TOL:
            # keep an event time in preference to a synthetic one
            if _TAG_PRIORITY[tag] > _TAG_PRIORITY[tags[-1]]:
                if tags[-1] == SYNTHETIC and times[-1] != 0.0:
                    times[-1] = t
                tags[-1] = tag
            continue
        times.append(t)
        tags.append(tag)
    times[0] = 0.0
    return TimeGrid(np.array(times), tuple(tags))


# --------------------------------------------------------------------------
# factor model
# --------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class FactorModel:
    """Loadings of market and credit shocks on shared systematic factors.

    Each market factor shock is ``market_loadings[i] . dw_s + market_idio[i] dw_m``
    and each credit entity's asset shock is
    ``credit_loadings[j] . dw_s + credit_idio[j] dw_A``.  Rows have unit variance.
    Market factor 0 drives the short rate.
    """

    market_loadings: np.ndarray
    credit_loadings: np.ndarray
    market_names: tuple[str, ...] = ("rate",)
    credit_names: tuple[str, ...] = ()
    market_idio: np.ndarray | None = None
    credit_idio: np.ndarray | None = None

    def __post_init__(self):
        m = np.atleast_2d(np.asarray(self.market_loadings, dtype=float))
        c = np.asarray(self.credit_loadings, dtype=float).reshape(-1, m.shape[1])
        object.__setattr__(self, "market_loadings", m)
        object.__setattr__(self, "credit_loadings", c)
        if len(self.market_names) != m.shape[0] or len(self.credit_names) != c.shape[0]:
            raise ValueError("factor names do not match loading rows")
        for attr, rows in (("market_idio", m), ("credit_idio", c)):
            idio = getattr(self, attr)
            sq = 1.0 - np.sum(rows ** 2, axis=1)
            if np.any(sq < -1e-10):
                raise ValueError(f"{attr}: systematic loadings exceed unit variance")
            if idio is None:
                idio = np.sqrt(np.clip(sq, 0.0, None))
            else:
                idio = np.asarray(idio, dtype=float)
                if np.any(np.abs(idio ** 2 - sq) > 1e-10) or np.any(idio < 0):
                    raise ValueError(f"{attr}: rows are not unit variance")
            object.__setattr__(self, attr, idio)

    @property
    def n_systematic(self) -> int:
        return self.market_loadings.shape[1]

    def credit_row(self, name: str) -> tuple[np.ndarray, float]:
        try:
            j = self.credit_names.index(name)
        except ValueError:
            raise KeyError(f"no credit loadings for entity {name!r}") from None
        return self.credit_loadings[j], float(self.credit_idio[j])

    def implied_correlation(self) -> np.ndarray:
        """Correlation over (market factors..., credit entities...)."""
        L = np.vstack([self.market_loadings, self.credit_loadings])
        corr = L @ L.T
        np.fill_diagonal(corr, 1.0)
        return corr

    def with_credit_correlation(self, name: str, rho: float, market_index: int = 0) -> "FactorModel":
        """Reload one entity so its correlation with a market factor equals ``rho``.

        Market loadings are untouched, so market scenarios stay valid.
        """
        c = self.market_loadings[market_index]
        norm2 = float(c @ c)
        if norm2 == 0.0:
            if rho != 0.0:
                raise ValueError("market factor has no systematic loading")
            b = np.zeros_like(c)
        else:
            b = rho * c / norm2
        if b @ b > 1.0 + 1e-12:
            raise ValueError(f"correlation {rho} not attainable with market loading |c|={math.sqrt(norm2):.4f}")
        j = self.credit_names.index(name)
        rows = self.credit_loadings.copy()
        rows[j] = b
        return FactorModel(self.market_loadings, rows, self.market_names, self.credit_names)

    def to_dict(self) -> dict:
        return {
            "market_loadings": self.market_loadings.tolist(),
            "credit_loadings": self.credit_loadings.tolist(),
            "market_names": list(self.market_names),
            "credit_names": list(self.credit_names),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "FactorModel":
        return cls(np.array(d["market_loadings"], dtype=float),
                   np.array(d["credit_loadings"], dtype=float),
                   tuple(d["market_names"]), tuple(d["credit_names"]))

    @classmethod
    def one_factor(cls, credit_correlations: dict[str, float]) -> "FactorModel":
        """Single systematic factor equal to the rate shock; credit loads ``rho`` on it."""
        names = tuple(credit_correlations)
        rows = np.array([[float(credit_correlations[n])] for n in names]).reshape(-1, 1)
        return cls(np.array([[1.0]]), rows, ("rate",), names)


def loadings_from_correlation(correlation_matrix, n_market: int = 1,
                              market_names: Sequence[str] | None = None,
                              credit_names: Sequence[str] | None = None,
                              tol: float = 1e-10) -> FactorModel:
    """Factor loadings reproducing a correlation matrix over (market..., credit...).

    The smallest eigenvalue ``lam`` of the matrix becomes a common idiosyncratic
    variance; ``C - lam*I`` is PSD and its eigen-factorisation supplies the
    systematic loadings.  The identity therefore maps to pure idiosyncratic risk.
    """
    C = np.asarray(correlation_matrix, dtype=float)
    n = C.shape[0]
    if C.shape != (n, n) or not np.allclose(C, C.T, atol=1e-12, rtol=0):
        raise ValueError("correlation matrix must be square and symmetric")
    if not np.allclose(np.diag(C), 1.0, atol=1e-12, rtol=0):
        raise ValueError("correlation matrix must have unit diagonal")
    eig = np.linalg.eigvalsh(C)
    lam = float(eig[0])
    if lam < -tol:
        raise ValueError(f"correlation matrix is not PSD: most negative eigenvalue {lam:.3e}")
    lam = max(lam, 0.0)
    w, V = np.linalg.eigh(C - lam * np.eye(n))
    keep = w > tol * max(1.0, float(w[-1]))
    B = V[:, keep] * np.sqrt(w[keep])
    if B.shape[1] == 0:
        B = np.zeros((n, 1))
    # tidy the tiny rounding so rows stay unit variance within 1e-10
    norms = np.sum(B ** 2, axis=1)
    scale = 1.0 / np.sqrt(np.maximum(norms, 1.0))
    B = B * scale[:, None]
    market_names = tuple(market_names or [f"m{i}" for i in range(n_market)])
    credit_names = tuple(credit_names or [f"c{i}" for i in range(n - n_market)])
    return FactorModel(B[:n_market], B[n_market:], market_names, credit_names)


# --------------------------------------------------------------------------
# curve and short-rate model
# --------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class ZeroCurve:
    """Continuously-compounded zero curve, linear in zero rate, flat outside the pillars."""

    tenors: np.ndarray
    rates: np.ndarray

    def __post_init__(self):
        t = np.atleast_1d(np.asarray(self.tenors, dtype=float))
        r = np.atleast_1d(np.asarray(self.rates, dtype=float))
        if t.shape != r.shape or len(t) == 0:
            raise ValueError("tenors and rates must be equal-length, non-empty")
        if np.any(np.diff(t) <= 0) or t[0] < 0:
            raise ValueError("tenors must be non-negative and increasing")
        object.__setattr__(self, "tenors", t)
        object.__setattr__(self, "rates", r)

    @classmethod
    def flat(cls, rate: float) -> "ZeroCurve":
        return cls(np.array([1.0]), np.array([float(rate)]))

    @classmethod
    def from_csv(cls, path) -> "ZeroCurve":
        tenors, rates = [], []
        with open(path, newline="") as fh:
            for lineno, row in enumerate(csv.reader(fh), 1):
                if not row or not "".join(row).strip() or row[0].lstrip().startswith("#"):
                    continue
                try:
                    tenors.append(float(row[0]))
                    rates.append(float(row[1]))
                except (ValueError, IndexError):
                    if lineno == 1 and not tenors:
                        continue  # header
                    raise ValueError(f"{path}:{lineno}: expected 'tenor,zero_rate'") from None
        return cls(np.array(tenors), np.array(rates))

    def zero_rate(self, t):
        return np.interp(t, self.tenors, self.rates)

    def discount(self, t):
        t = np.asarray(t, dtype=float)
        return np.exp(-self.zero_rate(t) * t)

    def forward(self, t):
        """Instantaneous forward d(z t)/dt, right-continuous at the pillars."""
        t = np.asarray(t, dtype=float)
        z = self.zero_rate(t)
        if len(self.tenors) == 1:
            return z + 0.0 * t
        slopes = np.diff(self.rates) / np.diff(self.tenors)
        k = np.searchsorted(self.tenors, t, side="right") - 1
        inside = (k >= 0) & (k < len(slopes))
        s = np.where(inside, slopes[np.clip(k, 0, len(slopes) - 1)], 0.0)
        return z + t * s

    def shifted(self, shift: float) -> "ZeroCurve":
        return ZeroCurve(self.tenors.copy(), self.rates + shift)

    def to_dict(self) -> dict:
        return {"tenors": self.tenors.tolist(), "rates": self.rates.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "ZeroCurve":
        return cls(np.array(d["tenors"], dtype=float), np.array(d["rates"], dtype=float))


@dataclass(frozen=True, eq=False)
class HullWhiteParams:
    curve: ZeroCurve
    mean_reversion: float = 0.03
    volatility: float = 0.01

    def __post_init__(self):
        if not self.volatility >= 0:
            raise ValueError(f"volatility must be non-negative, got {self.volatility!r}")
        if not self.mean_reversion >= 0:
            raise ValueError(f"mean reversion must be non-negative, got {self.mean_reversion!r}")

    def to_dict(self) -> dict:
        return {"curve": self.curve.to_dict(), "mean_reversion": self.mean_reversion,
                "volatility": self.volatility}

    @classmethod
    def from_dict(cls, d: dict) -> "HullWhiteParams":
        return cls(ZeroCurve.from_dict(d["curve"]), float(d["mean_reversion"]),
                   float(d["volatility"]))

    @property
    def hash(self) -> int:
        return hash_json(self.to_dict())

    # --- closed-form pieces -------------------------------------------------

    def B(self, h):
        """(1 - exp(-a h)) / a."""
        a = self.mean_reversion
        h = np.asarray(h, dtype=float)
        if a < 1e-10:
            return h.copy()
        return -np.expm1(-a * h) / a

    def _B2(self, h):
        a = self.mean_reversion
        h = np.asarray(h, dtype=float)
        if a < 1e-10:
            return h.copy()
        return -np.expm1(-2.0 * a * h) / (2.0 * a)

    def state_variance(self, h):
        """Variance of the OU state after ``h`` years started from a known value."""
        return self.volatility ** 2 * self._B2(h)

    def integral_variance(self, h):
        """Variance of the integral of the OU state over ``h`` years."""
        a, s2 = self.mean_reversion, self.volatility ** 2
        h = np.asarray(h, dtype=float)
        if a < 1e-10:
            return s2 * h ** 3 / 3.0
        ah = a * h
        series = h ** 3 / 3.0 - a * h ** 4 / 4.0 + 7.0 * a ** 2 * h ** 5 / 60.0
        exact = (h - 2.0 * self.B(h) + self._B2(h)) / a ** 2
        return s2 * np.where(ah < 1e-3, series, exact)

    def state_integral_covariance(self, h):
        return 0.5 * self.volatility ** 2 * self.B(h) ** 2

    def alpha(self, t):
        """Deterministic shift so that r = x + alpha fits the initial curve."""
        return self.curve.forward(t) + 0.5 * self.volatility ** 2 * self.B(t) ** 2

    def log_bond_coefficients(self, t: float, maturities):
        """``(ln A, B)`` with ``P(t, T | x) = exp(ln A - B x)``."""
        T = np.asarray(maturities, dtype=float)
        h = T - t
        lnA = (np.log(self.curve.discount(T)) - np.log(self.curve.discount(t))
               + 0.5 * (self.integral_variance(h) - self.integral_variance(T)
                        + self.integral_variance(t)))
        return lnA, self.B(h)

    def zero_bond(self, t: float, maturities, x) -> np.ndarray:
        """Bond prices ``P(t, T_k)`` given state values ``x``; shape ``(len(x), len(T))``."""
        lnA, B = self.log_bond_coefficients(t, maturities)
        x = np.atleast_1d(np.asarray(x, dtype=float))
        return np.exp(lnA[None, :] - x[:, None] * B[None, :])


# --------------------------------------------------------------------------
# market scenarios
# --------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class MarketScenarioSet:
    """Simulated market on a grid.

    ``state``, ``short_rate`` and ``discount`` are ``(n_times, n_paths)``.
    ``systematic_draws`` is ``(n_times, n_paths, n_systematic)``; row ``i`` holds
    the shocks of step ``(t[i-1], t[i]]`` and row 0 is zero.
    """

    grid: TimeGrid
    n_paths: int
    params: HullWhiteParams
    factors: FactorModel
    seed: int
    state: np.ndarray
    short_rate: np.ndarray
    discount: np.ndarray
    systematic_draws: np.ndarray
    metadata: dict = field(default_factory=dict)

    @property
    def scenario_id(self) -> int:
        """Provenance hash of everything that determines the arrays."""
        return hash_json({
            "grid": self.grid.hash, "n_paths": self.n_paths, "seed": self.seed,
            "params": self.params.hash,
            "market_loadings": self.factors.market_loadings.tolist(),
        })

    def zero_bond(self, time_index: int, maturities) -> np.ndarray:
        return self.params.zero_bond(self.grid.times[time_index], maturities,
                                     self.state[time_index])


def _rate_shocks(seed: int, factors: FactorModel, n_steps: int, start: int, count: int):
    sys_draws = rng.normal_block(seed, rng.MARKET_SYSTEMATIC, n_steps,
                                 factors.n_systematic, start, count)
    c_s = factors.market_loadings[0]
    c_m = float(factors.market_idio[0])
    shock = sys_draws @ c_s
    if c_m > 0.0:
        shock = shock + c_m * rng.normal_block(seed, rng.MARKET_IDIOSYNCRATIC, n_steps, 1,
                                               start, count)[..., 0]
    integral_noise = rng.normal_block(seed, rng.MARKET_INTEGRAL, n_steps, 1, start, count)[..., 0]
    return sys_draws, shock, integral_noise


def generate_market_scenarios(params: HullWhiteParams, grid: TimeGrid, n_paths: int,
                              seed: int, factors: FactorModel | None = None,
                              block_size: int | None = None) -> MarketScenarioSet:
    """Simulate the short-rate model on ``grid``.

    The result depends only on the arguments, never on ``block_size``; blocks
    merely bound peak memory and mirror how workers split the path range.
    """
    if n_paths < 1:
        raise ValueError("n_paths must be at least 1")
    if factors is None:
        factors = FactorModel(np.array([[1.0]]), np.zeros((0, 1)))
    n_t = len(grid)
    steps = np.diff(grid.times)
    decay = np.exp(-params.mean_reversion * steps)
    B = params.B(steps)
    var_x = params.state_variance(steps)
    var_i = params.integral_variance(steps)
    cov = params.state_integral_covariance(steps)
    sd_x = np.sqrt(var_x)
    with np.errstate(divide="ignore", invalid="ignore"):
        beta = np.where(var_x > 0, cov / sd_x, 0.0)
        resid = np.sqrt(np.clip(var_i - np.where(var_x > 0, cov ** 2 / var_x, 0.0), 0.0, None))

    state = np.zeros((n_t, n_paths))
    integral = np.zeros((n_t, n_paths))
    draws = np.zeros((n_t, n_paths, factors.n_systematic))
    block = n_paths if block_size is None else max(1, int(block_size))
    for start in range(0, n_paths, block):
        count = min(block, n_paths - start)
        sl = slice(start, start + count)
        sys_draws, z1, z2 = _rate_shocks(seed, factors, n_t - 1, start, count)
        draws[1:, sl] = sys_draws
        for i in range(n_t - 1):
            x0 = state[i, sl]
            state[i + 1, sl] = decay[i] * x0 + sd_x[i] * z1[i]
            integral[i + 1, sl] = integral[i, sl] + B[i] * x0 + beta[i] * z1[i] + resid[i] * z2[i]

    t = grid.times
    total_var = params.integral_variance(t)
    discount = params.curve.discount(t)[:, None] * np.exp(-integral - 0.5 * total_var[:, None])
    short_rate = state + params.alpha(t)[:, None]
    return MarketScenarioSet(grid, int(n_paths), params, factors, int(seed),
                             state, short_rate, discount, draws)


def shift_market_params(params: HullWhiteParams, parallel_shift: float = 0.0,
                        vol_shift: float = 0.0) -> HullWhiteParams:
    """Parallel zero-rate shift and absolute volatility shift."""
    if not (math.isfinite(parallel_shift) and math.isfinite(vol_shift)):
        raise ValueError("bumps must be finite")
    if parallel_shift == 0.0 and vol_shift == 0.0:
        return params
    return replace(params, curve=params.curve.shifted(parallel_shift),
                   volatility=params.volatility + vol_shift)
