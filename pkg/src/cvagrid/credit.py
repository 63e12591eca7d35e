"""Rating migration, default curves, structural thresholds and credit scenarios.

Credit state of an entity follows a dummy asset process: per grid step the
standardised shock ``eps = b . dw_s + c dw_A`` is accumulated into
``X(t_i) = sum sqrt(dt_k) eps_k`` and compared, after rescaling to
``Z(t_i) = X(t_i) / sqrt(t_i)``, with the rating boundaries of that time.

Default is discretised first passage: a path defaults at the first grid time
where ``Z`` falls below the default boundary, and stays defaulted.  Because
passage is path dependent, boundaries after the first step are solved against
the density of surviving paths (propagated numerically by convolution), not
against the unconditional normal quantile; the absorbing default frequency
then equals the market PD at every grid time.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace
from typing import Mapping, Sequence

import numpy as np
from scipy import stats
from scipy.signal import fftconvolve
from scipy.special import ndtr, ndtri

from . import rng
from .hashing import fnv1a64
from .scenarios import MarketScenarioSet, FactorModel, TimeGrid

DEFAULT_LABEL = "D"


# --------------------------------------------------------------------------
# default probability term structures
# --------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class PDTermStructure:
    """Cumulative default probabilities, interpolated with piecewise-flat hazard."""

    name: str
    tenors: np.ndarray
    cumulative_pd: np.ndarray
    recovery: float = 0.4

    def __post_init__(self):
        t = np.atleast_1d(np.asarray(self.tenors, dtype=float))
        p = np.atleast_1d(np.asarray(self.cumulative_pd, dtype=float))
        object.__setattr__(self, "tenors", t)
        object.__setattr__(self, "cumulative_pd", p)
        if t.shape != p.shape or len(t) == 0:
            raise ValueError(f"{self.name}: tenors and PDs must have equal non-zero length")
        if np.any(t <= 0) or np.any(np.diff(t) <= 0):
            raise ValueError(f"{self.name}: tenors must be positive and increasing")
        if np.any(p < 0) or np.any(p >= 1):
            raise ValueError(f"{self.name}: PDs must lie in [0, 1)")
        if np.any(np.diff(p) < -1e-15):
            raise ValueError(f"{self.name}: cumulative PD must be non-decreasing")
        if not 0.0 <= self.recovery < 1.0:
            raise ValueError(f"{self.name}: recovery must lie in [0, 1)")

    def pd(self, t):
        t = np.asarray(t, dtype=float)
        knots = np.concatenate([[0.0], self.tenors])
        log_surv = np.concatenate([[0.0], np.log1p(-self.cumulative_pd)])
        # extend the last hazard beyond the final tenor
        slope = (log_surv[-1] - log_surv[-2]) / (knots[-1] - knots[-2])
        ls = np.interp(t, knots, log_surv)
        ls = np.where(t > knots[-1], log_surv[-1] + slope * (t - knots[-1]), ls)
        return np.where(t <= 0, 0.0, -np.expm1(ls))

    def bumped(self, spread_bump: float) -> "PDTermStructure":
        """Shift the hazard by ``spread_bump / (1 - R)`` (credit-triangle bump)."""
        dh = spread_bump / (1.0 - self.recovery)
        surv = (1.0 - self.cumulative_pd) * np.exp(-dh * self.tenors)
        return replace(self, cumulative_pd=1.0 - surv)

    def to_dict(self) -> dict:
        return {"name": self.name, "tenors": self.tenors.tolist(),
                "cumulative_pd": self.cumulative_pd.tolist(), "recovery": self.recovery}


def pd_from_flat_spread(spread: float, recovery: float, tenors, name: str = "flat") -> PDTermStructure:
    """Credit-triangle curve ``1 - exp(-spread t / (1 - R))``."""
    if not 0.0 <= recovery < 1.0:
        raise ValueError(f"recovery must lie in [0, 1), got {recovery!r}")
    if spread < 0:
        raise ValueError("spread must be non-negative")
    tenors = np.asarray(tenors, dtype=float)
    return PDTermStructure(name, tenors, -np.expm1(-spread * tenors / (1.0 - recovery)), recovery)


def spread_from_pd(pd, recovery, rate, t):
    """Discount spread with ``exp(-(r+sp)t) = exp(-rt) [1 - (1-R) pd]``.

    ``rate`` cancels out of the identity; it is accepted so callers can state
    the full discounting context.
    """
    loss = (1.0 - np.asarray(recovery, dtype=float)) * np.asarray(pd, dtype=float)
    if np.any(loss >= 1.0):
        raise ValueError("(1 - R) * pd must be below 1")
    return -np.log1p(-loss) / np.asarray(t, dtype=float)


def _parse_number(cell: str) -> float:
    cell = cell.strip()
    if cell.endswith("%"):
        return float(cell[:-1]) / 100.0
    return float(cell)


def _read_table(path) -> tuple[list[str], list[str], np.ndarray]:
    with open(path, newline="") as fh:
        rows = [(n, r) for n, r in enumerate(csv.reader(fh), 1)
                if r and "".join(r).strip() and not r[0].lstrip().startswith("#")]
    if len(rows) < 2:
        raise ValueError(f"{path}: table needs a header row and at least one data row")
    header = [c.strip() for c in rows[0][1]]
    row_labels, values = [], []
    for lineno, row in rows[1:]:
        if len(row) != len(header):
            raise ValueError(f"{path}:{lineno}: expected {len(header)} columns, got {len(row)}")
        try:
            values.append([_parse_number(c) for c in row[1:]])
        except ValueError:
            raise ValueError(f"{path}:{lineno}: unparseable number in {row!r}") from None
        row_labels.append(row[0].strip())
    return header[1:], row_labels, np.array(values, dtype=float)


def read_pd_table(path, recovery: float = 0.4) -> list[PDTermStructure]:
    """Tenor-by-rating table, as laid out in the usual 'P(Default),A,B,...' CSV."""
    ratings, tenor_labels, values = _read_table(path)
    try:
        tenors = np.array([float(t) for t in tenor_labels])
    except ValueError:
        raise ValueError(f"{path}: first column must hold tenors") from None
    return [PDTermStructure(r, tenors, values[:, k], recovery) for k, r in enumerate(ratings)]


def write_pd_table(path, curves: Sequence[PDTermStructure], title: str = "P(Default)") -> None:
    tenors = curves[0].tenors
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([title] + [c.name for c in curves])
        for i, t in enumerate(tenors):
            w.writerow([f"{t:g}"] + [f"{100 * c.cumulative_pd[i]:.4f}%" for c in curves])


# --------------------------------------------------------------------------
# transition matrices
# --------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class TransitionMatrix:
    ratings: tuple[str, ...]
    q: np.ndarray

    def __post_init__(self):
        q = np.asarray(self.q, dtype=float)
        object.__setattr__(self, "q", q)
        object.__setattr__(self, "ratings", tuple(self.ratings))
        n = len(self.ratings)
        if q.shape != (n, n):
            raise ValueError(f"matrix shape {q.shape} does not match {n} ratings")
        if np.any(q < 0):
            raise ValueError("transition probabilities must be non-negative")
        if np.any(np.abs(q.sum(axis=1) - 1.0) > 1e-12):
            raise ValueError("rows must sum to one")
        absorbing = np.zeros(n)
        absorbing[-1] = 1.0
        if not np.array_equal(q[-1], absorbing):
            raise ValueError("last rating must be an absorbing default state")

    @property
    def n(self) -> int:
        return len(self.ratings)

    def index(self, rating: str) -> int:
        try:
            return self.ratings.index(rating)
        except ValueError:
            raise KeyError(f"unknown rating {rating!r}") from None

    @classmethod
    def from_csv(cls, path) -> "TransitionMatrix":
        cols, rows, values = _read_table(path)
        if cols != rows:
            raise ValueError(f"{path}: row and column ratings differ")
        # printed tables are rounded; renormalise rows that are only off by rounding
        sums = values.sum(axis=1, keepdims=True)
        if np.any(np.abs(sums - 1.0) > 1e-3):
            bad = int(np.argmax(np.abs(sums[:, 0] - 1.0)))
            raise ValueError(f"{path}: row {rows[bad]!r} sums to {sums[bad, 0]:.6f}")
        q = values / sums
        return cls(tuple(cols), q)

    def to_csv(self, path, title: str = "Transition Matrix") -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow([title] + list(self.ratings))
            for r, row in zip(self.ratings, self.q):
                w.writerow([r] + [f"{100 * v:.6f}%" for v in row])


@dataclass(frozen=True)
class Propagation:
    """``distributions[n]`` is ``Q**n``; ``pd[n, i]`` the cumulative PD from rating ``i``."""

    ratings: tuple[str, ...]
    distributions: np.ndarray
    pd: np.ndarray

    def distribution(self, start: str | int) -> np.ndarray:
        i = start if isinstance(start, int) else self.ratings.index(start)
        return self.distributions[:, i, :]


def propagate_matrix(Q: TransitionMatrix, horizon_steps: int) -> Propagation:
    n = Q.n
    dist = np.empty((horizon_steps + 1, n, n))
    dist[0] = np.eye(n)
    for k in range(1, horizon_steps + 1):
        dist[k] = dist[k - 1] @ Q.q
    return Propagation(Q.ratings, dist, dist[:, :-1, -1].copy())


def mcnulty_levin_adjust(boundary, risk_premium):
    """Risk-neutral probability of a standardised return below ``boundary``."""
    return ndtr(np.asarray(boundary, dtype=float) + risk_premium)


def mcnulty_levin_matrix(Q: TransitionMatrix, risk_premium) -> TransitionMatrix:
    """Shift every row's cumulative boundaries (counted from default upward) by a premium."""
    prem = np.broadcast_to(np.asarray(risk_premium, dtype=float), (Q.n - 1,))
    q = Q.q.copy()
    for i in range(Q.n - 1):
        cum = np.cumsum(Q.q[i, ::-1])[:-1]        # P(worse or equal), default first
        shifted = mcnulty_levin_adjust(ndtri(np.clip(cum, 0.0, 1.0)), prem[i])
        row = np.diff(np.concatenate([[0.0], shifted, [1.0]]))
        q[i] = row[::-1]
    return TransitionMatrix(Q.ratings, q)


# --------------------------------------------------------------------------
# risk-neutralisation by Levenberg-Marquardt
# --------------------------------------------------------------------------

@dataclass
class LMSettings:
    max_iterations: int = 500
    fd_step: float = 1e-6
    tolerance: float = 1e-10
    initial_damping: float = 1e-3
    restarts: int = 4          # re-runs from a de-saturated matrix; see risk_neutralize_matrix
    restart_blend: float = 1e-3


@dataclass
class FitDiagnostics:
    ratings: tuple[str, ...]
    tenors: np.ndarray
    fitted: np.ndarray          # (n_tenors, n_ratings)
    targets: np.ndarray
    weights: np.ndarray
    residuals: np.ndarray
    weighted_rms: float
    max_abs_error: float
    iterations: int
    converged: bool
    jump_to_default: np.ndarray  # share of fitted PD reached without leaving the start rating

    def fitted_curves(self, recovery: float = 0.4) -> list[PDTermStructure]:
        return [PDTermStructure(r, self.tenors, np.clip(self.fitted[:, k], 0, 1 - 1e-15), recovery)
                for k, r in enumerate(self.ratings)]


def weighted_rms(model, targets, weights) -> float:
    w = np.asarray(weights, dtype=float)
    return float(np.sqrt(np.sum(w * (np.asarray(model) - targets) ** 2) / np.sum(w)))


def default_weights(tenors, n_ratings: int) -> np.ndarray:
    """``1/tenor`` per cell, normalised to unit total."""
    w = 1.0 / np.asarray(tenors, dtype=float)
    W = np.repeat(w[:, None], n_ratings, axis=1)
    return W / W.sum()


def _matrix_from_logits(theta: np.ndarray, m: int) -> np.ndarray:
    th = theta.reshape(m, m)
    top = np.maximum(th.max(axis=1, keepdims=True), 0.0)
    e = np.exp(th - top)
    d = np.exp(-top)
    den = e.sum(axis=1, keepdims=True) + d
    q = np.zeros((m + 1, m + 1))
    q[:m, :m] = e / den
    q[:m, m] = (d / den)[:, 0]
    q[m, m] = 1.0
    return q


def _logits_from_matrix(q: np.ndarray) -> np.ndarray:
    m = q.shape[0] - 1
    floor = 1e-10
    body = np.clip(q[:m, :m], floor, None)
    dcol = np.clip(q[:m, m], floor, None)
    return np.log(body / dcol[:, None]).ravel()


def _propagated_pd(q: np.ndarray, steps: np.ndarray) -> np.ndarray:
    out = np.empty((len(steps), q.shape[0] - 1))
    P = np.eye(q.shape[0])
    k = 0
    for n in range(1, int(steps.max()) + 1):
        P = P @ q
        while k < len(steps) and steps[k] == n:
            out[k] = P[:-1, -1]
            k += 1
    return out


def _jump_to_default(q: np.ndarray, steps: np.ndarray) -> np.ndarray:
    stay = np.diag(q)[:-1]
    jump = q[:-1, -1]
    out = np.empty((len(steps), len(stay)))
    for k, n in enumerate(steps):
        # sum_{j<n} stay^j * jump
        out[k] = jump * np.array([np.sum(s ** np.arange(int(n))) for s in stay])
    return out


def levenberg_marquardt(residual_fn, x0: np.ndarray, settings: LMSettings, weight_total: float = 1.0):
    """Minimise ``|residual_fn(x)|^2``.  Returns ``(x, iterations, converged)``."""
    x = np.array(x0, dtype=float)
    r = residual_fn(x)
    cost = float(r @ r)
    lam = settings.initial_damping
    h = settings.fd_step
    for it in range(1, settings.max_iterations + 1):
        J = np.empty((len(r), len(x)))
        for j in range(len(x)):
            xp = x.copy()
            xp[j] += h
            J[:, j] = (residual_fn(xp) - r) / h
        g = J.T @ r
        A = J.T @ J
        diag = np.diag(A).copy()
        diag = np.maximum(diag, 1e-12 * max(1.0, diag.max()))
        while True:
            try:
                step = np.linalg.solve(A + lam * np.diag(diag), -g)
            except np.linalg.LinAlgError:
                step = None
            if step is not None:
                x_new = x + step
                r_new = residual_fn(x_new)
                cost_new = float(r_new @ r_new)
                if np.isfinite(cost_new) and cost_new < cost:
                    break
            lam *= 4.0
            if lam > 1e16:
                return x, it, True  # no descent direction left: stationary point
        improvement = math.sqrt(cost / weight_total) - math.sqrt(cost_new / weight_total)
        x, r, cost = x_new, r_new, cost_new
        lam = max(lam / 3.0, 1e-15)
        if improvement < settings.tolerance:
            return x, it, True
    return x, settings.max_iterations, False


def _initial_matrix(targets: np.ndarray, steps: np.ndarray) -> np.ndarray:
    m = targets.shape[1]
    first = targets[0] / steps[0]
    q = np.zeros((m + 1, m + 1))
    for i in range(m):
        pd1 = min(max(first[i], 1e-5), 0.5)
        q[i, m] = pd1
        q[i, i] = 0.9 * (1.0 - pd1)
        rest = 0.1 * (1.0 - pd1)
        nbrs = [j for j in (i - 1, i + 1) if 0 <= j < m] or [i]
        for j in nbrs:
            q[i, j] += rest / len(nbrs)
    q[m, m] = 1.0
    return q


def risk_neutralize_matrix(targets: Sequence[PDTermStructure],
                           seed_matrix: TransitionMatrix | None = None,
                           weights: np.ndarray | None = None,
                           settings: LMSettings | None = None,
                           period: float = 1.0) -> tuple[TransitionMatrix, FitDiagnostics]:
    """Fit a Markov transition matrix to per-rating cumulative PD targets.

    Free parameters are the logits of the non-default block (``m*m`` of them);
    each row is mapped onto the simplex with the default column as reference,
    so every iterate is a valid matrix.  ``weights`` has shape
    ``(n_tenors, n_ratings)`` and defaults to normalised ``1/tenor``.
    """
    settings = settings or LMSettings()
    ratings = tuple(t.name for t in targets)
    tenors = targets[0].tenors
    for t in targets:
        if not np.allclose(t.tenors, tenors):
            raise ValueError("all rating targets must share tenors")
    steps_f = tenors / period
    steps = np.rint(steps_f).astype(int)
    if np.any(np.abs(steps - steps_f) > 1e-9) or np.any(steps < 1):
        raise ValueError("tenors must be positive multiples of the matrix period")
    T = np.column_stack([t.cumulative_pd for t in targets])
    m = len(ratings)
    W = default_weights(tenors, m) if weights is None else np.asarray(weights, dtype=float)
    if W.shape != T.shape or np.any(W < 0):
        raise ValueError("weights must be non-negative with shape (n_tenors, n_ratings)")
    labels = ratings + (DEFAULT_LABEL,)
    if seed_matrix is not None and seed_matrix.ratings[:-1] != ratings:
        raise ValueError("seed matrix ratings do not match targets")

    if np.all(T == 0.0):
        q = np.eye(m + 1) if seed_matrix is None else seed_matrix.q.copy()
        q[:m, m] = 0.0
        q[:m, :m] /= q[:m, :m].sum(axis=1, keepdims=True)
        fitted = np.zeros_like(T)
        diag = FitDiagnostics(ratings, tenors, fitted, T, W, fitted - T, 0.0, 0.0, 0, True,
                              np.zeros_like(T))
        return TransitionMatrix(labels, q), diag

    q0 = seed_matrix.q if seed_matrix is not None else _initial_matrix(T, steps)
    sqrt_w = np.sqrt(W)

    def residuals(theta):
        return (sqrt_w * (_propagated_pd(_matrix_from_logits(theta, m), steps) - T)).ravel()

    theta, iters, converged = levenberg_marquardt(residuals, _logits_from_matrix(q0), settings,
                                                  float(W.sum()))
    # A transition probability driven to zero saturates its logit and freezes it
    # (zero gradient).  Blend a little mass back into every row and re-run; keep
    # the result only if it lowers the cost.
    cost = float(residuals(theta) @ residuals(theta))
    for _ in range(settings.restarts if converged else 0):
        q = _matrix_from_logits(theta, m)
        q[:m, :] = (1 - settings.restart_blend) * q[:m, :] + settings.restart_blend / (m + 1)
        budget = replace(settings, max_iterations=max(settings.max_iterations - iters, 1))
        cand, it2, conv2 = levenberg_marquardt(residuals, _logits_from_matrix(q), budget, float(W.sum()))
        iters += it2
        r2 = residuals(cand)
        if float(r2 @ r2) >= cost * (1 - 1e-9):
            break
        theta, cost, converged = cand, float(r2 @ r2), conv2
        if not conv2:
            break
    q = _matrix_from_logits(theta, m)
    q[:m, :] /= q[:m, :].sum(axis=1, keepdims=True)
    fitted = _propagated_pd(q, steps)
    diag = FitDiagnostics(
        ratings, tenors, fitted, T, W, fitted - T, weighted_rms(fitted, T, W),
        float(np.max(np.abs(fitted - T))), iters, converged, _jump_to_default(q, steps))
    return TransitionMatrix(labels, q), diag


# --------------------------------------------------------------------------
# structural thresholds
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class StochasticThresholdParams:
    mean_level: float
    reversion_speed: float
    volatility: float

    def __post_init__(self):
        if self.reversion_speed < 0 or self.volatility < 0:
            raise ValueError("reversion speed and volatility must be non-negative")


@dataclass(frozen=True, eq=False)
class CreditEntity:
    """A trading party.  ``ratings`` is the ordered scale ending in default."""

    name: str
    current_rating: str
    pd_curve: PDTermStructure
    ratings: tuple[str, ...] = ()
    fat_tail_df: float | None = None
    stochastic_threshold: StochasticThresholdParams | None = None

    def __post_init__(self):
        ratings = tuple(self.ratings) or (self.current_rating, DEFAULT_LABEL)
        object.__setattr__(self, "ratings", ratings)
        if self.current_rating not in ratings[:-1]:
            raise ValueError(f"{self.name}: current rating must be a non-default rating")
        if self.fat_tail_df is not None and not self.fat_tail_df > 2:
            raise ValueError(f"{self.name}: fat-tail degrees of freedom must exceed 2")

    @property
    def recovery(self) -> float:
        return self.pd_curve.recovery

    def return_distribution(self):
        return stats.norm() if self.fat_tail_df is None else stats.t(self.fat_tail_df)

    def with_spread_bump(self, bump: float) -> "CreditEntity":
        return replace(self, pd_curve=self.pd_curve.bumped(bump))


def fat_tail_convert(h_normal, dist):
    """Map a normal-world threshold onto a fat-tailed return distribution.

    ``dist`` is any continuous, strictly increasing distribution exposing
    ``ppf`` (a frozen ``scipy.stats`` distribution, for example).
    """
    return dist.ppf(ndtr(np.asarray(h_normal, dtype=float)))


@dataclass(frozen=True, eq=False)
class RatingThresholds:
    """Boundaries on the standardised return, best rating first, default last.

    ``boundaries[i, k]`` separates rating ``k`` from ``k+1`` at grid time ``i``;
    the last column is the default threshold.  Row 0 (t=0) is NaN.
    """

    entity: str
    ratings: tuple[str, ...]
    times: np.ndarray
    boundaries: np.ndarray

    @property
    def default_threshold(self) -> np.ndarray:
        return self.boundaries[:, -1]


def rating_distribution_on_grid(entity: CreditEntity, grid: TimeGrid,
                                matrix: TransitionMatrix | None = None,
                                period: float = 1.0) -> np.ndarray:
    """Rating distribution of ``entity`` at each grid time (rows sum to one).

    Uses the matrix powers at whole periods and interpolates linearly between
    them; without a matrix the entity keeps its rating until default.
    """
    n_t = len(grid)
    if matrix is None:
        out = np.zeros((n_t, len(entity.ratings)))
        pd = entity.pd_curve.pd(grid.times)
        out[:, entity.ratings.index(entity.current_rating)] = 1.0 - pd
        out[:, -1] = pd
        return out
    if matrix.ratings != entity.ratings:
        raise ValueError(f"{entity.name}: entity rating scale differs from the matrix")
    steps = int(math.ceil(grid.horizon / period - 1e-12)) + 1
    prop = propagate_matrix(matrix, steps).distribution(matrix.index(entity.current_rating))
    pos = grid.times / period
    lo = np.floor(pos).astype(int)
    frac = (pos - lo)[:, None]
    return (1.0 - frac) * prop[lo] + frac * prop[np.minimum(lo + 1, steps)]


class _SurvivorDensity:
    """Density of the surviving paths' cumulative return on a uniform grid."""

    def __init__(self, dist, horizon: float, n_nodes: int):
        sd = math.sqrt(max(dist.var(), 1.0) * horizon)
        self.half_width = 12.0 * sd + 12.0
        self.x = np.linspace(-self.half_width, self.half_width, n_nodes)
        self.dx = self.x[1] - self.x[0]
        self.dist = dist
        self.mass = None

    def first_step(self, scale: float) -> None:
        edges = np.concatenate([self.x - 0.5 * self.dx, [self.x[-1] + 0.5 * self.dx]])
        self.mass = np.diff(self.dist.cdf(edges / scale))

    def step(self, scale: float) -> None:
        n_half = int(min(len(self.x) - 1, math.ceil(60.0 * scale / self.dx)))
        offs = np.arange(-n_half, n_half + 1) * self.dx
        e = np.concatenate([offs - 0.5 * self.dx, [offs[-1] + 0.5 * self.dx]])
        kernel = np.diff(self.dist.cdf(e / scale))
        kernel /= kernel.sum()
        self.mass = np.clip(fftconvolve(self.mass, kernel, mode="same"), 0.0, None)

    def _cumulative(self):
        edges = np.concatenate([[self.x[0] - 0.5 * self.dx], self.x + 0.5 * self.dx])
        return edges, np.concatenate([[0.0], np.cumsum(self.mass)])

    def level_below(self, target: float) -> float:
        """Point ``h`` such that surviving mass below ``h`` equals ``target``."""
        edges, cum = self._cumulative()
        if target <= 0.0:
            return -math.inf
        if target >= cum[-1]:
            return math.inf
        # strictly increasing copy so interp is well defined over flat stretches
        j = np.searchsorted(cum, target, side="left")
        lo, hi = cum[j - 1], cum[j]
        return float(edges[j - 1] + (target - lo) / (hi - lo) * self.dx)

    def kill_below(self, h: float) -> None:
        if h == -math.inf:
            return
        left = self.x - 0.5 * self.dx
        frac_below = np.clip((h - left) / self.dx, 0.0, 1.0)
        self.mass = self.mass * (1.0 - frac_below)


def calibrate_thresholds(entity: CreditEntity, rating_distribution: np.ndarray,
                         grid: TimeGrid, n_nodes: int = 1 << 15) -> RatingThresholds:
    """Solve rating boundaries so simulated states reproduce the targets.

    At every grid time the default boundary kills exactly the entity's market
    PD increment from the surviving population, and the remaining boundaries
    split the survivors in proportion to ``rating_distribution`` (rescaled so
    the default mass is the market PD).  At the first step this is plain
    quantile inversion of the return distribution.
    """
    R = np.asarray(rating_distribution, dtype=float)
    n_t, n_r = R.shape
    if n_t != len(grid) or n_r != len(entity.ratings):
        raise ValueError("rating distribution must be (n_times, n_ratings)")
    if np.any(R < -1e-12) or np.any(np.abs(R.sum(axis=1) - 1.0) > 1e-9):
        raise ValueError("rating distribution rows must be non-negative and sum to one")
    pd = entity.pd_curve.pd(grid.times)
    if np.any(pd >= 1.0 - 1e-12):
        raise ValueError(f"{entity.name}: PD too close to one for threshold calibration")

    dist = entity.return_distribution()
    t = grid.times
    bounds = np.full((n_t, n_r - 1), np.nan)
    dens = _SurvivorDensity(dist, grid.horizon, n_nodes)
    for i in range(1, n_t):
        dt = t[i] - t[i - 1]
        scale = math.sqrt(dt)
        alive = R[i, :-1].sum()
        share = R[i, :-1] / alive if alive > 0 else np.eye(n_r - 1)[0]
        survivors = 1.0 - pd[i]
        above_default = survivors * np.cumsum(share)  # survivor mass rated k or better
        if i == 1:
            # analytic: Z(t1) = eps_1 exactly
            bounds[i, -1] = float(dist.ppf(pd[i])) if pd[i] > 0 else -math.inf
            for k in range(n_r - 2):
                bounds[i, k] = float(dist.ppf(1.0 - above_default[k]))
            dens.first_step(scale)
            dens.kill_below(bounds[i, -1] * scale)
            continue
        dens.step(scale)
        total = dens.mass.sum()
        kill = max(pd[i] - pd[i - 1], 0.0)
        # mass is tracked on an absolute scale: total = survival to t[i-1]
        h = dens.level_below(kill) if kill > 0 else -math.inf
        dens.kill_below(h)
        root_t = math.sqrt(t[i])
        bounds[i, -1] = h / root_t
        remaining = total - kill
        for k in range(n_r - 2):
            below = remaining - above_default[k] * (remaining / survivors if survivors > 0 else 0.0)
            bounds[i, k] = dens.level_below(below) / root_t if below > 0 else -math.inf
    return RatingThresholds(entity.name, entity.ratings, t.copy(), bounds)


def evolve_stochastic_threshold(params: StochasticThresholdParams, h0: float, grid: TimeGrid,
                                n_paths: int, seed: int, stream_index: int = 0) -> np.ndarray:
    """Euler paths of ``dH = k (a - H) dt + sigma dw``; shape ``(n_times, n_paths)``."""
    H = np.empty((len(grid), n_paths))
    H[0] = h0
    dts = np.diff(grid.times)
    for i, dt in enumerate(dts):
        z = rng.normals(seed, rng.THRESHOLD, i + 1, stream_index, 0, n_paths)
        H[i + 1] = H[i] + params.reversion_speed * (params.mean_level - H[i]) * dt \
            + params.volatility * math.sqrt(dt) * z
    return H


# --------------------------------------------------------------------------
# credit scenarios
# --------------------------------------------------------------------------

def _entity_stream(name: str) -> int:
    return fnv1a64(name.encode())


@dataclass(frozen=True, eq=False)
class CreditScenarioSet:
    """Ratings per (entity, time, credit path).

    Credit path ``j`` rides on market path ``j // oversample``.  Ratings are
    indices into each entity's rating scale; the last index is default.
    """

    grid: TimeGrid
    n_market_paths: int
    oversample: int
    seed: int
    entities: tuple[CreditEntity, ...]
    thresholds: dict
    factors: FactorModel
    ratings: np.ndarray          # (n_entities, n_times, n_paths) int8
    default_index: np.ndarray    # (n_entities, n_paths), -1 when no default
    idiosyncratic_draws: np.ndarray = field(repr=False)   # (n_entities, n_times, n_paths)
    systematic_draws: np.ndarray = field(repr=False)      # market's (n_times, n_market, n_sys)
    market_id: int = 0

    @property
    def n_paths(self) -> int:
        return self.n_market_paths * self.oversample

    @property
    def names(self) -> tuple[str, ...]:
        return tuple(e.name for e in self.entities)

    def entity_index(self, name: str) -> int:
        try:
            return self.names.index(name)
        except ValueError:
            raise KeyError(f"entity {name!r} not in credit scenarios") from None

    def market_path(self) -> np.ndarray:
        return np.arange(self.n_paths) // self.oversample

    def default_frequency(self, name: str) -> np.ndarray:
        """Fraction of paths defaulted by each grid time."""
        d = self.default_index[self.entity_index(name)]
        counts = np.bincount(d[d >= 0], minlength=len(self.grid))
        return np.cumsum(counts) / self.n_paths


def _assemble(entities, thresholds, factors, market_grid, sys_draws, idio, n_market, oversample,
              seed, market_id) -> CreditScenarioSet:
    grid = market_grid
    n_t = len(grid)
    n_paths = n_market * oversample
    mpath = np.arange(n_paths) // oversample
    dts = np.diff(grid.times)
    root_t = np.sqrt(grid.times[1:])
    ratings = np.empty((len(entities), n_t, n_paths), dtype=np.int8)
    default_index = np.full((len(entities), n_paths), -1, dtype=np.int64)
    for e, ent in enumerate(entities):
        b, c = factors.credit_row(ent.name)
        th = thresholds[ent.name]
        if not np.array_equal(th.times, grid.times):
            raise ValueError(f"{ent.name}: thresholds were calibrated on a different grid")
        eps = (sys_draws[1:] @ b)[:, mpath] + c * idio[e, 1:]
        if ent.fat_tail_df is not None:
            eps = stats.t.ppf(ndtr(eps), ent.fat_tail_df)
        Z = np.cumsum(np.sqrt(dts)[:, None] * eps, axis=0) / root_t[:, None]
        bounds = th.boundaries[1:, :, None]
        if ent.stochastic_threshold is not None:
            p = ent.stochastic_threshold
            H = evolve_stochastic_threshold(p, p.mean_level, grid, n_paths, seed,
                                            stream_index=_entity_stream(ent.name))
            bounds = bounds + (H[1:] - p.mean_level)[:, None, :]
        state = np.sum(Z[:, None, :] < bounds, axis=1)  # (n_t-1, n_paths)
        D = len(ent.ratings) - 1
        hit = state == D
        first = np.where(hit.any(axis=0), hit.argmax(axis=0) + 1, -1)
        step_idx = np.arange(1, n_t)[:, None]
        state = np.where((first[None, :] >= 0) & (step_idx >= first[None, :]), D, state)
        ratings[e, 0] = ent.ratings.index(ent.current_rating)
        ratings[e, 1:] = state
        default_index[e] = first
    return CreditScenarioSet(grid, n_market, oversample, seed, tuple(entities), dict(thresholds),
                             factors, ratings, default_index, idio, sys_draws, market_id)


def generate_credit_scenarios(entities: Sequence[CreditEntity], thresholds: Mapping[str, RatingThresholds],
                              factors: FactorModel, market: MarketScenarioSet,
                              oversample: int = 1, seed: int | None = None) -> CreditScenarioSet:
    """Correlated rating paths for ``entities`` on the market's grid.

    Systematic shocks are the market's own draws; each of the ``oversample``
    credit paths attached to a market path gets fresh idiosyncratic draws.
    """
    if oversample < 1:
        raise ValueError("oversample must be at least 1")
    seed = market.seed if seed is None else int(seed)
    for ent in entities:
        factors.credit_row(ent.name)
        if ent.name not in thresholds:
            raise KeyError(f"no thresholds for entity {ent.name!r}")
    if factors.n_systematic != market.systematic_draws.shape[2]:
        raise ValueError("factor model and market disagree on the number of systematic factors")
    n_t = len(market.grid)
    n_paths = market.n_paths * oversample
    idio = np.zeros((len(entities), n_t, n_paths))
    for e, ent in enumerate(entities):
        stream = _entity_stream(ent.name)
        for i in range(1, n_t):
            idio[e, i] = rng.normals(seed, rng.CREDIT_IDIOSYNCRATIC, i, stream, 0, n_paths)
    return _assemble(list(entities), thresholds, factors, market.grid, market.systematic_draws, idio,
                     market.n_paths, oversample, seed, market.scenario_id)


def remap_correlation(credit_set: CreditScenarioSet, new_factors: FactorModel,
                      grid: TimeGrid | None = None) -> CreditScenarioSet:
    """Recombine the stored draws under new loadings; market scenarios are untouched."""
    if grid is not None and not grid.same_as(credit_set.grid):
        raise ValueError("grid mismatch: remap must use the original grid")
    return _assemble(list(credit_set.entities), credit_set.thresholds, new_factors, credit_set.grid,
                     credit_set.systematic_draws, credit_set.idiosyncratic_draws,
                     credit_set.n_market_paths, credit_set.oversample, credit_set.seed,
                     credit_set.market_id)


def rating_before_default(credit_set: CreditScenarioSet, entity: str, path: int) -> int:
    e = credit_set.entity_index(entity)
    d = int(credit_set.default_index[e, path])
    if d < 0:
        raise ValueError(f"path {path} has no default for {entity!r}")
    return int(credit_set.ratings[e, d - 1, path])


def calibrate_entity(entity: CreditEntity, grid: TimeGrid,
                     matrix: TransitionMatrix | None = None) -> RatingThresholds:
    return calibrate_thresholds(entity, rating_distribution_on_grid(entity, grid, matrix), grid)
