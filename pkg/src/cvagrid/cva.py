"""Netting, collateral thresholds and the three CVA frameworks.

* ``forward_cva``: expected exposures times default-probability increments,
  assuming credit independent of market.
* ``backward_cva``: backward induction of the credit adjustment with
  rating-mixture risky discounting and rating-dependent thresholds.
* ``aggregate_cva``: collects discounted exposures on simulated default
  paths, with thresholds looked up by the rating held before default, ATE
  and mutual-put terminations.

Sign convention: ``total = cva - dva``.  Exposure of a counterparty default
is the positive part of the net value (capped by the collateral threshold);
own default mirrors it on the negative part.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Mapping, Sequence

import numpy as np

from .credit import (CreditEntity, CreditScenarioSet, PDTermStructure, TransitionMatrix,
                     calibrate_entity, generate_credit_scenarios, rating_distribution_on_grid,
                     remap_correlation)
from .scenarios import (FactorModel, HullWhiteParams, MarketScenarioSet, generate_market_scenarios,
                        shift_market_params)
from .valuation import (BermudanSwaption, LSMConfig, ValueCube, _cube_from_policy, _underlyings,
                        exercise_policy, value_deal)


# --------------------------------------------------------------------------
# contract terms
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class CSATerms:
    """Collateral terms.  Ratings missing from ``rating_thresholds`` are uncollateralised."""

    rating_thresholds: Mapping[str, float] = field(default_factory=dict)
    ate_rating: str | None = None
    mutual_put_dates: tuple[float, ...] = ()
    execution_barrier: float = 0.0

    def __post_init__(self):
        th = {str(k): float(v) for k, v in dict(self.rating_thresholds).items()}
        if any(v < 0 or math.isnan(v) for v in th.values()):
            raise ValueError("collateral thresholds must be non-negative")
        if self.execution_barrier < 0:
            raise ValueError("execution barrier must be non-negative")
        object.__setattr__(self, "rating_thresholds", th)
        object.__setattr__(self, "mutual_put_dates", tuple(sorted(float(t) for t in self.mutual_put_dates)))

    def threshold(self, rating: str) -> float:
        return self.rating_thresholds.get(rating, math.inf)

    def threshold_vector(self, ratings: Sequence[str]) -> np.ndarray:
        """Thresholds along a rating scale; checks they do not rise as ratings worsen."""
        th = np.array([self.threshold(r) for r in ratings[:-1]])
        if np.any(np.diff(th) > 0):
            raise ValueError(f"thresholds must be non-increasing as rating worsens: {dict(zip(ratings, th))}")
        return th

    def to_dict(self) -> dict:
        enc = lambda v: "inf" if math.isinf(v) else v
        return {"rating_thresholds": {k: enc(v) for k, v in self.rating_thresholds.items()},
                "ate_rating": self.ate_rating, "mutual_put_dates": list(self.mutual_put_dates),
                "execution_barrier": self.execution_barrier}

    @classmethod
    def from_dict(cls, d: dict) -> "CSATerms":
        th = {k: float(v) for k, v in d.get("rating_thresholds", {}).items()}
        return cls(th, d.get("ate_rating"), tuple(d.get("mutual_put_dates", ())),
                   float(d.get("execution_barrier", 0.0)))


@dataclass(frozen=True)
class NettingSet:
    counterparty: CreditEntity
    self_entity: CreditEntity
    deal_ids: tuple[str, ...]
    csa: CSATerms = field(default_factory=CSATerms)

    def __post_init__(self):
        object.__setattr__(self, "deal_ids", tuple(self.deal_ids))
        if not self.deal_ids:
            raise ValueError("netting set needs at least one deal")
        if len(set(self.deal_ids)) != len(self.deal_ids):
            raise ValueError("duplicate deal ids in netting set")

    def swapped(self) -> "NettingSet":
        return replace(self, counterparty=self.self_entity, self_entity=self.counterparty)


@dataclass
class CVAResult:
    cva: float
    dva: float
    total: float
    mc_standard_error: float
    ee_profile: np.ndarray
    ene_profile: np.ndarray
    times: np.ndarray
    cva_standard_error: float = 0.0
    dva_standard_error: float = 0.0
    framework: str = ""
    details: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"framework": self.framework, "cva": self.cva, "dva": self.dva, "total": self.total,
                "mc_standard_error": self.mc_standard_error,
                "cva_standard_error": self.cva_standard_error,
                "dva_standard_error": self.dva_standard_error,
                "profile": {"t": self.times.tolist(), "ee": self.ee_profile.tolist(),
                            "ene": self.ene_profile.tolist()},
                "details": self.details}


# --------------------------------------------------------------------------
# exposures
# --------------------------------------------------------------------------

def net_values(cubes: Sequence[ValueCube], netting_set: NettingSet | None = None,
               deal_id: str | None = None) -> ValueCube:
    """Element-wise sum of deal cubes sharing grid, paths and scenario set."""
    if not cubes:
        raise ValueError("nothing to net")
    first = cubes[0]
    total = np.zeros_like(first.values)
    for c in cubes:
        if not c.grid.same_as(first.grid) or c.values.shape != first.values.shape:
            raise ValueError(f"cube {c.deal_id} is on a different grid or path count")
        if c.scenario_id != first.scenario_id:
            raise ValueError(f"cube {c.deal_id} was valued on a different scenario set")
        total += c.values
    name = deal_id or ("netting:" + ",".join(netting_set.deal_ids) if netting_set else "net")
    return ValueCube(name, first.grid, total, first.seed, first.scenario_id,
                     metadata={"kind": "net", "deals": [c.deal_id for c in cubes]})


def exposure_at_default(net_value, threshold, default_flag):
    """``max(0, min(H, V * flag))``; flag is +1 for counterparty, -1 for own default."""
    threshold = np.asarray(threshold, dtype=float)
    if np.any(threshold < 0):
        raise ValueError("threshold must be non-negative")
    return np.maximum(0.0, np.minimum(threshold, np.asarray(net_value, dtype=float) * default_flag))


def _profiles(cube: ValueCube, market: MarketScenarioSet) -> tuple[np.ndarray, np.ndarray]:
    D = market.discount
    return (np.mean(D * np.maximum(cube.values, 0.0), axis=1),
            np.mean(D * np.maximum(-cube.values, 0.0), axis=1))


def _check_market(cube: ValueCube, market: MarketScenarioSet) -> None:
    if not cube.grid.same_as(market.grid) or cube.n_paths != market.n_paths:
        raise ValueError("cube and market scenarios differ in grid or path count")
    if cube.scenario_id and cube.scenario_id != market.scenario_id:
        raise ValueError("cube was valued on a different scenario set")


# --------------------------------------------------------------------------
# forward framework
# --------------------------------------------------------------------------

def forward_cva(net_cube: ValueCube, market: MarketScenarioSet, cpty_pd: PDTermStructure,
                own_pd: PDTermStructure) -> CVAResult:
    """Unilateral expected-exposure sums, PD increments on the right endpoint."""
    _check_market(net_cube, market)
    t = market.grid.times
    dPc = np.diff(cpty_pd.pd(t), prepend=0.0)
    dPo = np.diff(own_pd.pd(t), prepend=0.0)
    D = market.discount
    pos = D * np.maximum(net_cube.values, 0.0)
    neg = D * np.maximum(-net_cube.values, 0.0)
    c_path = (1.0 - cpty_pd.recovery) * (dPc @ pos)
    d_path = (1.0 - own_pd.recovery) * (dPo @ neg)
    n = market.n_paths
    se = lambda v: float(np.std(v, ddof=1) / math.sqrt(n)) if n > 1 else 0.0
    cva, dva = float(np.mean(c_path)), float(np.mean(d_path))
    return CVAResult(cva, dva, cva - dva, se(c_path - d_path), pos.mean(axis=1), neg.mean(axis=1),
                     t.copy(), se(c_path), se(d_path), "forward")


# --------------------------------------------------------------------------
# backward framework
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class RatingMixture:
    """Rating probabilities of a surviving party per grid time, with a PD curve per rating."""

    ratings: tuple[str, ...]
    weights: np.ndarray                    # (n_times, n_ratings), rows sum to one
    curves: Mapping[str, PDTermStructure]

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=float)
        object.__setattr__(self, "weights", w)
        if w.ndim != 2 or w.shape[1] != len(self.ratings):
            raise ValueError("weights must be (n_times, n_ratings)")
        missing = [r for r in self.ratings if r not in self.curves]
        if missing:
            raise KeyError(f"no spread/PD curve for ratings {missing}")

    @classmethod
    def single(cls, rating: str, curve: PDTermStructure, n_times: int) -> "RatingMixture":
        return cls((rating,), np.ones((n_times, 1)), {rating: curve})

    @classmethod
    def from_matrix(cls, entity: CreditEntity, grid, matrix: TransitionMatrix,
                    curves: Mapping[str, PDTermStructure]) -> "RatingMixture":
        dist = rating_distribution_on_grid(entity, grid, matrix)[:, :-1]
        alive = dist.sum(axis=1, keepdims=True)
        return cls(matrix.ratings[:-1], dist / np.where(alive > 0, alive, 1.0), curves)

    def step_factors(self, times: np.ndarray) -> np.ndarray:
        """Risky-over-riskless discount per step and rating, ``(n_times, n_ratings)``."""
        out = np.ones((len(times), len(self.ratings)))
        for k, r in enumerate(self.ratings):
            c = self.curves[r]
            S = 1.0 - (1.0 - c.recovery) * c.pd(times)
            out[1:, k] = S[1:] / S[:-1]
        return out


def _state_basis(x: np.ndarray, v: np.ndarray) -> np.ndarray | None:
    cols = [np.ones_like(x)]
    for c, powers in ((x, 3), (v, 2)):
        s = float(np.std(c))
        if s > 1e-14 * max(1.0, float(np.max(np.abs(c)))):
            z = (c - c.mean()) / s
            cols += [z ** p for p in range(1, powers + 1)]
    return np.column_stack(cols) if len(cols) > 1 else None


def _conditional_mean(y: np.ndarray, x: np.ndarray, v: np.ndarray) -> np.ndarray:
    X = _state_basis(x, v)
    if X is None:
        return np.full_like(y, y.mean())
    coef, *_ = np.linalg.lstsq(X, y, rcond=None)
    return X @ coef


def _side_loss(W: np.ndarray, side: int, mix: RatingMixture, thresholds: np.ndarray,
               one_minus_s: np.ndarray, literal_max: bool) -> np.ndarray:
    """Credit loss over one step on the ``side`` part of ``W`` (positive for +1)."""
    x = np.maximum(side * W, 0.0)
    loss = np.zeros_like(W)
    for k in range(len(mix.ratings)):
        if literal_max:
            risky = np.where(x > 0, np.maximum(x, thresholds[k]), 0.0)
        else:
            risky = np.minimum(x, thresholds[k])
        loss += one_minus_s[k] * risky
    return side * loss


def backward_cva(cubes, netting_set: NettingSet, market: MarketScenarioSet,
                 cpty: RatingMixture, own: RatingMixture, literal_max: bool = False) -> CVAResult:
    """Backward induction of the credit adjustment ``C = V_riskfree - V_risky``.

    Stepping from ``t_i`` to ``t_{i-1}``, the risky value ``W_i = V_i - C_i``
    is split per rating into ``min(W, Thr_k)`` discounted with the rating's
    risky factor and a collateralised remainder discounted risk-free::

        C_{i-1} = E_{i-1}[ d_i (C_i + L_i(W_i)) ]

    where ``L_i`` is the one-step credit loss of the counterparty (``W > 0``)
    or of the own side (``W < 0``), mixed over ratings with weights ``P_ik``.
    Conditional expectations are regressions on the short-rate state and the
    net value.  ``literal_max`` uses ``Max[W, Thr_k]`` as the risky part.
    """
    net = cubes if isinstance(cubes, ValueCube) else net_values(list(cubes), netting_set)
    _check_market(net, market)
    t = market.grid.times
    n_t = len(t)
    V = net.values
    D = market.discount
    step_d = np.ones_like(D)
    step_d[1:] = D[1:] / D[:-1]
    thr_c = np.array([netting_set.csa.threshold(r) for r in cpty.ratings])
    thr_o = np.array([netting_set.csa.threshold(r) for r in own.ratings])
    if cpty.weights.shape[0] != n_t or own.weights.shape[0] != n_t:
        raise ValueError("rating mixtures must be given on the market grid")
    one_minus_c = cpty.weights * (1.0 - cpty.step_factors(t))
    one_minus_o = own.weights * (1.0 - own.step_factors(t))

    def run(use_c: bool, use_o: bool) -> tuple[float, np.ndarray]:
        C = np.zeros(market.n_paths)
        for i in range(n_t - 1, 0, -1):
            W = V[i] - C
            L = np.zeros_like(W)
            if use_c:
                L += _side_loss(W, 1, cpty, thr_c, one_minus_c[i], literal_max)
            if use_o:
                L += _side_loss(W, -1, own, thr_o, one_minus_o[i], literal_max)
            y = step_d[i] * (C + L)
            if i - 1 == 0:
                return float(np.mean(y)), y
            C = _conditional_mean(y, market.state[i - 1], V[i - 1])
        return 0.0, np.zeros(market.n_paths)

    cva, yc = run(True, False)
    dva_neg, yd = run(False, True)
    both, _ = run(True, True)
    n = market.n_paths
    se = lambda y: float(np.std(y, ddof=1) / math.sqrt(n)) if n > 1 else 0.0
    ee, ene = _profiles(net, market)
    return CVAResult(cva, -dva_neg, cva + dva_neg, se(yc + yd), ee, ene, t.copy(), se(yc), se(yd),
                     "backward", {"bilateral_adjustment": both, "literal_max": literal_max})


# --------------------------------------------------------------------------
# defaulted-exposure aggregation
# --------------------------------------------------------------------------

def _termination_index(net: ValueCube, credit: CreditScenarioSet, netting_set: NettingSet,
                       mpath: np.ndarray) -> np.ndarray:
    """Grid index at which ATE or a mutual put ends the trade, ``n_times`` if never."""
    csa = netting_set.csa
    grid = credit.grid
    n_t = len(grid)
    V = net.values[:, mpath]              # (n_times, n_credit)
    stop = np.full(credit.n_paths, n_t, dtype=np.int64)
    if csa.ate_rating is not None:
        ent = netting_set.counterparty
        if csa.ate_rating not in ent.ratings[:-1]:
            raise ValueError(f"ATE rating {csa.ate_rating!r} not on {ent.name}'s scale")
        trig = ent.ratings.index(csa.ate_rating)
        R = credit.ratings[credit.entity_index(ent.name)]
        hit = (R >= trig) & (R < len(ent.ratings) - 1) & (np.abs(V) >= csa.execution_barrier)
        hit[0] = False
        first = np.where(hit.any(axis=0), hit.argmax(axis=0), n_t)
        stop = np.minimum(stop, first)
    for d in csa.mutual_put_dates:
        try:
            i = grid.index_of(d)
        except KeyError:
            raise ValueError(f"mutual put date {d} is not a grid point") from None
        if i == 0:
            continue
        put = V[i] > csa.execution_barrier
        stop = np.where(put & (stop > i), i, stop)
    return stop


def aggregate_cva(net_cube: ValueCube, market: MarketScenarioSet, credit: CreditScenarioSet,
                  netting_set: NettingSet, closeout: str = "independent") -> CVAResult:
    """Mean discounted loss over simulated defaults.

    A default at grid index ``i`` reads ``V(t_i)`` on the credit path's
    market path, caps it with the threshold of the rating held at ``t_{i-1}``
    and weights it by ``1 - R`` of the defaulting party.  ATE and mutual puts
    that fire before a default end the path without loss.

    With ``closeout="independent"`` each leg sees its own party's default
    whatever the other party did, which is the expectation the forward
    formula computes.  ``closeout="first"`` stops the path at the first
    default of either party; equal default steps then count both.
    """
    if closeout not in ("independent", "first"):
        raise ValueError(f"unknown closeout rule {closeout!r}")
    _check_market(net_cube, market)
    if not credit.grid.same_as(market.grid):
        raise ValueError("credit scenarios are on a different grid")
    if credit.n_market_paths != market.n_paths:
        raise ValueError("credit scenarios do not map onto these market paths")
    cp, me = netting_set.counterparty, netting_set.self_entity
    ic, io = credit.entity_index(cp.name), credit.entity_index(me.name)
    n_t = len(market.grid)
    mpath = credit.market_path()
    never = np.int64(n_t)
    dc = np.where(credit.default_index[ic] >= 0, credit.default_index[ic], never)
    do = np.where(credit.default_index[io] >= 0, credit.default_index[io], never)
    stop = _termination_index(net_cube, credit, netting_set, mpath)
    first = np.minimum(dc, do)
    paths = np.arange(credit.n_paths)

    def leg(d_idx, ent: CreditEntity, e_idx: int, flag: int) -> np.ndarray:
        hit = (d_idx < never) & (d_idx <= stop)
        if closeout == "first":
            hit &= d_idx == first
        out = np.zeros(credit.n_paths)
        if not hit.any():
            return out
        j = paths[hit]
        i = d_idx[hit]
        if np.any(i < 1):
            raise ValueError("default at t=0 is not observable")
        before = credit.ratings[e_idx, i - 1, j]
        thr = netting_set.csa.threshold_vector(ent.ratings)[before]
        v = net_cube.values[i, mpath[j]]
        out[hit] = (1.0 - ent.recovery) * market.discount[i, mpath[j]] * exposure_at_default(v, thr, flag)
        return out

    c = leg(dc, cp, ic, +1)
    d = leg(do, me, io, -1)
    # oversampled credit paths on one market path are dependent: SE over market paths
    per_m = lambda a: a.reshape(market.n_paths, credit.oversample).mean(axis=1)
    n = market.n_paths
    se = lambda a: float(np.std(per_m(a), ddof=1) / math.sqrt(n)) if n > 1 else 0.0
    ee, ene = _profiles(net_cube, market)
    cva, dva = float(np.mean(c)), float(np.mean(d))
    details = {"closeout": closeout, "n_credit_paths": credit.n_paths, "oversample": credit.oversample,
               "terminated_paths": int(np.sum(stop < never)),
               "cpty_defaults": int(np.sum(dc < never)), "own_defaults": int(np.sum(do < never))}
    return CVAResult(cva, dva, cva - dva, se(c - d), ee, ene, market.grid.times.copy(), se(c), se(d),
                     "aggregate", details)


# --------------------------------------------------------------------------
# reuse-based analytics
# --------------------------------------------------------------------------

@dataclass
class CVAContext:
    """Everything a netting-set CVA depends on, kept for reuse by sensitivities."""

    netting_set: NettingSet
    deals: dict
    params: HullWhiteParams
    factors: FactorModel
    market: MarketScenarioSet
    cubes: dict
    credit: CreditScenarioSet
    thresholds: dict
    matrices: dict = field(default_factory=dict)   # entity name -> TransitionMatrix
    oversample: int = 1
    lsm: LSMConfig | None = None

    @property
    def entities(self) -> tuple[CreditEntity, ...]:
        return (self.netting_set.counterparty, self.netting_set.self_entity)

    def net_cube(self) -> ValueCube:
        return net_values([self.cubes[d] for d in self.netting_set.deal_ids], self.netting_set)

    def cva(self) -> CVAResult:
        return aggregate_cva(self.net_cube(), self.market, self.credit, self.netting_set)


def build_context(netting_set: NettingSet, deals: Mapping[str, object], params: HullWhiteParams,
                  factors: FactorModel, grid, n_paths: int, seed: int, oversample: int = 1,
                  matrices: Mapping[str, TransitionMatrix] | None = None,
                  lsm: LSMConfig | None = None) -> CVAContext:
    matrices = dict(matrices or {})
    market = generate_market_scenarios(params, grid, n_paths, seed, factors)
    cubes = {d: value_deal(deals[d], market, lsm) for d in netting_set.deal_ids}
    ents = (netting_set.counterparty, netting_set.self_entity)
    thresholds = {e.name: calibrate_entity(e, grid, matrices.get(e.name)) for e in ents}
    credit = generate_credit_scenarios(ents, thresholds, factors, market, oversample, seed)
    return CVAContext(netting_set, dict(deals), params, factors, market, cubes, credit, thresholds,
                      matrices, oversample, lsm)


@dataclass
class IncrementalResult:
    incremental: float
    old_total: float
    new_total: float
    new: CVAResult


def incremental_cva(saved_cubes: Sequence[ValueCube], new_deal_cube: ValueCube,
                    netting_set: NettingSet, market: MarketScenarioSet,
                    credit: CreditScenarioSet) -> IncrementalResult:
    """Change in total CVA from adding one cube, reusing every scenario."""
    for c in list(saved_cubes) + [new_deal_cube]:
        if c.scenario_id != market.scenario_id or not c.grid.same_as(market.grid):
            raise ValueError(f"cube {c.deal_id} was not valued on these scenarios")
    if credit.market_id != market.scenario_id:
        raise ValueError("credit scenarios were generated on a different market set")
    if saved_cubes:
        old = aggregate_cva(net_values(list(saved_cubes)), market, credit, netting_set).total
    else:
        old = 0.0
    new = aggregate_cva(net_values(list(saved_cubes) + [new_deal_cube]), market, credit, netting_set)
    return IncrementalResult(new.total - old, old, new.total, new)


def _regenerate_credit(ctx: CVAContext, entity: str, bump: float) -> CreditScenarioSet:
    ents, thresholds = [], dict(ctx.thresholds)
    for e in ctx.entities:
        if e.name == entity:
            e = e.with_spread_bump(bump)
            thresholds[e.name] = calibrate_entity(e, ctx.market.grid, ctx.matrices.get(e.name))
        ents.append(e)
    return generate_credit_scenarios(ents, thresholds, ctx.factors, ctx.market, ctx.oversample,
                                     ctx.credit.seed)


def cds_delta(ctx: CVAContext, entity: str, spread_bump: float, central: bool = False) -> float:
    """Total-CVA sensitivity to a parallel spread bump of one name, market cubes reused."""
    if spread_bump == 0:
        raise ValueError("spread bump must be non-zero")
    if entity not in (e.name for e in ctx.entities):
        raise KeyError(f"{entity!r} is not a party of the netting set")
    net = ctx.net_cube()
    up = aggregate_cva(net, ctx.market, _regenerate_credit(ctx, entity, spread_bump), ctx.netting_set).total
    if central:
        dn = aggregate_cva(net, ctx.market, _regenerate_credit(ctx, entity, -spread_bump),
                           ctx.netting_set).total
        return (up - dn) / (2.0 * spread_bump)
    return (up - aggregate_cva(net, ctx.market, ctx.credit, ctx.netting_set).total) / spread_bump


def market_greek(ctx: CVAContext, parallel_shift: float = 0.0, vol_shift: float = 0.0) -> float:
    """Finite-difference total CVA under a market bump with every seed reused."""
    size = parallel_shift if parallel_shift != 0 else vol_shift
    if size == 0:
        return 0.0
    params = shift_market_params(ctx.params, parallel_shift, vol_shift)
    m = ctx.market
    market = generate_market_scenarios(params, m.grid, m.n_paths, m.seed, ctx.factors)
    cubes = [value_deal(ctx.deals[d], market, ctx.lsm) for d in ctx.netting_set.deal_ids]
    credit = generate_credit_scenarios(ctx.entities, ctx.thresholds, ctx.factors, market,
                                       ctx.oversample, ctx.credit.seed)
    bumped = aggregate_cva(net_values(cubes, ctx.netting_set), market, credit, ctx.netting_set).total
    return (bumped - ctx.cva().total) / size


@dataclass
class SweepPoint:
    correlation: float
    result: CVAResult | None
    marginal_pd: dict
    diagnostic: str = ""


def wrong_way_sweep(ctx: CVAContext, correlations: Sequence[float], entity: str | None = None,
                    market_index: int = 0) -> list[SweepPoint]:
    """CVA against market/credit correlation of ``entity`` by remapping stored draws."""
    entity = entity or ctx.netting_set.counterparty.name
    net = ctx.net_cube()
    out = []
    for rho in correlations:
        try:
            factors = ctx.factors.with_credit_correlation(entity, float(rho), market_index)
        except ValueError as exc:
            out.append(SweepPoint(float(rho), None, {}, str(exc)))
            continue
        credit = remap_correlation(ctx.credit, factors)
        res = aggregate_cva(net, ctx.market, credit, ctx.netting_set)
        marg = {e.name: float(credit.default_frequency(e.name)[-1]) for e in ctx.entities}
        out.append(SweepPoint(float(rho), res, marg))
    return out


# --------------------------------------------------------------------------
# exercise boundary under default
# --------------------------------------------------------------------------

def flat_default_curve(rate: float, horizon: float, recovery: float = 0.4, name: str = "flat") -> PDTermStructure:
    """``PD(t) = 1 - (1 - rate)^t``."""
    tenors = np.arange(1.0, math.ceil(horizon) + 1.0)
    return PDTermStructure(name, tenors, 1.0 - (1.0 - rate) ** tenors, recovery)


@dataclass
class BoundaryPoint:
    default_rate: float
    boundary: float
    cva_blind: float
    cva_aware: float

    @property
    def impact(self) -> float:
        return self.cva_aware - self.cva_blind

    @property
    def relative_impact(self) -> float:
        return abs(self.impact) / self.cva_blind if self.cva_blind else 0.0


def _linear_underlyings(instr: BermudanSwaption, market: MarketScenarioSet):
    """Underlying cubes at coupon 0 and their per-unit-coupon slope."""
    base = _underlyings(instr.with_fixed_rate(0.0), market)
    unit = _underlyings(instr.with_fixed_rate(1.0), market)
    slope = [u - b for u, b in zip(unit.cubes, base.cubes)]
    return base, slope


def exercise_boundary_study(instr: BermudanSwaption, market: MarketScenarioSet,
                            flat_default_rates: Sequence[float], recovery: float = 0.4,
                            coupon_bracket: tuple[float, float] = (0.0, 0.25),
                            tol: float = 1e-9, config: LSMConfig | None = None,
                            impact_instrument: BermudanSwaption | None = None) -> list[BoundaryPoint]:
    """Coupon at which immediate exercise becomes optimal, per flat default rate.

    The first exercise date must be today.  For every rate the decision
    compares the entered swap net of its expected credit loss with the
    continuation value of the remaining exercises discounted for the
    counterparty's default; the boundary is found by bisection on the fixed
    coupon.

    CVA of ``impact_instrument`` is then computed twice, with credit-blind
    and with credit-aware exercise decisions.  It defaults to the same deal
    without today's exercise right, so that decisions stay open.
    """
    if abs(instr.exercise_dates[0]) > 1e-12:
        raise ValueError("the first exercise date must be t=0 for a boundary study")
    if any(r < 0 or r >= 1 for r in flat_default_rates):
        raise ValueError("default rates must lie in [0, 1)")
    config = config or LSMConfig()
    degree = instr.basis_degree if config.degree is None else config.degree
    base, slope = _linear_underlyings(instr, market)
    und_at = lambda k: type(base)(base.index, [b + k * s for b, s in zip(base.cubes, slope)])
    zero_own = flat_default_curve(0.0, market.grid.horizon, recovery, "self")
    target = impact_instrument
    if target is None:
        later = instr.exercise_dates[1:] or instr.exercise_dates
        target = replace(instr, exercise_dates=later)
    target_und = _underlyings(target, market)
    out = []
    for rate in flat_default_rates:
        credit = flat_default_curve(rate, market.grid.horizon, recovery) if rate > 0 else None

        def gap(k: float) -> float:
            p = exercise_policy(instr.with_fixed_rate(k), market, config, credit, und_at(k))
            return p.exercise_value_0 - p.continuation_0

        lo, hi = coupon_bracket
        g_lo, g_hi = gap(lo), gap(hi)
        # receiver: exercising gains with the coupon; payer: the reverse
        if (g_lo > 0) == (g_hi > 0):
            boundary = math.nan
        else:
            while hi - lo > tol:
                mid = 0.5 * (lo + hi)
                if (gap(mid) > 0) == (g_hi > 0):
                    hi = mid
                else:
                    lo = mid
            boundary = 0.5 * (lo + hi)
        pd_curve = flat_default_curve(rate, market.grid.horizon, recovery, "cpty")
        cvas = []
        for aware in (None, credit):
            pol = exercise_policy(target, market, config, aware, target_und)
            values, _, _ = _cube_from_policy(target, market, target_und, pol, degree)
            cube = ValueCube(target.deal_id, market.grid, values, market.seed, market.scenario_id)
            cvas.append(forward_cva(cube, market, pd_curve, zero_own).cva)
        out.append(BoundaryPoint(float(rate), boundary, cvas[0], cvas[1]))
    return out
