from __future__ import annotations

import math

import numpy as np
import pytest

from cvagrid.credit import (CreditEntity, PDTermStructure, calibrate_entity, generate_credit_scenarios,
                            pd_from_flat_spread)
from cvagrid.cva import (CSATerms, NettingSet, RatingMixture, aggregate_cva, backward_cva,
                         build_context, cds_delta, exercise_boundary_study, exposure_at_default,
                         flat_default_curve, forward_cva, incremental_cva, market_greek, net_values,
                         wrong_way_sweep)
from cvagrid.scenarios import (FactorModel, HullWhiteParams, ZeroCurve, build_time_grid,
                               generate_market_scenarios)
from cvagrid.valuation import (BermudanSwaption, CashflowInstrument, FixedFlow, SwapSpec, ValueCube,
                               portfolio_event_dates, value_cashflow_instrument)

HW = HullWhiteParams(ZeroCurve.flat(0.03), 0.03, 0.01)
HW0 = HullWhiteParams(ZeroCurve.flat(0.0), 0.03, 0.0)


def _entity(name, spread, horizon=12):
    return CreditEntity(name, "A", pd_from_flat_spread(spread, 0.4, np.arange(1.0, horizon + 1.0), name))


def _book():
    return {"p5": SwapSpec(1e6, 0.030, 0, 5, 1, 0.5, True).instrument("p5"),
            "r7": SwapSpec(2e6, 0.031, 0, 7, 1, 0.5, False).instrument("r7"),
            "p4": SwapSpec(1e6, 0.028, 1, 4, 1, 0.5, True).instrument("p4")}


def _setup(n_paths=2000, oversample=1, seed=3, csa=None, deals=None, cp_spread=0.02, me_spread=0.01):
    deals = deals or _book()
    grid = build_time_grid(7.0, portfolio_event_dates(deals.values()))
    cp, me = _entity("CP", cp_spread), _entity("ME", me_spread)
    ns = NettingSet(cp, me, tuple(deals), csa or CSATerms())
    factors = FactorModel.one_factor({"CP": 0.0, "ME": 0.0})
    market = generate_market_scenarios(HW, grid, n_paths, seed, factors)
    cubes = {k: value_cashflow_instrument(d, market) for k, d in deals.items()}
    th = {e.name: calibrate_entity(e, grid) for e in (cp, me)}
    credit = generate_credit_scenarios([cp, me], th, factors, market, oversample, seed)
    return ns, market, cubes, credit


def _deterministic(threshold=None):
    flow = CashflowInstrument("f", (FixedFlow(1.0, 100.0),))
    g = build_time_grid(1.0, [1.0], density_rule=[(math.inf, 1.0)])
    m = generate_market_scenarios(HW0, g, 20, 1)
    cp = CreditEntity("CP", "A", PDTermStructure("CP", [1.0], [0.1]))
    me = CreditEntity("ME", "A", PDTermStructure("ME", [1.0], [0.0]))
    csa = CSATerms({} if threshold is None else {"A": threshold})
    return value_cashflow_instrument(flow, m), m, NettingSet(cp, me, ("f",), csa)


# ---------------------------------------------------------------- netting and exposure

def test_net_values_sum_and_cancel():
    ns, market, cubes, _ = _setup(200)
    c = list(cubes.values())
    np.testing.assert_array_equal(net_values([c[0]]).values, c[0].values)
    neg = ValueCube("n", c[0].grid, -c[0].values, c[0].seed, c[0].scenario_id)
    assert np.all(net_values([c[0], neg]).values == 0.0)
    np.testing.assert_allclose(net_values(c, ns).values, c[0].values + c[1].values + c[2].values,
                               rtol=0, atol=1e-9)


def test_net_values_rejects_mismatch():
    _, market, cubes, _ = _setup(200)
    a = cubes["p5"]
    other = ValueCube("x", a.grid, a.values, a.seed, a.scenario_id + 1)
    with pytest.raises(ValueError, match="scenario"):
        net_values([a, other])
    short = ValueCube("y", a.grid, a.values[:, :100], a.seed, a.scenario_id)
    with pytest.raises(ValueError):
        net_values([a, short])
    with pytest.raises(ValueError):
        net_values([])


def test_exposure_at_default_examples():
    assert exposure_at_default(10.0, math.inf, 1) == 10.0
    assert exposure_at_default(-5.0, math.inf, 1) == 0.0
    assert exposure_at_default(60.0, 50.0, 1) == 50.0
    assert exposure_at_default(-5.0, math.inf, -1) == 5.0
    with pytest.raises(ValueError):
        exposure_at_default(1.0, -1.0, 1)


def test_exposure_bounds():
    r = np.random.default_rng(5)
    v, h = r.normal(0, 100, 1000), r.uniform(0, 80, 1000)
    for flag in (1, -1):
        e = exposure_at_default(v, h, flag)
        assert np.all(e >= 0) and np.all(e <= h) and np.all(e <= np.maximum(flag * v, 0))


def test_csa_validation():
    with pytest.raises(ValueError):
        CSATerms({"A": -1.0})
    with pytest.raises(ValueError):
        CSATerms(execution_barrier=-1.0)
    with pytest.raises(ValueError, match="non-increasing"):
        CSATerms({"A": 10.0, "B": 20.0}).threshold_vector(("A", "B", "D"))
    assert CSATerms({"A": 5.0}).threshold("B") == math.inf
    d = CSATerms({"A": 5.0, "B": math.inf}, "B", (2.0, 1.0), 3.0)
    assert CSATerms.from_dict(d.to_dict()) == d
    cp = _entity("CP", 0.01)
    with pytest.raises(ValueError):
        NettingSet(cp, cp, ())
    with pytest.raises(ValueError):
        NettingSet(cp, cp, ("a", "a"))


# ---------------------------------------------------------------- forward

def test_forward_deterministic_value():
    cube, m, ns = _deterministic()
    res = forward_cva(cube, m, ns.counterparty.pd_curve, ns.self_entity.pd_curve)
    # (1 - 0.4) * 0.1 * 100
    assert res.cva == pytest.approx(6.0, abs=1e-12)
    assert res.dva == 0.0 and res.total == pytest.approx(6.0, abs=1e-12)


def test_forward_zero_pd_is_zero():
    ns, market, cubes, _ = _setup(500)
    zero = PDTermStructure("Z", [1.0, 10.0], [0.0, 0.0])
    res = forward_cva(net_values(list(cubes.values())), market, zero, zero)
    assert res.cva == 0.0 and res.dva == 0.0


def test_forward_symmetric_cube():
    # discounted values of +K on half the paths and -K on the other half
    ns, market, _, _ = _setup(400)
    sign = np.where(np.arange(market.n_paths) % 2 == 0, 1.0, -1.0)
    cube = ValueCube("s", market.grid, 1e6 * sign / market.discount, market.seed, market.scenario_id)
    pd = ns.counterparty.pd_curve
    res = forward_cva(cube, market, pd, pd)
    assert res.cva == pytest.approx(res.dva, rel=1e-12) and res.cva > 0


def test_forward_monotone_in_pd_and_recovery():
    ns, market, cubes, _ = _setup(500)
    net = net_values(list(cubes.values()))
    own = ns.self_entity.pd_curve
    tenors = np.arange(1.0, 13.0)
    cvas = [forward_cva(net, market, pd_from_flat_spread(s, 0.4, tenors), own).cva for s in (0.01, 0.02, 0.04)]
    assert cvas[0] < cvas[1] < cvas[2]
    recs = [forward_cva(net, market, pd_from_flat_spread(0.02, 0.0, tenors).bumped(0.0), own).cva]
    hi = PDTermStructure("x", tenors, pd_from_flat_spread(0.02, 0.0, tenors).cumulative_pd, 0.7)
    recs.append(forward_cva(net, market, hi, own).cva)
    assert recs[1] == pytest.approx(0.3 * recs[0], rel=1e-12)


def test_forward_rejects_foreign_cube():
    _, market, cubes, _ = _setup(200)
    other = generate_market_scenarios(HW, market.grid, 200, 99)
    pd = PDTermStructure("x", [1.0], [0.1])
    with pytest.raises(ValueError):
        forward_cva(cubes["p5"], other, pd, pd)


# ---------------------------------------------------------------- backward

def test_backward_deterministic_value():
    cube, m, ns = _deterministic()
    n = len(m.grid)
    res = backward_cva(cube, ns, m, RatingMixture.single("A", ns.counterparty.pd_curve, n),
                       RatingMixture.single("A", ns.self_entity.pd_curve, n))
    assert res.cva == pytest.approx(6.0, abs=1e-12) and res.dva == 0.0


def test_backward_threshold_reading():
    cube, m, ns = _deterministic(threshold=50.0)
    n = len(m.grid)
    mix = lambda e: RatingMixture.single("A", e.pd_curve, n)
    capped = backward_cva(cube, ns, m, mix(ns.counterparty), mix(ns.self_entity))
    literal = backward_cva(cube, ns, m, mix(ns.counterparty), mix(ns.self_entity), literal_max=True)
    # min(100, 50) against max(100, 50)
    assert capped.cva == pytest.approx(3.0, abs=1e-12)
    assert literal.cva == pytest.approx(6.0, abs=1e-12)
    assert literal.details["literal_max"] and not capped.details["literal_max"]


def test_backward_zero_thresholds_give_zero():
    csa = CSATerms({"A": 0.0})
    ns, market, cubes, _ = _setup(500, csa=csa)
    n = len(market.grid)
    res = backward_cva(list(cubes.values()), ns, market,
                       RatingMixture.single("A", ns.counterparty.pd_curve, n),
                       RatingMixture.single("A", ns.self_entity.pd_curve, n))
    assert res.cva == 0.0 and res.dva == 0.0


def test_backward_mixture_shape_checked():
    ns, market, cubes, _ = _setup(200)
    short = RatingMixture.single("A", ns.counterparty.pd_curve, 3)
    with pytest.raises(ValueError):
        backward_cva(list(cubes.values()), ns, market, short, short)
    with pytest.raises(KeyError):
        RatingMixture(("A", "B"), np.full((3, 2), 0.5), {"A": ns.counterparty.pd_curve})


# ---------------------------------------------------------------- aggregate

def test_aggregate_zero_thresholds_give_zero():
    ns, market, cubes, credit = _setup(500, csa=CSATerms({"A": 0.0}))
    res = aggregate_cva(net_values(list(cubes.values())), market, credit, ns)
    assert res.cva == 0.0 and res.dva == 0.0
    assert res.details["cpty_defaults"] > 0


def test_aggregate_monotone_in_threshold():
    net = None
    prev = -1.0
    for h in (0.0, 1e4, 5e4, 2e5, math.inf):
        ns, market, cubes, credit = _setup(500, csa=CSATerms({"A": h}))
        net = net or net_values(list(cubes.values()))
        c = aggregate_cva(net, market, credit, ns).cva
        assert c >= prev
        prev = c


def test_aggregate_role_symmetry():
    ns, market, cubes, credit = _setup(1000)
    net = net_values(list(cubes.values()))
    flipped = ValueCube("f", net.grid, -net.values, net.seed, net.scenario_id)
    a = aggregate_cva(net, market, credit, ns)
    b = aggregate_cva(flipped, market, credit, ns.swapped())
    assert b.cva == a.dva and b.dva == a.cva and b.total == -a.total


def test_aggregate_first_closeout_never_exceeds_independent():
    ns, market, cubes, credit = _setup(1000, cp_spread=0.08, me_spread=0.08)
    net = net_values(list(cubes.values()))
    ind = aggregate_cva(net, market, credit, ns)
    first = aggregate_cva(net, market, credit, ns, closeout="first")
    assert first.cva <= ind.cva and first.dva <= ind.dva
    with pytest.raises(ValueError):
        aggregate_cva(net, market, credit, ns, closeout="last")


def test_oversampling_shrinks_error():
    ns, market, cubes, c1 = _setup(1000, oversample=1)
    *_, c10 = _setup(1000, oversample=10)
    net = net_values(list(cubes.values()))
    se1 = aggregate_cva(net, market, c1, ns).cva_standard_error
    se10 = aggregate_cva(net, market, c10, ns).cva_standard_error
    assert se10 < se1


def test_ate_at_current_rating_leaves_only_first_step_defaults():
    # the trigger fires at the first grid step on every surviving path
    csa = CSATerms(ate_rating="A")
    ns, market, cubes, credit = _setup(2000, csa=csa, cp_spread=0.3)
    net = net_values(list(cubes.values()))
    res = aggregate_cva(net, market, credit, ns)
    first_only = net.values.copy()
    first_only[2:] = 0.0
    ref = aggregate_cva(ValueCube("n", net.grid, first_only, net.seed, net.scenario_id), market, credit,
                        NettingSet(ns.counterparty, ns.self_entity, ns.deal_ids))
    assert res.cva == pytest.approx(ref.cva, rel=1e-12, abs=1e-12)
    assert res.details["terminated_paths"] > 0.9 * credit.n_paths


def test_mutual_puts():
    ns, market, cubes, credit = _setup(1000)
    net = net_values(list(cubes.values()))
    base = aggregate_cva(net, market, credit, ns)
    far = NettingSet(ns.counterparty, ns.self_entity, ns.deal_ids, CSATerms(mutual_put_dates=(2.0,),
                                                                            execution_barrier=math.inf))
    assert aggregate_cva(net, market, credit, far).cva == base.cva
    put = NettingSet(ns.counterparty, ns.self_entity, ns.deal_ids, CSATerms(mutual_put_dates=(2.0,)))
    assert aggregate_cva(net, market, credit, put).cva < base.cva
    off = NettingSet(ns.counterparty, ns.self_entity, ns.deal_ids, CSATerms(mutual_put_dates=(2.01,)))
    with pytest.raises(ValueError, match="grid"):
        aggregate_cva(net, market, credit, off)


# ---------------------------------------------------------------- incremental

def test_incremental_against_empty_base_is_standalone():
    ns, market, cubes, credit = _setup(1000)
    inc = incremental_cva([], cubes["p5"], ns, market, credit)
    alone = aggregate_cva(net_values([cubes["p5"]]), market, credit, ns).total
    assert inc.old_total == 0.0 and inc.incremental == alone


def test_incremental_offsetting_deal_removes_everything():
    ns, market, cubes, credit = _setup(1000)
    saved = list(cubes.values())
    net = net_values(saved)
    hedge = ValueCube("h", net.grid, -net.values, net.seed, net.scenario_id)
    inc = incremental_cva(saved, hedge, ns, market, credit)
    assert inc.incremental == pytest.approx(-inc.old_total, rel=1e-12)


def test_incremental_steps_add_up():
    ns, market, cubes, credit = _setup(1000)
    a, b = cubes["p5"], cubes["r7"]
    step1 = incremental_cva([], a, ns, market, credit).incremental
    step2 = incremental_cva([a], b, ns, market, credit).incremental
    both = aggregate_cva(net_values([a, b]), market, credit, ns).total
    assert step1 + step2 == pytest.approx(both, rel=1e-12)


def test_incremental_rejects_foreign_cube():
    ns, market, cubes, credit = _setup(300)
    other = ValueCube("x", market.grid, cubes["p5"].values, 0, market.scenario_id + 1)
    with pytest.raises(ValueError):
        incremental_cva([cubes["p5"]], other, ns, market, credit)


# ---------------------------------------------------------------- sensitivities

def _context(deals, n_paths=2000, params=HW):
    grid = build_time_grid(5.0, portfolio_event_dates(deals.values()))
    cp, me = _entity("CP", 0.02), _entity("ME", 0.01)
    ns = NettingSet(cp, me, tuple(deals))
    factors = FactorModel.one_factor({"CP": 0.0, "ME": 0.0})
    return build_context(ns, deals, params, factors, grid, n_paths, 5)


def test_cds_delta_signs():
    flow = {"f": CashflowInstrument("f", (FixedFlow(5.0, 1e6),))}
    ctx = _context(flow, 5000, HW0)
    fwd = cds_delta(ctx, "CP", 1e-3)
    cen = cds_delta(ctx, "CP", 1e-3, central=True)
    assert fwd > 0 and cen > 0
    assert fwd == pytest.approx(cen, rel=0.15)
    # a receivable carries no own-default loss
    assert cds_delta(ctx, "ME", 1e-3) == 0.0
    with pytest.raises(ValueError):
        cds_delta(ctx, "CP", 0.0)
    with pytest.raises(KeyError):
        cds_delta(ctx, "XX", 1e-3)


def test_market_greek():
    deals = {"r": SwapSpec(1e6, 0.03, 0, 5, 1, 0.5, False).instrument("r")}
    ctx = _context(deals)
    assert market_greek(ctx) == 0.0
    g = market_greek(ctx, parallel_shift=1e-3)
    assert g == market_greek(ctx, parallel_shift=1e-3)
    # a receiver loses value as rates rise, so its counterparty exposure falls
    assert g < 0


def test_wrong_way_sweep():
    deals = {"p": SwapSpec(1e6, 0.03, 0, 5, 1, 0.5, True).instrument("p")}
    ctx = _context(deals)
    pts = wrong_way_sweep(ctx, [0.0, 0.5, 1.5, -0.5])
    assert pts[0].result.total == ctx.cva().total
    assert pts[1].result is not None and set(pts[1].marginal_pd) == {"CP", "ME"}
    assert pts[2].result is None and pts[2].diagnostic
    # a payer gains when rates rise; defaults come from low credit returns, so a
    # negative loading on the rate factor is wrong-way and a positive one right-way
    assert pts[1].result.cva < pts[0].result.cva < pts[3].result.cva


# ---------------------------------------------------------------- exercise boundary

def test_flat_default_curve():
    c = flat_default_curve(0.02, 3.5)
    np.testing.assert_allclose(c.cumulative_pd, 1 - 0.98 ** np.arange(1.0, 5.0), rtol=1e-14)


def test_boundary_study_edges():
    b = BermudanSwaption("b", (0.0, 1.0, 2.0), SwapSpec(1e6, 0.03, 0, 5, 1, 0.5, False))
    g = build_time_grid(5.0, portfolio_event_dates([b]), exercise_dates=b.exercise_dates)
    m = generate_market_scenarios(HW, g, 1000, 2)
    pts = exercise_boundary_study(b, m, [0.0])
    assert pts[0].cva_blind == 0.0 and pts[0].cva_aware == 0.0 and math.isfinite(pts[0].boundary)
    late = BermudanSwaption("b", (1.0, 2.0), SwapSpec(1e6, 0.03, 0, 5, 1, 0.5, False))
    with pytest.raises(ValueError, match="t=0"):
        exercise_boundary_study(late, m, [0.01])
    with pytest.raises(ValueError):
        exercise_boundary_study(b, m, [1.0])
