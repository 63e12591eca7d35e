"""Command-line driver: calibration, scenarios, distributed valuation and CVA reports.

Subcommands share one JSON run configuration; command-line flags override
environment variables (``CVAGRID_OUTPUT_DIR``, ``CVAGRID_WORKERS``), which
override the file.  Exit codes: 0 success, 2 input error, 3 numerical
failure, 4 job failure.
"""
from __future__ import annotations

import argparse
import json
import math
import os
import sys
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Sequence

import numpy as np

from . import __version__
from .credit import (CreditEntity, LMSettings, propagate_matrix, PDTermStructure, StochasticThresholdParams,
                     TransitionMatrix, calibrate_entity, generate_credit_scenarios,
                     pd_from_flat_spread, read_pd_table, risk_neutralize_matrix, write_pd_table)
from .cva import (CSATerms, CVAContext, CVAResult, NettingSet, RatingMixture, aggregate_cva,
                  backward_cva, cds_delta, exercise_boundary_study, forward_cva, incremental_cva,
                  market_greek, net_values, wrong_way_sweep)
from .gridstore import (JobManifest, ScenarioSetRef, load_job_cubes, load_scenario_set, plan_jobs,
                        run_manifest, save_scenario_set)
from .hashing import fnv1a64, hash_json
from .scenarios import (DEFAULT_DENSITY, FactorModel, HullWhiteParams, ZeroCurve, build_time_grid,
                        generate_market_scenarios)
from .valuation import BermudanSwaption, deal_from_dict, portfolio_event_dates, value_deal

EXIT_OK, EXIT_INPUT, EXIT_NUMERICAL, EXIT_JOB = 0, 2, 3, 4


class InputError(Exception):
    pass


class NumericalError(Exception):
    pass


class JobError(Exception):
    pass


# --------------------------------------------------------------------------
# configuration
# --------------------------------------------------------------------------

@dataclass
class RunConfig:
    portfolio: str
    entities: str
    curve: str | float = 0.03
    mean_reversion: float = 0.03
    volatility: float = 0.01
    matrix: str | None = None
    n_paths: int = 10000
    oversample: int = 1
    seed: int = 42
    density_rule: list | None = None
    horizon: float | None = None
    output_dir: str = "cvagrid-out"
    workers: int = 1
    framework: str = "aggregate"
    lsm_degree: int = 2
    collapse: bool = False
    base_dir: str = field(default=".", repr=False)

    @classmethod
    def load(cls, path, overrides: dict | None = None) -> "RunConfig":
        try:
            raw = json.loads(Path(path).read_text())
        except FileNotFoundError:
            raise InputError(f"config file not found: {path}") from None
        except json.JSONDecodeError as exc:
            raise InputError(f"{path}: invalid JSON ({exc})") from None
        known = {f.name for f in fields(cls)} - {"base_dir"}
        unknown = set(raw) - known
        if unknown:
            raise InputError(f"{path}: unknown config keys {sorted(unknown)}")
        env = {}
        if os.environ.get("CVAGRID_OUTPUT_DIR"):
            env["output_dir"] = os.environ["CVAGRID_OUTPUT_DIR"]
        if os.environ.get("CVAGRID_WORKERS"):
            env["workers"] = int(os.environ["CVAGRID_WORKERS"])
        merged = {**raw, **env, **{k: v for k, v in (overrides or {}).items() if v is not None}}
        try:
            cfg = cls(**merged, base_dir=str(Path(path).resolve().parent))
        except TypeError as exc:
            raise InputError(f"{path}: {exc}") from None
        cfg.validate()
        return cfg

    def resolve(self, p: str) -> Path:
        q = Path(p)
        return q if q.is_absolute() else Path(self.base_dir) / q

    @property
    def out(self) -> Path:
        return self.resolve(self.output_dir)

    def validate(self) -> None:
        if self.n_paths < 100:
            raise InputError("n_paths must be at least 100")
        if self.oversample < 1:
            raise InputError("oversample must be at least 1")
        if self.workers < 1:
            raise InputError("workers must be at least 1")
        if self.framework not in ("forward", "backward", "aggregate"):
            raise InputError(f"unknown framework {self.framework!r}")
        for name in ("portfolio", "entities") + (("matrix",) if self.matrix else ()) + \
                (("curve",) if isinstance(self.curve, str) else ()):
            p = self.resolve(getattr(self, name))
            if not p.exists():
                raise InputError(f"{name} file not found: {p}")

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self) if f.name != "base_dir"}


def _file_hash(path: Path) -> str:
    return f"{fnv1a64(path.read_bytes()):016x}"


# --------------------------------------------------------------------------
# inputs
# --------------------------------------------------------------------------

def _load_json(path: Path) -> dict:
    try:
        return json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise InputError(f"{path}: invalid JSON ({exc})") from None


def load_curve(cfg: RunConfig) -> ZeroCurve:
    if isinstance(cfg.curve, (int, float)):
        return ZeroCurve.flat(float(cfg.curve))
    return ZeroCurve.from_csv(cfg.resolve(cfg.curve))


def load_matrix(cfg: RunConfig) -> TransitionMatrix | None:
    return TransitionMatrix.from_csv(cfg.resolve(cfg.matrix)) if cfg.matrix else None


@dataclass
class Portfolio:
    deals: dict
    netting_set: NettingSet


def _entity(d: dict, matrix: TransitionMatrix | None) -> CreditEntity:
    name, rating = d["name"], d["rating"]
    recovery = float(d.get("recovery", 0.4))
    if "pd_curve" in d:
        pc = d["pd_curve"]
        curve = PDTermStructure(name, pc["tenors"], pc["pd"], recovery)
    elif "spread" in d:
        curve = pd_from_flat_spread(float(d["spread"]), recovery, np.arange(1.0, 31.0), name)
    else:
        raise InputError(f"entity {name}: needs 'spread' or 'pd_curve'")
    ratings = tuple(d.get("ratings", ()))
    if not ratings and matrix is not None and rating in matrix.ratings:
        ratings = matrix.ratings
    st = d.get("stochastic_threshold")
    st = StochasticThresholdParams(**st) if st else None
    return CreditEntity(name, rating, curve, ratings, d.get("fat_tail_df"), st)


def load_entities(cfg: RunConfig, matrix=None) -> tuple[dict, FactorModel]:
    raw = _load_json(cfg.resolve(cfg.entities))
    rows = raw.get("entities", [])
    if not rows:
        raise InputError("entity file lists no entities")
    ents = {d["name"]: _entity(d, matrix) for d in rows}
    if all("loadings" in d for d in rows):
        load = np.array([d["loadings"] for d in rows], dtype=float)
        market = np.array([raw.get("market_loadings", [1.0] + [0.0] * (load.shape[1] - 1))], dtype=float)
        factors = FactorModel(market, load, credit_names=tuple(ents))
    else:
        factors = FactorModel.one_factor({d["name"]: float(d.get("correlation", 0.0)) for d in rows})
    return ents, factors


def load_portfolio(cfg: RunConfig, entities: dict) -> Portfolio:
    raw = _load_json(cfg.resolve(cfg.portfolio))
    deals = {}
    for rec in raw.get("deals", []):
        d = deal_from_dict(rec)
        if d.deal_id in deals:
            raise InputError(f"duplicate deal id {d.deal_id!r}")
        deals[d.deal_id] = d
    if not deals:
        raise InputError("portfolio has no deals")
    ns = raw.get("netting_set", {})
    try:
        cp, me = entities[ns["counterparty"]], entities[ns["self"]]
    except KeyError as exc:
        raise InputError(f"netting set refers to unknown entity {exc}") from None
    ids = tuple(ns.get("deals", list(deals)))
    missing = [i for i in ids if i not in deals]
    if missing:
        raise InputError(f"netting set lists unknown deals {missing}")
    return Portfolio(deals, NettingSet(cp, me, ids, CSATerms.from_dict(ns.get("csa", {}))))


def _grid(cfg: RunConfig, deals: dict):
    events = portfolio_event_dates(deals.values())
    horizon = cfg.horizon or max(events)
    rule = None
    if cfg.density_rule:
        rule = [(math.inf if str(a).lower() in ("inf", "infinity") else float(a), float(b))
                for a, b in cfg.density_rule]
    exercise = [e for d in deals.values() if isinstance(d, BermudanSwaption) for e in d.exercise_dates]
    return build_time_grid(horizon, events, rule, exercise_dates=exercise)


# --------------------------------------------------------------------------
# pipeline stages
# --------------------------------------------------------------------------

@dataclass
class Inputs:
    cfg: RunConfig
    matrix: TransitionMatrix | None
    entities: dict
    factors: FactorModel
    portfolio: Portfolio
    params: HullWhiteParams

    @property
    def grid(self):
        return _grid(self.cfg, self.portfolio.deals)

    def provenance(self) -> dict:
        files = {"portfolio": self.cfg.portfolio, "entities": self.cfg.entities}
        if self.cfg.matrix:
            files["matrix"] = self.cfg.matrix
        if isinstance(self.cfg.curve, str):
            files["curve"] = self.cfg.curve
        return {"version": __version__, "seed": self.cfg.seed, "n_paths": self.cfg.n_paths,
                "oversample": self.cfg.oversample, "config_hash": f"{hash_json(self.cfg.to_dict()):016x}",
                "input_hashes": {k: _file_hash(self.cfg.resolve(v)) for k, v in files.items()},
                "grid_hash": f"{self.grid.hash:016x}", "params_hash": f"{self.params.hash:016x}"}


def read_inputs(cfg: RunConfig) -> Inputs:
    matrix = load_matrix(cfg)
    entities, factors = load_entities(cfg, matrix)
    portfolio = load_portfolio(cfg, entities)
    params = HullWhiteParams(load_curve(cfg), cfg.mean_reversion, cfg.volatility)
    return Inputs(cfg, matrix, entities, factors, portfolio, params)


def _scenario_dir(cfg: RunConfig) -> Path:
    return cfg.out / "scenarios" / "base"


def stage_scenarios(inp: Inputs):
    market = generate_market_scenarios(inp.params, inp.grid, inp.cfg.n_paths, inp.cfg.seed, inp.factors)
    ref = save_scenario_set(market, _scenario_dir(inp.cfg), "base")
    return market, ref


def stage_value(inp: Inputs, workers: int) -> JobManifest:
    market_dir = _scenario_dir(inp.cfg)
    if not (market_dir / "meta.json").exists():
        raise InputError("no saved scenarios; run `cvagrid gen-scenarios` (or `cvagrid run`) first")
    market = load_scenario_set(market_dir)
    ref = ScenarioSetRef("base", str(market_dir), market.grid.hash, market.n_paths,
                         market.params.hash, market.seed, market.scenario_id)
    deals = [inp.portfolio.deals[d] for d in inp.portfolio.netting_set.deal_ids]
    manifest = plan_jobs(deals, [ref], inp.cfg.out / "cubes", lsm_degree=inp.cfg.lsm_degree)
    manifest.save(inp.cfg.out / "manifest.json")
    statuses = run_manifest(manifest, workers)
    failed = [s for s in statuses if not s.ok]
    if failed:
        msg = "; ".join(f"{s.job_id}: {s.message}" for s in failed)
        raise JobError(f"valuation stage: {len(failed)} job(s) failed: {msg}")
    return manifest


def _base_artifacts(cfg: RunConfig):
    mpath = cfg.out / "manifest.json"
    if not mpath.exists() or not (_scenario_dir(cfg) / "meta.json").exists():
        raise InputError("base run artifacts missing; run `cvagrid run` first")
    manifest = JobManifest.load(mpath)
    market = load_scenario_set(_scenario_dir(cfg))
    try:
        cubes = load_job_cubes(manifest, "base")
    except FileNotFoundError as exc:
        raise InputError(f"{exc}; run `cvagrid run` first") from None
    return manifest, market, cubes


def build_cva_context(inp: Inputs) -> CVAContext:
    manifest, market, cubes = _base_artifacts(inp.cfg)
    ns = inp.portfolio.netting_set
    if set(cubes) != set(ns.deal_ids):
        # collapsed or renamed jobs: net everything stored for this set
        ns = NettingSet(ns.counterparty, ns.self_entity, tuple(cubes), ns.csa)
    ents = (ns.counterparty, ns.self_entity)
    mats = {e.name: inp.matrix for e in ents if inp.matrix is not None and e.ratings == inp.matrix.ratings}
    thresholds = {e.name: calibrate_entity(e, market.grid, mats.get(e.name)) for e in ents}
    credit = generate_credit_scenarios(ents, thresholds, inp.factors, market, inp.cfg.oversample,
                                       inp.cfg.seed)
    return CVAContext(ns, dict(inp.portfolio.deals), inp.params, inp.factors, market, cubes, credit,
                      thresholds, mats, inp.cfg.oversample)


def _mixture(entity: CreditEntity, grid, matrix) -> RatingMixture:
    if matrix is not None and entity.ratings == matrix.ratings:
        # rating curves from the matrix, the entity's own rating replaced by its market curve
        steps = int(math.ceil(grid.horizon)) + 1
        pd = propagate_matrix(matrix, steps).pd
        tenors = np.arange(1.0, steps + 1.0)
        curves = {r: PDTermStructure(r, tenors, np.clip(pd[1:, k], 0, 1 - 1e-12), entity.recovery)
                  for k, r in enumerate(matrix.ratings[:-1])}
        curves[entity.current_rating] = entity.pd_curve
        return RatingMixture.from_matrix(entity, grid, matrix, curves)
    return RatingMixture.single(entity.current_rating, entity.pd_curve, len(grid))


def stage_aggregate(inp: Inputs, ctx: CVAContext | None = None) -> dict:
    ctx = ctx or build_cva_context(inp)
    ns = ctx.netting_set
    net = ctx.net_cube()
    market = ctx.market
    results = {"aggregate": aggregate_cva(net, market, ctx.credit, ns),
               "forward": forward_cva(net, market, ns.counterparty.pd_curve, ns.self_entity.pd_curve)}
    results["backward"] = backward_cva(net, ns, market,
                                       _mixture(ns.counterparty, market.grid, ctx.matrices.get(ns.counterparty.name)),
                                       _mixture(ns.self_entity, market.grid, ctx.matrices.get(ns.self_entity.name)))
    head = results[inp.cfg.framework]
    f, a = results["forward"], results["aggregate"]
    se = math.hypot(f.mc_standard_error, a.mc_standard_error)
    comparison = {k: {"cva": r.cva, "dva": r.dva, "total": r.total, "se": r.mc_standard_error}
                  for k, r in results.items()}
    comparison["forward_vs_aggregate_z"] = (f.total - a.total) / se if se > 0 else 0.0
    report = {"command": "run", "framework": inp.cfg.framework, "result": head.to_dict(),
              "comparison": comparison,
              "provenance": {**inp.provenance(), "scenario_id": f"{market.scenario_id:016x}"}}
    return report


# --------------------------------------------------------------------------
# reporting
# --------------------------------------------------------------------------

def _json_default(o):
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(type(o).__name__)


def write_report(out_dir: Path, name: str, report: dict) -> Path:
    out_dir.mkdir(parents=True, exist_ok=True)
    p = out_dir / f"{name}.json"
    p.write_text(json.dumps(report, indent=1, sort_keys=True, default=_json_default) + "\n")
    return p


def write_profile(out_dir: Path, result: CVAResult) -> Path:
    p = out_dir / "exposure_profile.csv"
    lines = ["t,ee,ene"] + [f"{t:.10g},{e:.10g},{n:.10g}" for t, e, n in
                            zip(result.times, result.ee_profile, result.ene_profile)]
    p.write_text("\n".join(lines) + "\n")
    return p


def print_table(rows: Sequence[Sequence], header: Sequence[str], out=sys.stdout) -> None:
    cells = [[str(h) for h in header]] + [[f"{c:.6g}" if isinstance(c, float) else str(c) for c in r]
                                          for r in rows]
    widths = [max(len(r[i]) for r in cells) for i in range(len(header))]
    for k, r in enumerate(cells):
        print("  ".join(c.rjust(w) for c, w in zip(r, widths)), file=out)
        if k == 0:
            print("  ".join("-" * w for w in widths), file=out)


# --------------------------------------------------------------------------
# commands
# --------------------------------------------------------------------------

def cmd_calibrate_matrix(args) -> int:
    try:
        targets = read_pd_table(args.pd_table)
    except (ValueError, FileNotFoundError) as exc:
        raise InputError(str(exc)) from None
    weights = None
    if args.weights:
        try:
            weights = np.column_stack([c.cumulative_pd for c in read_pd_table(args.weights)])
        except (ValueError, FileNotFoundError) as exc:
            raise InputError(f"weights: {exc}") from None
    seed = TransitionMatrix.from_csv(args.seed_matrix) if args.seed_matrix else None
    settings = LMSettings(max_iterations=args.max_iterations)
    Q, diag = risk_neutralize_matrix(targets, seed, weights, settings)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    Q.to_csv(out / "matrix.csv", "Year 1")
    write_pd_table(out / "fitted.csv", diag.fitted_curves(), "Fitted P(D)")
    with open(out / "residuals.csv", "w") as fh:
        fh.write("tenor," + ",".join(diag.ratings) + "\n")
        for t, row in zip(diag.tenors, diag.residuals):
            fh.write(f"{t:g}," + ",".join(f"{v:.8f}" for v in row) + "\n")
    report = {"command": "calibrate-matrix", "ratings": list(Q.ratings), "matrix": Q.q.tolist(),
              "weighted_rms": diag.weighted_rms, "max_abs_error": diag.max_abs_error,
              "iterations": diag.iterations, "converged": diag.converged,
              "jump_to_default_share": (diag.jump_to_default / np.where(diag.fitted > 0, diag.fitted, 1)).tolist(),
              "input_hash": _file_hash(Path(args.pd_table))}
    write_report(out, "calibration", report)
    print_table([[r] + [100 * v for v in row] for r, row in zip(Q.ratings, Q.q)],
                ["rating"] + [f"{c} %" for c in Q.ratings])
    print(f"\nweighted RMS {diag.weighted_rms:.6g}  max |err| {diag.max_abs_error:.6g}  "
          f"iterations {diag.iterations}  converged {diag.converged}")
    if not diag.converged:
        raise NumericalError("Levenberg-Marquardt did not converge; best-so-far matrix written")
    return EXIT_OK


def _cfg(args) -> RunConfig:
    return RunConfig.load(args.config, {"output_dir": getattr(args, "output_dir", None),
                                        "workers": getattr(args, "workers", None),
                                        "seed": getattr(args, "seed", None),
                                        "n_paths": getattr(args, "n_paths", None),
                                        "oversample": getattr(args, "oversample", None),
                                        "framework": getattr(args, "framework", None)})


def cmd_gen_scenarios(args) -> int:
    inp = read_inputs(_cfg(args))
    market, ref = stage_scenarios(inp)
    print(f"scenario set {ref.set_id}: {market.n_paths} paths x {len(market.grid)} times "
          f"id {market.scenario_id:016x} -> {ref.directory}")
    return EXIT_OK


def cmd_value(args) -> int:
    cfg = _cfg(args)
    inp = read_inputs(cfg)
    manifest = stage_value(inp, cfg.workers)
    print(f"{len(manifest.jobs)} job(s) valued into {manifest.output_dir}")
    return EXIT_OK


def _emit_run(cfg: RunConfig, report: dict, name: str = "report") -> None:
    write_report(cfg.out, name, report)
    res = report["result"]
    profile = CVAResult(res["cva"], res["dva"], res["total"], res["mc_standard_error"],
                        np.array(res["profile"]["ee"]), np.array(res["profile"]["ene"]),
                        np.array(res["profile"]["t"]))
    write_profile(cfg.out, profile)
    rows = [[k, v["cva"], v["dva"], v["total"], v["se"]] for k, v in report["comparison"].items()
            if isinstance(v, dict)]
    print_table(rows, ["framework", "cva", "dva", "total", "se"])
    print(f"\nforward vs aggregate: z = {report['comparison']['forward_vs_aggregate_z']:.3f}")


def cmd_aggregate(args) -> int:
    cfg = _cfg(args)
    report = stage_aggregate(read_inputs(cfg))
    _emit_run(cfg, report)
    return EXIT_OK


def cmd_run(args) -> int:
    cfg = _cfg(args)
    inp = read_inputs(cfg)
    stage = "scenarios"
    try:
        stage_scenarios(inp)
        stage = "valuation"
        stage_value(inp, cfg.workers)
        stage = "aggregation"
        report = stage_aggregate(inp)
    except JobError:
        raise
    except (InputError, NumericalError) as exc:
        raise type(exc)(f"{stage} stage: {exc}") from None
    _emit_run(cfg, report)
    return EXIT_OK


def cmd_greeks(args) -> int:
    cfg = _cfg(args)
    inp = read_inputs(cfg)
    ctx = build_cva_context(inp)
    out = {"command": "greeks", "provenance": inp.provenance(), "base_total": ctx.cva().total}
    rows = []
    if args.parallel_shift:
        g = market_greek(ctx, parallel_shift=args.parallel_shift)
        out["rate_delta"] = g
        rows.append(["rate", args.parallel_shift, g])
    if args.vol_shift:
        g = market_greek(ctx, vol_shift=args.vol_shift)
        out["vega"] = g
        rows.append(["vol", args.vol_shift, g])
    if args.cds_bump:
        names = [args.entity] if args.entity else [e.name for e in ctx.entities]
        out["cds_delta"] = {}
        for n in names:
            g = cds_delta(ctx, n, args.cds_bump)
            out["cds_delta"][n] = g
            rows.append([f"cds:{n}", args.cds_bump, g])
    write_report(cfg.out, "greeks", out)
    print_table(rows, ["greek", "bump", "dCVA/dbump"])
    return EXIT_OK


def cmd_incremental(args) -> int:
    cfg = _cfg(args)
    inp = read_inputs(cfg)
    ctx = build_cva_context(inp)
    rec = _load_json(Path(args.deal))
    deals = rec.get("deals", [rec])
    saved = [ctx.cubes[d] for d in ctx.netting_set.deal_ids] if not args.empty_base else []
    rows, out = [], {"command": "incremental", "provenance": inp.provenance(), "steps": []}
    for r in deals:
        deal = deal_from_dict(r)
        cube = value_deal(deal, ctx.market)
        res = incremental_cva(saved, cube, ctx.netting_set, ctx.market, ctx.credit)
        saved = saved + [cube]
        out["steps"].append({"deal": deal.deal_id, "incremental": res.incremental,
                             "old_total": res.old_total, "new_total": res.new_total})
        rows.append([deal.deal_id, res.old_total, res.new_total, res.incremental])
    write_report(cfg.out, "incremental", out)
    print_table(rows, ["deal", "old", "new", "incremental"])
    return EXIT_OK


def _floats(s: str) -> list[float]:
    try:
        return [float(x) for x in s.split(",") if x.strip()]
    except ValueError:
        raise InputError(f"expected comma-separated numbers, got {s!r}") from None


def cmd_wrongway(args) -> int:
    cfg = _cfg(args)
    inp = read_inputs(cfg)
    ctx = build_cva_context(inp)
    points = wrong_way_sweep(ctx, _floats(args.correlations), args.entity)
    rows, out = [], {"command": "wrongway", "provenance": inp.provenance(), "points": []}
    for p in points:
        if p.result is None:
            out["points"].append({"correlation": p.correlation, "skipped": p.diagnostic})
            rows.append([p.correlation, "skipped", "", p.diagnostic])
            continue
        out["points"].append({"correlation": p.correlation, "cva": p.result.cva,
                              "se": p.result.cva_standard_error, "total": p.result.total,
                              "marginal_pd": p.marginal_pd})
        rows.append([p.correlation, p.result.cva, p.result.cva_standard_error, ""])
    write_report(cfg.out, "wrongway", out)
    print_table(rows, ["correlation", "cva", "se", "note"])
    return EXIT_OK


def cmd_boundary(args) -> int:
    cfg = _cfg(args)
    inp = read_inputs(cfg)
    deal = inp.portfolio.deals.get(args.deal)
    if not isinstance(deal, BermudanSwaption):
        raise InputError(f"--deal must name a Bermudan swaption in the portfolio, got {args.deal!r}")
    grid = build_time_grid(deal.maturity, deal.event_dates(), exercise_dates=deal.exercise_dates)
    market = generate_market_scenarios(inp.params, grid, cfg.n_paths, cfg.seed)
    try:
        pts = exercise_boundary_study(deal, market, _floats(args.rates), args.recovery)
    except ValueError as exc:
        raise InputError(str(exc)) from None
    out = {"command": "boundary", "provenance": inp.provenance(),
           "points": [{"default_rate": p.default_rate, "boundary": p.boundary, "cva_blind": p.cva_blind,
                       "cva_aware": p.cva_aware, "relative_impact": p.relative_impact} for p in pts]}
    write_report(cfg.out, "boundary", out)
    print_table([[p.default_rate, p.boundary, p.cva_blind, p.cva_aware, p.relative_impact] for p in pts],
                ["default rate", "boundary", "cva blind", "cva aware", "rel impact"])
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="cvagrid", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"cvagrid {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    c = sub.add_parser("calibrate-matrix", help="fit a transition matrix to a PD table")
    c.add_argument("--pd-table", required=True)
    c.add_argument("--weights", help="CSV in PD-table layout holding per-cell weights")
    c.add_argument("--seed-matrix", help="starting matrix CSV")
    c.add_argument("--max-iterations", type=int, default=500)
    c.add_argument("--out", required=True)
    c.set_defaults(func=cmd_calibrate_matrix)

    def with_config(name, func, help_):
        s = sub.add_parser(name, help=help_)
        s.add_argument("--config", required=True)
        s.add_argument("--output-dir")
        s.add_argument("--workers", type=int)
        s.add_argument("--seed", type=int)
        s.add_argument("--n-paths", type=int)
        s.add_argument("--oversample", type=int)
        s.add_argument("--framework", choices=("forward", "backward", "aggregate"))
        s.set_defaults(func=func)
        return s

    with_config("gen-scenarios", cmd_gen_scenarios, "generate and store market scenarios")
    with_config("value", cmd_value, "value every deal into value cubes")
    with_config("aggregate", cmd_aggregate, "CVA from stored cubes")
    with_config("run", cmd_run, "scenarios, valuation and aggregation in one go")
    g = with_config("greeks", cmd_greeks, "market and CDS sensitivities")
    g.add_argument("--parallel-shift", type=float, default=0.0)
    g.add_argument("--vol-shift", type=float, default=0.0)
    g.add_argument("--cds-bump", type=float, default=0.0)
    g.add_argument("--entity")
    i = with_config("incremental", cmd_incremental, "incremental CVA of new deals")
    i.add_argument("--deal", required=True, help="JSON file with one deal or {'deals': [...]}")
    i.add_argument("--empty-base", action="store_true", help="start from an empty netting set")
    w = with_config("wrongway", cmd_wrongway, "CVA against credit/rate correlation")
    w.add_argument("--correlations", default="-0.5,0,0.5")
    w.add_argument("--entity")
    b = with_config("boundary", cmd_boundary, "exercise boundary under counterparty default")
    b.add_argument("--deal", required=True)
    b.add_argument("--rates", default="0,0.01,0.02")
    b.add_argument("--recovery", type=float, default=0.4)
    return p


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except InputError as exc:
        print(f"input error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except JobError as exc:
        print(f"job failure: {exc}", file=sys.stderr)
        return EXIT_JOB
    except (ValueError, KeyError, FileNotFoundError) as exc:
        print(f"input error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
