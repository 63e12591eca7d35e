"""File-backed value store, job manifests and deterministic parallel execution.

Value-store file layout (all little-endian)::

    offset  size  field
    0       8     magic  b"CVACUBE\\0"
    8       4     format version (uint32, currently 1)
    12      4     layout flags (uint32; bit 0 = exercise block present)
    16      64    deal id, UTF-8, NUL padded
    80      8     n_times (uint64)
    88      8     n_paths (uint64)
    96      8     grid hash, FNV-1a 64 (uint64)
    104     8     seed (uint64)
    112     8     scenario-set id (uint64)
    120     8*T   grid times (float64)
    ...     8*T*P values, time-major: row t holds all paths (float64)
    ...     T*P   exercise indicators (int8), only when flag bit 0 is set

Every file is written to a temporary name and renamed into place, so a
killed writer never leaves a partial cube behind.  A job also leaves a
``.ok`` or ``.err`` sidecar next to its output.
"""
from __future__ import annotations

import json
import os
import struct
import traceback
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .hashing import fnv1a64, hash_json
from .scenarios import FactorModel, HullWhiteParams, MarketScenarioSet, TimeGrid
from .valuation import (BermudanSwaption, CashflowInstrument, LSMConfig, ValueCube, collapse_cashflows,
                        deal_from_dict, deal_to_dict, value_deal)

MAGIC = b"CVACUBE\0"
VERSION = 1
FLAG_EXERCISE = 1
_HEADER = struct.Struct("<8sII64sQQQQQ")
HEADER_SIZE = _HEADER.size


@dataclass(frozen=True)
class ValueStoreHeader:
    deal_id: str
    n_times: int
    n_paths: int
    grid_hash: int
    seed: int
    scenario_id: int
    flags: int = 0
    version: int = VERSION

    def pack(self) -> bytes:
        raw_id = self.deal_id.encode("utf-8")
        if len(raw_id) > 64:
            raise ValueError(f"deal id longer than 64 bytes: {self.deal_id!r}")
        return _HEADER.pack(MAGIC, self.version, self.flags, raw_id, self.n_times, self.n_paths,
                            self.grid_hash, self.seed & (2 ** 64 - 1), self.scenario_id)

    @classmethod
    def unpack(cls, raw: bytes) -> "ValueStoreHeader":
        if len(raw) < HEADER_SIZE:
            raise ValueError(f"file shorter than the {HEADER_SIZE}-byte header")
        magic, version, flags, deal, n_t, n_p, gh, seed, sid = _HEADER.unpack(raw[:HEADER_SIZE])
        deal = deal.rstrip(b"\0")
        if magic != MAGIC or version != VERSION:
            raise ValueError(f"not a version-{VERSION} value store: magic={magic!r} version={version} "
                             f"flags={flags} deal={deal!r} n_times={n_t} n_paths={n_p}")
        return cls(deal.decode("utf-8"), n_t, n_p, gh, seed, sid, flags, version)

    def body_size(self) -> int:
        size = 8 * self.n_times + 8 * self.n_times * self.n_paths
        if self.flags & FLAG_EXERCISE:
            size += self.n_times * self.n_paths
        return size


def _atomic_write(path: Path, chunks: Sequence[bytes]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(f".{path.name}.tmp-{os.getpid()}")
    try:
        with open(tmp, "wb") as fh:
            for c in chunks:
                fh.write(c)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)
    finally:
        if tmp.exists():
            tmp.unlink()


def save_cube(cube: ValueCube, path) -> Path:
    flags = FLAG_EXERCISE if cube.exercise is not None else 0
    n_t, n_p = cube.values.shape
    header = ValueStoreHeader(cube.deal_id, n_t, n_p, cube.grid.hash, int(cube.seed),
                              int(cube.scenario_id), flags)
    chunks = [header.pack(), cube.grid.times.astype("<f8").tobytes(),
              cube.values.astype("<f8").tobytes()]
    if cube.exercise is not None:
        chunks.append(cube.exercise.astype(np.int8).tobytes())
    _atomic_write(Path(path), chunks)
    return Path(path)


def read_header(path) -> ValueStoreHeader:
    with open(path, "rb") as fh:
        return ValueStoreHeader.unpack(fh.read(HEADER_SIZE))


def load_cube(path, expected_grid_hash: int | None = None) -> ValueCube:
    raw = Path(path).read_bytes()
    h = ValueStoreHeader.unpack(raw)
    if len(raw) != HEADER_SIZE + h.body_size():
        raise ValueError(f"{path}: truncated or oversized file ({len(raw)} bytes, "
                         f"expected {HEADER_SIZE + h.body_size()})")
    if expected_grid_hash is not None and h.grid_hash != expected_grid_hash:
        raise ValueError(f"{path}: grid hash {h.grid_hash:#018x} != expected {expected_grid_hash:#018x}")
    off = HEADER_SIZE
    times = np.frombuffer(raw, "<f8", h.n_times, off).astype(np.float64)
    off += 8 * h.n_times
    values = np.frombuffer(raw, "<f8", h.n_times * h.n_paths, off).reshape(h.n_times, h.n_paths).copy()
    off += 8 * h.n_times * h.n_paths
    exercise = None
    if h.flags & FLAG_EXERCISE:
        exercise = np.frombuffer(raw, np.int8, h.n_times * h.n_paths, off).reshape(h.n_times, h.n_paths).copy()
    grid = TimeGrid(times, tuple("synthetic" for _ in times))
    if grid.hash != h.grid_hash:
        raise ValueError(f"{path}: stored grid does not match the header's grid hash")
    return ValueCube(h.deal_id, grid, values, h.seed, h.scenario_id, exercise, {"source": str(path)})


# --------------------------------------------------------------------------
# scenario-set persistence
# --------------------------------------------------------------------------

_MARKET_ARRAYS = ("state", "short_rate", "discount", "systematic_draws")


@dataclass(frozen=True)
class ScenarioSetRef:
    set_id: str
    directory: str
    grid_hash: int
    n_paths: int
    params_hash: int
    seed: int
    scenario_id: int


def save_scenario_set(market: MarketScenarioSet, directory, set_id: str) -> ScenarioSetRef:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    for name in _MARKET_ARRAYS:
        arr = np.ascontiguousarray(getattr(market, name), dtype="<f8")
        tmp = d / f".{name}.npy.tmp-{os.getpid()}"
        with open(tmp, "wb") as fh:
            np.save(fh, arr, allow_pickle=False)
        os.replace(tmp, d / f"{name}.npy")
    meta = {"set_id": set_id, "grid": market.grid.to_dict(), "n_paths": market.n_paths,
            "seed": market.seed, "params": market.params.to_dict(),
            "factors": market.factors.to_dict(), "scenario_id": market.scenario_id}
    _atomic_write(d / "meta.json", [json.dumps(meta, sort_keys=True, indent=1).encode()])
    return ScenarioSetRef(set_id, str(d), market.grid.hash, market.n_paths, market.params.hash,
                          market.seed, market.scenario_id)


def load_scenario_set(directory) -> MarketScenarioSet:
    d = Path(directory)
    try:
        meta = json.loads((d / "meta.json").read_text())
    except FileNotFoundError:
        raise FileNotFoundError(f"no scenario set at {d}") from None
    arrays = {n: np.load(d / f"{n}.npy", allow_pickle=False) for n in _MARKET_ARRAYS}
    market = MarketScenarioSet(TimeGrid.from_dict(meta["grid"]), int(meta["n_paths"]),
                               HullWhiteParams.from_dict(meta["params"]),
                               FactorModel.from_dict(meta["factors"]), int(meta["seed"]), **arrays)
    if market.scenario_id != meta["scenario_id"]:
        raise ValueError(f"{d}: stored scenario id does not match its contents")
    return market


# --------------------------------------------------------------------------
# manifests and jobs
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class Job:
    job_id: str
    deal_id: str
    set_id: str
    seed: int
    output: str


@dataclass
class JobManifest:
    deals: dict                  # deal id -> deal record
    scenario_sets: dict          # set id -> ScenarioSetRef as dict
    jobs: list
    output_dir: str
    lsm_degree: int | None = None
    path: str | None = field(default=None, compare=False)

    def __post_init__(self):
        outs = [j.output for j in self.jobs]
        if len(set(outs)) != len(outs):
            raise ValueError("job outputs must be unique")
        pairs = [(j.deal_id, j.set_id) for j in self.jobs]
        if len(set(pairs)) != len(pairs):
            raise ValueError("each deal/scenario-set pair must appear once")

    def to_dict(self) -> dict:
        return {"version": 1, "deals": self.deals, "scenario_sets": self.scenario_sets,
                "jobs": [asdict(j) for j in self.jobs], "output_dir": self.output_dir,
                "lsm_degree": self.lsm_degree}

    def save(self, path) -> Path:
        path = Path(path)
        _atomic_write(path, [json.dumps(self.to_dict(), sort_keys=True, indent=1).encode()])
        self.path = str(path)
        return path

    @classmethod
    def load(cls, path) -> "JobManifest":
        d = json.loads(Path(path).read_text())
        m = cls(d["deals"], d["scenario_sets"], [Job(**j) for j in d["jobs"]], d["output_dir"],
                d.get("lsm_degree"))
        m.path = str(path)
        return m

    def job(self, job_id: str) -> Job:
        for j in self.jobs:
            if j.job_id == job_id:
                return j
        raise KeyError(f"no job {job_id!r} in manifest")

    @property
    def hash(self) -> int:
        return hash_json(self.to_dict())


def plan_jobs(portfolio, scenario_sets: Sequence[ScenarioSetRef], output_dir,
              collapse: bool = False, collapsed_id: str = "collapsed",
              lsm_degree: int | None = None) -> JobManifest:
    """One job per (deal, scenario set).

    ``portfolio`` is a sequence of deals.  With ``collapse`` the linear
    deals are merged into a single instrument first, so they cost one job
    per scenario set.
    """
    deals = list(portfolio)
    if not deals:
        raise ValueError("portfolio is empty")
    if not scenario_sets:
        raise ValueError("no scenario sets to value against")
    ids = [d.deal_id for d in deals]
    dup = sorted({i for i in ids if ids.count(i) > 1})
    if dup:
        raise ValueError(f"duplicate deal ids: {dup}")
    if collapse:
        linear = [d for d in deals if isinstance(d, CashflowInstrument)]
        rest = [d for d in deals if not isinstance(d, CashflowInstrument)]
        if linear:
            if collapsed_id in ids and len(linear) < len(ids):
                raise ValueError(f"collapsed id {collapsed_id!r} clashes with a deal id")
            deals = [collapse_cashflows(linear, collapsed_id)] + rest
    records = {d.deal_id: deal_to_dict(d) for d in deals}
    sets = {s.set_id: asdict(s) for s in scenario_sets}
    if len(sets) != len(scenario_sets):
        raise ValueError("duplicate scenario-set ids")
    jobs = []
    for s in scenario_sets:
        for d in deals:
            jid = f"{d.deal_id}__{s.set_id}"
            jobs.append(Job(jid, d.deal_id, s.set_id, s.seed, f"{jid}.cube"))
    return JobManifest(records, sets, jobs, str(output_dir), lsm_degree)


@dataclass(frozen=True)
class JobStatus:
    job_id: str
    ok: bool
    output: str
    message: str = ""


_MARKET_CACHE: dict = {}


def _market_for(ref: dict) -> MarketScenarioSet:
    key = ref["directory"]
    market = _MARKET_CACHE.get(key)
    if market is None:
        market = load_scenario_set(key)
        if market.grid.hash != ref["grid_hash"] or market.scenario_id != ref["scenario_id"]:
            raise ValueError(f"scenario set at {key} does not match its manifest descriptor")
        _MARKET_CACHE.clear()
        _MARKET_CACHE[key] = market
    return market


def _sidecars(out: Path) -> tuple[Path, Path]:
    return out.with_name(out.name + ".ok"), out.with_name(out.name + ".err")


def run_job(manifest: JobManifest, job: Job | str) -> JobStatus:
    """Value one deal on one scenario set and store the cube.

    Re-running a job rewrites an identical file.  Failures leave no cube,
    only an ``.err`` sidecar with the traceback.
    """
    job = manifest.job(job) if isinstance(job, str) else job
    out = Path(manifest.output_dir) / job.output
    ok, err = _sidecars(out)
    try:
        if job.deal_id not in manifest.deals:
            raise KeyError(f"deal {job.deal_id!r} not in manifest")
        if job.set_id not in manifest.scenario_sets:
            raise KeyError(f"scenario set {job.set_id!r} not in manifest")
        deal = deal_from_dict(manifest.deals[job.deal_id])
        market = _market_for(manifest.scenario_sets[job.set_id])
        lsm = LSMConfig(degree=manifest.lsm_degree) if manifest.lsm_degree is not None else None
        cube = value_deal(deal, market, lsm)
        save_cube(cube, out)
        digest = fnv1a64(out.read_bytes())
        _atomic_write(ok, [json.dumps({"job": job.job_id, "fnv1a64": f"{digest:016x}"}).encode()])
        if err.exists():
            err.unlink()
        return JobStatus(job.job_id, True, str(out))
    except Exception as exc:  # recorded for the manifest, never half-written
        if ok.exists():
            ok.unlink()
        _atomic_write(err, [traceback.format_exc().encode()])
        return JobStatus(job.job_id, False, str(out), f"{type(exc).__name__}: {exc}")


def _run_by_id(manifest_path: str, job_id: str) -> JobStatus:
    return run_job(JobManifest.load(manifest_path), job_id)


def run_manifest(manifest: JobManifest, workers: int = 1, job_ids: Sequence[str] | None = None) -> list[JobStatus]:
    """Run jobs serially or in a process pool.  Results come back in manifest order."""
    ids = [j.job_id for j in manifest.jobs] if job_ids is None else list(job_ids)
    if workers <= 1:
        return [run_job(manifest, j) for j in ids]
    if manifest.path is None:
        manifest.save(Path(manifest.output_dir) / "manifest.json")
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(_run_by_id, [manifest.path] * len(ids), ids))


def job_status(manifest: JobManifest) -> dict[str, str]:
    """``ok`` / ``error`` / ``pending`` per job, from sidecar files."""
    out = {}
    for j in manifest.jobs:
        ok, err = _sidecars(Path(manifest.output_dir) / j.output)
        out[j.job_id] = "ok" if ok.exists() else "error" if err.exists() else "pending"
    return out


def load_job_cubes(manifest: JobManifest, set_id: str) -> dict[str, ValueCube]:
    """All completed cubes of one scenario set, keyed by deal id."""
    ref = manifest.scenario_sets[set_id]
    cubes = {}
    for j in manifest.jobs:
        if j.set_id != set_id:
            continue
        path = Path(manifest.output_dir) / j.output
        if not _sidecars(path)[0].exists():
            raise FileNotFoundError(f"job {j.job_id} has not completed")
        cubes[j.deal_id] = load_cube(path, ref["grid_hash"])
    return cubes
