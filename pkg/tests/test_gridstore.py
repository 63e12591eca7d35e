from __future__ import annotations

import struct

import numpy as np
import pytest

from cvagrid.gridstore import (HEADER_SIZE, JobManifest, ValueStoreHeader, job_status, load_cube,
                               load_job_cubes, load_scenario_set, plan_jobs, read_header, run_job,
                               run_manifest, save_cube, save_scenario_set)
from cvagrid.scenarios import HullWhiteParams, ZeroCurve, build_time_grid, generate_market_scenarios
from cvagrid.valuation import (BermudanSwaption, SwapSpec, ValueCube, portfolio_event_dates,
                               value_deal)

HW = HullWhiteParams(ZeroCurve.flat(0.03), 0.03, 0.01)


def _deals():
    return [SwapSpec(1e6, 0.03, 0, 4, 1, 0.5, True).instrument("s1"),
            SwapSpec(2e6, 0.031, 0, 3, 1, 0.5, False).instrument("s2"),
            BermudanSwaption("b1", (1.0, 2.0), SwapSpec(1e6, 0.03, 0, 4, 1, 0.5, True))]


def _market(deals, seed=1, n_paths=300):
    g = build_time_grid(4.0, portfolio_event_dates(deals), exercise_dates=(1.0, 2.0))
    return generate_market_scenarios(HW, g, n_paths, seed)


# ---------------------------------------------------------------- value-store files

def test_header_is_120_bytes_and_round_trips():
    h = ValueStoreHeader("deal-1", 34, 1000, 0xDEADBEEF12345678, 42, 7, 1)
    raw = h.pack()
    assert HEADER_SIZE == 120 and len(raw) == 120
    assert raw[:8] == b"CVACUBE\0"
    assert struct.unpack_from("<I", raw, 8)[0] == 1
    assert ValueStoreHeader.unpack(raw) == h
    with pytest.raises(ValueError):
        ValueStoreHeader("x" * 65, 1, 1, 0, 0, 0).pack()


def test_cube_round_trip_is_bit_exact(tmp_path):
    deals = _deals()
    m = _market(deals)
    for d in deals:
        cube = value_deal(d, m)
        path = save_cube(cube, tmp_path / f"{d.deal_id}.cube")
        back = load_cube(path, m.grid.hash)
        assert back.values.tobytes() == cube.values.tobytes()
        assert back.grid.hash == m.grid.hash and back.scenario_id == m.scenario_id
        assert back.deal_id == d.deal_id and back.seed == cube.seed
        if cube.exercise is None:
            assert back.exercise is None
        else:
            np.testing.assert_array_equal(back.exercise, cube.exercise)
        assert path.stat().st_size == HEADER_SIZE + read_header(path).body_size()


def test_corrupt_files_are_rejected(tmp_path):
    m = _market(_deals()[:1])
    path = save_cube(value_deal(_deals()[0], m), tmp_path / "c.cube")
    raw = path.read_bytes()
    with pytest.raises(ValueError, match="grid hash"):
        load_cube(path, m.grid.hash ^ 1)
    (tmp_path / "short.cube").write_bytes(raw[:-8])
    with pytest.raises(ValueError, match="truncated"):
        load_cube(tmp_path / "short.cube")
    (tmp_path / "tiny.cube").write_bytes(raw[:50])
    with pytest.raises(ValueError, match="header"):
        load_cube(tmp_path / "tiny.cube")
    (tmp_path / "magic.cube").write_bytes(b"NOTACUBE" + raw[8:])
    with pytest.raises(ValueError, match="magic"):
        load_cube(tmp_path / "magic.cube")
    (tmp_path / "ver.cube").write_bytes(raw[:8] + struct.pack("<I", 2) + raw[12:])
    with pytest.raises(ValueError, match="version"):
        load_cube(tmp_path / "ver.cube")


def test_no_temporary_files_left(tmp_path):
    m = _market(_deals()[:1])
    save_cube(value_deal(_deals()[0], m), tmp_path / "c.cube")
    assert [p.name for p in tmp_path.iterdir()] == ["c.cube"]


def test_scenario_set_round_trip(tmp_path):
    m = _market(_deals(), seed=5)
    ref = save_scenario_set(m, tmp_path / "base", "base")
    back = load_scenario_set(tmp_path / "base")
    for name in ("state", "short_rate", "discount", "systematic_draws"):
        assert getattr(back, name).tobytes() == getattr(m, name).tobytes()
    assert back.scenario_id == m.scenario_id == ref.scenario_id and ref.grid_hash == m.grid.hash
    with pytest.raises(FileNotFoundError):
        load_scenario_set(tmp_path / "missing")


# ---------------------------------------------------------------- planning

def _refs(tmp_path, seeds=(1, 2)):
    deals = _deals()
    return deals, [save_scenario_set(_market(deals, s), tmp_path / f"set{s}", f"set{s}") for s in seeds]


def test_one_job_per_deal_and_set(tmp_path):
    deals, refs = _refs(tmp_path)
    man = plan_jobs(deals, refs, tmp_path / "out")
    assert len(man.jobs) == 6
    assert {(j.deal_id, j.set_id) for j in man.jobs} == {(d.deal_id, r.set_id) for d in deals for r in refs}


def test_collapsed_swaps_cost_one_job_per_set(tmp_path):
    _, refs = _refs(tmp_path)
    swaps = [SwapSpec(1e6, 0.03, 0, 4, 1, 0.5, k % 2 == 0).instrument(f"s{k}") for k in range(1000)]
    man = plan_jobs(swaps, refs, tmp_path / "out", collapse=True)
    assert len(man.jobs) == 2 and {j.deal_id for j in man.jobs} == {"collapsed"}


def test_planning_rejects_bad_input(tmp_path):
    deals, refs = _refs(tmp_path, seeds=(1,))
    with pytest.raises(ValueError, match="empty"):
        plan_jobs([], refs, tmp_path)
    with pytest.raises(ValueError):
        plan_jobs(deals, [], tmp_path)
    with pytest.raises(ValueError, match="duplicate"):
        plan_jobs(deals + [deals[0]], refs, tmp_path)


def test_manifest_save_load(tmp_path):
    deals, refs = _refs(tmp_path)
    man = plan_jobs(deals, refs, tmp_path / "out", lsm_degree=2)
    back = JobManifest.load(man.save(tmp_path / "manifest.json"))
    assert back == man and back.hash == man.hash
    with pytest.raises(KeyError):
        man.job("nope")


# ---------------------------------------------------------------- execution

def test_runs_are_byte_identical_serial_and_parallel(tmp_path):
    deals, refs = _refs(tmp_path)
    a = plan_jobs(deals, refs, tmp_path / "a")
    b = plan_jobs(deals, refs, tmp_path / "b")
    assert all(s.ok for s in run_manifest(a, workers=1))
    assert all(s.ok for s in run_manifest(b, workers=2))
    for j in a.jobs:
        assert (tmp_path / "a" / j.output).read_bytes() == (tmp_path / "b" / j.output).read_bytes()


def test_rerun_is_idempotent(tmp_path):
    deals, refs = _refs(tmp_path, seeds=(1,))
    man = plan_jobs(deals, refs, tmp_path / "out")
    assert set(job_status(man).values()) == {"pending"}
    run_manifest(man)
    first = {j.job_id: (tmp_path / "out" / j.output).read_bytes() for j in man.jobs}
    assert set(job_status(man).values()) == {"ok"}
    run_job(man, man.jobs[0].job_id)
    run_manifest(man)
    assert {j.job_id: (tmp_path / "out" / j.output).read_bytes() for j in man.jobs} == first
    cubes = load_job_cubes(man, "set1")
    assert set(cubes) == {d.deal_id for d in deals}


def test_failed_job_leaves_error_sidecar(tmp_path):
    deals, refs = _refs(tmp_path, seeds=(1,))
    man = plan_jobs(deals, refs, tmp_path / "out")
    # a flow beyond the scenario horizon cannot be valued
    man.deals["s1"] = {"id": "s1", "type": "cashflows", "fixed": [[9.0, 1.0]], "floating": []}
    st = run_job(man, "s1__set1")
    assert not st.ok and "horizon" in st.message
    assert job_status(man)["s1__set1"] == "error"
    assert not (tmp_path / "out" / "s1__set1.cube").exists()
    with pytest.raises(FileNotFoundError):
        load_job_cubes(man, "set1")


def test_stored_cube_matches_direct_valuation(tmp_path):
    deals, refs = _refs(tmp_path, seeds=(3,))
    man = plan_jobs(deals, refs, tmp_path / "out")
    run_manifest(man)
    m = load_scenario_set(tmp_path / "set3")
    cubes = load_job_cubes(man, "set3")
    for d in deals:
        assert cubes[d.deal_id].values.tobytes() == value_deal(d, m).values.tobytes()


def test_cube_shape_is_checked():
    g = build_time_grid(1.0)
    with pytest.raises(ValueError):
        ValueCube("x", g, np.zeros((3, 4)))
    with pytest.raises(ValueError):
        ValueCube("x", g, np.zeros((len(g), 4)), exercise=np.zeros((len(g), 3)))
