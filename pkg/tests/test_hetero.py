import itertools
import json
import random
from collections import Counter

import numpy as np
import pytest

import oracles

from vnode.core import ModelSpec
from vnode.hetero import (DeviceModel, DevicePool, HeteroAssignment, InfeasibleError,
                          InterpolationError, ProfileCurve, TypeAssignment, candidate_batch_sizes,
                          linear_profiles, make_shard_plan, predict_step_time,
                          profile, shard_lengths, solve, throughput)


def test_candidate_grid():
    for m in (1, 5, 8, 100, 768, 8192):
        assert candidate_batch_sizes(m) == oracles.batch_grid(m)
    assert candidate_batch_sizes(8) == [1, 2, 3, 4, 6, 8]
    assert candidate_batch_sizes(1) == [1]
    assert candidate_batch_sizes(768)[-6:] == [128, 192, 256, 384, 512, 768]
    with pytest.raises(ValueError):
        candidate_batch_sizes(0)


def test_profile_curve_json_round_trip():
    c = ProfileCurve("V100", {4: 0.5, 1: 0.25}, 0.1)
    assert list(c.points) == [1, 4]
    again = ProfileCurve.from_dict(json.loads(c.to_json()))
    assert again.points == c.points and again.comm_overhead == 0.1
    with pytest.raises(InterpolationError):
        c.step_time(2)
    with pytest.raises(ValueError):
        ProfileCurve("V100", {1: 0.0})


def test_profile_discards_warmup_and_respects_capacity(caplog):
    model = DeviceModel("V100", 0.01, 0.001, 0.02, slow_factor=50.0, slow_steps=4)
    curve = profile(ModelSpec((4, 8, 2)), model, [1, 2, 4, 8, 16], memory_capacity=8)
    assert sorted(curve.points) == [1, 2, 4, 8]
    assert curve.skipped == (16,)
    for b, t in curve.points.items():
        assert t == pytest.approx(0.01 + 0.001 * b, rel=1e-12)
    assert curve.comm_overhead == pytest.approx(0.02)
    assert "exceeds capacity" in caplog.text
    again = profile(ModelSpec((4, 8, 2)), model, [1, 2, 4, 8, 16], memory_capacity=8)
    assert again.to_json() == curve.to_json()


def test_solver_matches_exhaustive_oracle():
    rng = random.Random(1234)
    checked = infeasible = 0
    for _ in range(1000):
        curves, pool, B, v_cap = oracles.random_solver_instance(rng)
        want = oracles.solver_optimum(curves, pool, B, v_cap)
        profiles = {t: ProfileCurve(t, pts, comm) for t, (pts, comm) in curves.items()}
        dp = DevicePool(pool)
        if want is None:
            with pytest.raises(InfeasibleError):
                solve(profiles, dp, B, v_cap)
            infeasible += 1
            continue
        got = solve(profiles, dp, B, v_cap)
        assert got.predicted_step_time == want
        assert got.predicted_step_time == predict_step_time(got, profiles)
        for a in got.per_type:
            assert a.num_devices <= dp.count(a.device_type)
            assert a.micro_batch <= dp.capacity(a.device_type)
            assert a.virtual_nodes <= v_cap
        checked += 1
    assert checked > 300 and infeasible > 0


def test_explain_table_matches_oracle_count():
    profiles = linear_profiles([DeviceModel("V100", 0.0, 2.0 ** -10), DeviceModel("P100", 0.0, 2.0 ** -8)], 16)
    pool = DevicePool({"V100": (2, 8), "P100": (3, 16)})
    vs = [1, 2, 4, 8, 16, 32, 64]
    opts = []
    for t in ("P100", "V100"):
        micro = [m for m in profiles[t].points if m <= pool.capacity(t)]
        opts.append([0] + [n * m * v for n in range(1, pool.count(t) + 1) for m in micro for v in vs])
    want = sum(1 for combo in itertools.product(*opts) if sum(combo) == 96 and any(combo))
    res = solve(profiles, pool, 96, explain=True)
    assert len(res.table) == want
    assert res.assignment.predicted_step_time == min(r["predicted_step_time_s"] for r in res.table)
    assert res.assignment.predicted_step_time == solve(profiles, pool, 96).predicted_step_time


def test_ties_prefer_fewer_devices_then_smaller_v():
    flat = {"V100": ProfileCurve("V100", {1: 1.0, 2: 1.0, 4: 1.0})}
    a = solve(flat, DevicePool({"V100": (4, 4)}), 4)
    # 1 x 4, 2 x 2 and 4 x 1 all take 1 s
    assert (a.per_type[0].num_devices, a.per_type[0].micro_batch) == (1, 4)
    lin = {"V100": ProfileCurve("V100", {2: 1.0, 4: 2.0})}
    a = solve(lin, DevicePool({"V100": (1, 4)}), 4)
    # m=4,v=1 and m=2,v=2 both take 2 s
    assert (a.per_type[0].micro_batch, a.per_type[0].virtual_nodes) == (4, 1)


def test_single_type_pool_is_homogeneous():
    profiles = linear_profiles([DeviceModel("V100", 0.01, 1e-3, 0.05)], 64)
    a = solve(profiles, DevicePool({"V100": (4, 64)}), 256)
    assert a.is_homogeneous and a.types == ["V100"]


def test_infeasible_reports_constraint():
    profiles = linear_profiles([DeviceModel("V100", 0.0, 1e-3)], 8)
    with pytest.raises(InfeasibleError, match="exceeds the largest reachable total"):
        solve(profiles, DevicePool({"V100": (1, 8)}), 1024)
    with pytest.raises(InfeasibleError):
        solve(profiles, DevicePool({"V100": (1, 8)}), 7 * 64 + 1)


def test_assignment_validation_and_json():
    with pytest.raises(ValueError):
        HeteroAssignment((TypeAssignment("V100", 2, 3, 1),), 1.0, 7)
    with pytest.raises(ValueError):
        HeteroAssignment((TypeAssignment("V100", 1, 6, 4),), 1.0, 6)
    a = HeteroAssignment((TypeAssignment("P100", 1, 2, 1), TypeAssignment("V100", 2, 3, 1)), 1.5, 8)
    assert HeteroAssignment.from_dict(json.loads(a.to_json())) == a
    assert a.device_shares() == [("P100:0", 2), ("V100:0", 3), ("V100:1", 3)]
    assert throughput(a) == 8 / 1.5


# -- sharding -------------------------------------------------------------------

def test_shard_lengths_proportional():
    assert shard_lengths(8, [6, 2]) == [6, 2]
    assert shard_lengths(10, [3072, 3072, 1024, 1024]) == [4, 4, 1, 1]
    assert sum(shard_lengths(1001, [5, 3, 3])) == 1001
    with pytest.raises(ValueError):
        shard_lengths(10, [0, 0])


def test_random_shard_plans_cover_exactly_once():
    rng = np.random.default_rng(99)
    for trial in range(100):
        n = int(rng.integers(1, 5000))
        shares = [int(s) for s in rng.integers(1, 4096, size=int(rng.integers(1, 9)))]
        plan = make_shard_plan(n, shares, epoch_seed=trial)
        ids = np.concatenate([plan.ids(f"dev{i}") for i in range(len(shares))])
        assert Counter(ids.tolist()) == Counter(range(n))
        assert plan.lengths == shard_lengths(n, shares)


def test_shard_plan_from_assignment():
    a = HeteroAssignment((TypeAssignment("P100", 2, 1024, 32), TypeAssignment("V100", 2, 3072, 64)),
                         1.0, 8192)
    plan = make_shard_plan(8192 * 3, a, epoch_seed=1)
    assert plan.lengths == [3072, 3072, 9216, 9216]
    assert len(plan.ids("V100:1")) == 9216
    with pytest.raises(KeyError):
        plan.ids("K80:0")
