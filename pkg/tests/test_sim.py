import math
from collections import defaultdict
from dataclasses import replace

import numpy as np
import pytest

from cavsafe.dynamics import PRESETS
from cavsafe.geometry import default_intersection
from cavsafe.planner import PlanningLimits, eval_plan, plan_exit_time
from cavsafe.sim import (
    BARRIER_SLACK,
    ArrivalSpec,
    ScenarioConfig,
    SimLog,
    StepRecord,
    metrics,
    run,
    spawn_arrivals,
)

PATHS = tuple(default_intersection().paths.values())


def config(**kw):
    return ScenarioConfig(paths=PATHS, **kw)


def by_time(log):
    out = defaultdict(dict)
    for r in log.steps:
        out[round(r.t, 9)][r.cav] = r
    return out


class TestArrivals:
    def test_zero_rate(self):
        assert spawn_arrivals(config(arrivals=ArrivalSpec(rate=0.0))) == []

    def test_mean_headway(self):
        arr = spawn_arrivals(config(seed=3, arrivals=ArrivalSpec(rate=3600.0, count=10001)))
        gaps = np.diff([a.t for a in arr])
        assert len(gaps) == 10000
        assert abs(gaps.mean() - 1.0) <= 0.05

    def test_deterministic(self):
        cfg = config(seed=5)
        assert spawn_arrivals(cfg) == spawn_arrivals(cfg)
        assert spawn_arrivals(cfg) != spawn_arrivals(replace(cfg, seed=6))

    def test_ranges_and_split(self):
        cfg = config(seed=1, arrivals=ArrivalSpec(count=500, split=(1, 0, 0, 0, 0, 1)))
        arr = spawn_arrivals(cfg)
        assert {a.path for a in arr} == {PATHS[0].id, PATHS[5].id}
        assert all(12.0 <= a.v0 <= 14.0 for a in arr)
        assert arr[0].t == 0.0

    def test_fixed_headway(self):
        arr = spawn_arrivals(config(arrivals=ArrivalSpec(rate=1800.0, count=5, mode="uniform")))
        assert [a.t for a in arr] == [0.0, 2.0, 4.0, 6.0, 8.0]

    def test_rejects_bad_config(self):
        with pytest.raises(ValueError):
            config(dt=0.0)
        with pytest.raises(ValueError):
            config(arrivals=ArrivalSpec(v0_range=(12.0, 25.0)))


class TestRunBasics:
    def test_zero_arrivals(self):
        log = run(config(arrivals=ArrivalSpec(rate=0.0)))
        assert log.steps == [] and log.cavs == [] and log.violations == []

    def test_single_cav_follows_plan(self):
        # u_max = 0.3 keeps the minimum-time plan below v_max, so no bound ever binds;
        # the remaining error is the zero-order hold of a linear-in-time planned control
        lim = PlanningLimits(u_max=0.3)
        cfg = config(
            arrivals=ArrivalSpec(count=1),
            limits=lim,
            vehicle=replace(PRESETS["paper-simple"], u_max=0.3),
            vehicle_preset="paper-simple",
        )
        log = run(cfg)
        plan = log.plan_of(log.cavs[0].cav)
        dt = cfg.dt
        errs = [abs(r.p - eval_plan(plan, r.t)[0]) for r in log.steps if r.t <= plan.tf]
        bound = len(errs) * abs(6 * plan.a) * dt**3 / 12
        assert max(errs) <= bound
        assert metrics(log)["qp_interventions"] == 0
        assert log.violations == []
        assert log.cavs[0].exit_time == pytest.approx(plan.tf, abs=dt)

    def test_determinism(self):
        cfg = config(seed=2, arrivals=ArrivalSpec(count=6), duration=60.0)
        a, b = run(cfg), run(cfg)
        assert a.steps == b.steps and a.pairs == b.pairs and a.cavs == b.cavs and a.violations == b.violations

    def test_noise_does_not_move_arrivals(self):
        cfg = config(seed=2, arrivals=ArrivalSpec(count=4), duration=40.0)
        quiet = run(cfg)
        noisy = run(replace(cfg, noise_sigma=0.2))
        assert [c.arrival for c in quiet.cavs] == [c.arrival for c in noisy.cavs]


class TestMetrics:
    def test_empty_log(self):
        m = metrics(SimLog())
        assert m["violations_total"] == 0 and m["qp_interventions"] == 0 and m["qp_infeasible"] == 0
        assert m["cavs"] == {"registered": 0, "exited": 0, "planner_flagged": 0, "mean_entry_delay": 0.0}
        assert all(v == {"count": 0, "mean": 0.0, "std": 0.0} for v in m["timing"].values())

    def test_one_forced_infeasibility(self):
        log = SimLog()
        log.steps.append(StepRecord(0.0, 0, 0, 0.0, 12.0, 0.0, 0.0, 0.0, "", 8.0, 11.8, math.nan, False))
        log.steps.append(StepRecord(0.1, 0, 0, 1.2, 12.0, 0.0, 0.5, -0.3, "lateral-after", 8.0, 11.8, math.nan, True))
        m = metrics(log)
        assert m["qp_interventions"] == 1
        assert m["qp_infeasible"] == 1


class TestSec5Properties:
    def test_conservation(self, sec5_runs):
        for log, _ in sec5_runs.values():
            steps = by_time(log)
            for t, rows in steps.items():
                registered = sum(1 for c in log.cavs if c.t0 <= t + 1e-9)
                exited = sum(1 for c in log.cavs if c.exit_time <= t + 1e-9)
                assert len(rows) == registered - exited

    def test_audit_complete(self, sec5_runs):
        # one record per step from entry until the step in which the CAV leaves
        log, _ = sec5_runs[0]
        counts = defaultdict(int)
        for r in log.steps:
            counts[r.cav] += 1
        for c in log.cavs:
            assert counts[c.cav] == math.ceil((c.exit_time - c.t0) / 0.1 - 1e-9)

    def test_causality(self, sec5_runs, sec5_config):
        log, _ = sec5_runs[0]
        inter = default_intersection()
        for c in log.cavs:
            earlier = [e for e in log.cavs if e.cav < c.cav and e.exit_time > c.t0 + 1e-9]
            deps = [int(x) for x in c.depends_on.split()]
            assert set(deps) <= {e.cav for e in earlier}
            snap = [(e.cav, e.path, log.plan_of(e.cav)) for e in earlier]
            res = plan_exit_time(
                c.cav, c.t0, c.v0, inter.path(c.path), snap, sec5_config.limits, inter, gains=sec5_config.cbf
            )
            assert res.tf == pytest.approx(c.tf, abs=1e-5)

    def test_forward_invariance(self, sec5_runs):
        for log, _ in sec5_runs.values():
            assert not any(r.infeasible for r in log.steps)
            for r in log.steps:
                assert min(r.h1, r.h2) >= -BARRIER_SLACK
                if not math.isnan(r.z1):
                    assert r.z1 >= -BARRIER_SLACK
            for r in log.pairs:
                assert r.value >= -BARRIER_SLACK
                if r.case == "before":
                    assert r.psi1 >= -BARRIER_SLACK

    def test_certificates_at_applied_control(self, sec5_runs, sec5_config):
        g = sec5_config.cbf
        for log, _ in sec5_runs.values():
            steps = by_time(log)
            for r in log.steps:
                # drag is zero for the kinematic vehicle of this scenario
                assert -r.u_star + g.lambda1 * r.h1 >= -1e-9
                assert r.u_star + g.lambda2 * r.h2 >= -1e-9
            for pr in log.pairs:
                if pr.case != "after":
                    continue
                rows = steps[round(pr.t, 9)]
                ri, rj = rows[pr.cav], rows[pr.other]
                assert -ri.v - rj.v - g.phi * ri.u_star + g.lambda4 * pr.value >= -1e-9

    def test_module_timings(self, sec5_runs):
        for log, _ in sec5_runs.values():
            m = metrics(log)["timing"]
            assert m["planning"]["count"] >= len(log.cavs)
            assert m["barrier"]["count"] == len(log.steps)
