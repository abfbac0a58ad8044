"""Acceptance gate: one test per criterion, each reporting a pass/fail line."""

import math
import time
from collections import defaultdict
from dataclasses import replace

import numpy as np

from cavsafe.barrier import (
    LOWER,
    UPPER,
    CbfGains,
    ControlBound,
    NeighborView,
    QpProblem,
    cbf_lateral_after_bound,
    cbf_lateral_before_bound,
    cbf_rear_end_bound,
    cbf_speed_bounds,
    lateral_after_barrier,
    psi2,
    psi_chain,
    rear_end_barrier,
    solve_qp,
    speed_barriers,
)
from cavsafe.dynamics import PRESETS, CavState, VehicleParams, integrate
from cavsafe.export import export
from cavsafe.planner import (
    PlanningLimits,
    boundary_residuals,
    eval_plan,
    min_rear_end_margin,
    solve_boundary_cubic,
    time_at_position,
)
from cavsafe.scenario import load_preset
from cavsafe.sim import metrics, run

NOISE_SEEDS = range(3)
SOURCES = ["speed-max", "speed-min", "rear-end", "lateral-after", "lateral-before"]


def drag(v, params):
    return (params.beta0 + params.beta1 * v + params.beta2 * v * v) / params.mass


def random_params(rng):
    return VehicleParams(mass=rng.uniform(800, 2500), beta0=rng.uniform(0, 50), beta1=rng.uniform(0, 5), beta2=rng.uniform(0, 1))


def test_1_sec5_safety(sec5_runs, acceptance):
    bad, slow = [], []
    worst = 0.0
    for seed, (log, elapsed) in sec5_runs.items():
        m = metrics(log)
        worst = max(worst, elapsed)
        if m["violations_total"] or m["barrier_dips"] or m["qp_infeasible"] or m["cavs"]["exited"] != 24:
            bad.append(seed)
        if elapsed >= 60.0:
            slow.append(seed)
    acceptance(
        1, "paper-sec5 over 20 seeds has zero audited violations", not bad and not slow,
        f"seeds with violations {bad}, over 60 s {slow}, slowest {worst:.1f} s",
    )


def _override_episode(log):
    """First CAV whose filter overrides u_ref at a speed-limit approach and matches the plan elsewhere."""
    rows = defaultdict(list)
    for r in log.steps:
        rows[r.cav].append(r)
    for cav, rs in rows.items():
        over = [r for r in rs if abs(r.u_star - r.u_ref) > 1e-3]
        if not over or not all("speed-max" in r.active for r in over):
            continue
        lo, hi = over[0].t - 0.5, over[-1].t + 0.5
        rest = [r for r in rs if not lo <= r.t <= hi]
        dev = max((max(abs(r.u_plan - r.u_ref), abs(r.u_ref - r.u_star), abs(r.u_plan - r.u_star)) for r in rest), default=0.0)
        if rest and dev <= 1e-3:
            return cav, len(over), min(r.h1 for r in over), dev
    return None


def test_2_speed_limit_override(sec5_runs, acceptance):
    for seed, (log, _) in sec5_runs.items():
        found = _override_episode(log)
        if found:
            cav, n, h1, dev = found
            acceptance(
                2, "filter overrides u_ref near the speed limit and is idle elsewhere", True,
                f"seed {seed} CAV {cav}: {n} override steps, min v_max - v {h1:.3g} m/s, max deviation elsewhere {dev:.2g}",
            )
            return
    acceptance(2, "filter overrides u_ref near the speed limit and is idle elsewhere", False, "no seed shows the pattern")


def test_3_planner_correctness(acceptance):
    rng = np.random.default_rng(2024)
    lim = PlanningLimits()
    res_worst = min_gap = trip_worst = 0.0
    for _ in range(1000):
        t0 = rng.uniform(0, 300)
        v0 = rng.uniform(lim.v_min, lim.v_max)
        pf = rng.uniform(50, 400)
        tf = t0 + pf / v0 * rng.uniform(0.8, 1.5)
        plan = solve_boundary_cubic(t0, tf, v0, pf)
        res_worst = max(res_worst, max(abs(r) for r in boundary_residuals(plan, v0, pf)))

        # exact interval minimum against dense sampling, for a follower behind this plan
        t1 = t0 + rng.uniform(0.5, 3)
        follow = solve_boundary_cubic(t1, t1 + rng.uniform(0.8, 1.5) * pf / v0, v0, pf)
        hi = min(follow.tf, plan.tf)
        exact = min_rear_end_margin(follow, plan, (t1, hi), lim)
        ts = np.append(np.arange(t1, hi, 1e-4), hi)
        pk = eval_plan(plan, ts)[0]
        pi, vi, _ = eval_plan(follow, ts)
        sampled = (pk - pi - lim.gamma - lim.phi * vi).min()
        min_gap = max(min_gap, abs(sampled - exact))

        _, v, _ = eval_plan(plan, np.linspace(t0, tf, 201))
        if v.min() > 0:
            t = rng.uniform(t0, tf)
            trip_worst = max(trip_worst, abs(time_at_position(plan, eval_plan(plan, t)[0]) - t))
    ok = res_worst <= 1e-9 and min_gap <= 1e-6 and trip_worst <= 1e-6
    acceptance(
        3, "planner residuals, interval minima and inverse", ok,
        f"max residual {res_worst:.2g}, minimum vs sampling {min_gap:.2g} m, round trip {trip_worst:.2g} s",
    )


def test_4_qp_optimality(acceptance):
    rng = np.random.default_rng(4)
    grid = np.round(np.arange(-3.0, 3.0 + 5e-5, 1e-4), 10)
    grid_worst, active_fail, interior_fail, checked = 0.0, 0, 0, 0
    for _ in range(10000):
        bounds = [ControlBound(UPPER, 2.0, "actuator"), ControlBound(LOWER, -2.0, "actuator")]
        for _ in range(rng.integers(1, 6)):
            kind = UPPER if rng.random() < 0.7 else LOWER
            bounds.append(ControlBound(kind, rng.uniform(-2.5, 2.5), str(rng.choice(SOURCES))))
        qp = QpProblem(rng.uniform(-4, 4), tuple(bounds))
        sol = solve_qp(qp)
        ok = np.ones_like(grid, dtype=bool)
        for b in bounds:
            ok &= grid <= b.value if b.kind == UPPER else grid >= b.value
        if not sol.feasible:
            active_fail += int(ok.any())
            continue
        checked += 1
        if ok.any():
            best = grid[ok][np.argmin((grid[ok] - qp.u_ref) ** 2)]
            grid_worst = max(grid_worst, abs(sol.u - best))
        # active-set enumeration: the optimum is u_ref itself or a bound value made active
        cands = [qp.u_ref] + [b.value for b in bounds]
        feas = [c for c in cands if all(c <= b.value if b.kind == UPPER else c >= b.value for b in bounds)]
        opt = min(feas, key=lambda c: (c - qp.u_ref) ** 2)
        active_fail += int(sol.u != opt)
        if opt == qp.u_ref:
            interior_fail += int(sol.u != qp.u_ref)
    ok = grid_worst <= 1e-4 and active_fail == 0 and interior_fail == 0
    acceptance(
        4, "scalar QP matches grid and active-set oracles", ok,
        f"{checked} feasible of 10000, grid gap {grid_worst:.2g}, active-set mismatches {active_fail}, interior mismatches {interior_fail}",
    )


def test_5_certificate_identities(acceptance):
    rng = np.random.default_rng(5)
    worst, fd_worst = 0.0, 0.0
    eps = 1e-6
    for _ in range(1000):
        g = CbfGains(*rng.uniform(0.2, 3.0, 6))
        pi_, pj_ = random_params(rng), random_params(rng)
        xi = CavState(rng.uniform(0, 200), rng.uniform(1, 20))
        xk = CavState(xi.p + rng.uniform(0, 50), rng.uniform(0, 20))
        xj = CavState(rng.uniform(0, 200), rng.uniform(1, 20))
        p_in, p_jn = rng.uniform(90, 250, 2)
        uj, ujd = rng.uniform(-2, 2), rng.uniform(-0.5, 0.5)

        def acc(u):
            return u - drag(xi.v, pi_)

        up, lo = cbf_speed_bounds(xi, pi_, g)
        h1, h2 = speed_barriers(xi, g)
        u1 = cbf_rear_end_bound(xi, xk, pi_, g).value
        u2 = cbf_lateral_after_bound(xi, xj, p_in, p_jn, pi_, g).value
        view = NeighborView(1, "lateral", xj, uj, ujd, pj_, 0, p_in, p_jn, 5.0, 8.0)
        u3 = cbf_lateral_before_bound(xi, view, pi_, g).value
        residuals = [
            -acc(up.value) + g.lambda1 * h1,
            acc(lo.value) + g.lambda2 * h2,
            xk.v - xi.v - g.phi * acc(u1) + g.lambda3 * rear_end_barrier(xi, xk, g),
            -xi.v - xj.v - g.phi * acc(u2) + g.lambda4 * lateral_after_barrier(xi, xj, p_in, p_jn, g),
            psi2(xi, xj, u3, uj, ujd, pi_, pj_, g, p_in, p_jn),
        ]
        worst = max(worst, max(abs(r) for r in residuals))

        def advance(x, u, params):
            a = u - drag(x.v, params)
            return CavState(x.p + eps * x.v + 0.5 * eps * eps * a, x.v + eps * a)

        # flow under an applicable control; the forward difference is then accurate to ~eps
        ui = rng.uniform(-2.0, 2.0)
        _, psi1_0 = psi_chain(xi, xj, uj, pj_, g, p_in, p_jn)
        _, psi1_1 = psi_chain(advance(xi, ui, pi_), advance(xj, uj, pj_), uj + eps * ujd, pj_, g, p_in, p_jn)
        fd = (psi1_1 - psi1_0) / eps + g.lambda6 * psi1_0
        fd_worst = max(fd_worst, abs(fd - psi2(xi, xj, ui, uj, ujd, pi_, pj_, g, p_in, p_jn)))
    ok = worst <= 1e-9 and fd_worst <= 1e-4
    acceptance(
        5, "barrier bounds are equality cases and psi2 matches finite differences", ok,
        f"identity residual {worst:.2g}, finite-difference gap {fd_worst:.2g}",
    )


def test_6_noise_stress(acceptance):
    cfg = load_preset("noise-stress")
    dips, flagged, series = 0, 0, 0
    counted = True
    for seed in NOISE_SEEDS:
        log = run(replace(cfg, seed=seed))
        m = metrics(log)
        first_bad = {}
        for r in log.steps:
            if r.infeasible and r.cav not in first_bad:
                first_bad[r.cav] = r.t
        flagged += sum(r.infeasible for r in log.steps)
        counted &= m["qp_infeasible"] == sum(r.infeasible for r in log.steps)
        groups = defaultdict(list)
        for r in log.steps:
            for name in ("h1", "h2", "z1"):
                value = getattr(r, name)
                if not math.isnan(value):
                    groups[(r.cav, name)].append((r.t, value))
        for r in log.pairs:
            groups[(r.cav, "pair", r.other, r.conflict)].append((r.t, r.value))
            if r.case == "before":
                groups[(r.cav, "psi1", r.other, r.conflict)].append((r.t, r.psi1))
        for key, pts in groups.items():
            if pts[0][1] < 0:
                continue
            series += 1
            stop = first_bad.get(key[0], math.inf)
            if any(v < -1e-3 for t, v in pts if t < stop):
                dips += 1
    ok = dips == 0 and counted
    acceptance(
        6, "noisy sloppy tracking keeps barriers nonnegative while QPs are feasible", ok,
        f"{len(NOISE_SEEDS)} seeds, {series} barrier series, {dips} dips below -1e-3, {flagged} infeasible steps flagged and counted",
    )


def test_7_integration_order(acceptance):
    stiff = VehicleParams(mass=20.0, beta0=10.0, beta1=5.0, beta2=2.0)
    ref = integrate(CavState(0.0, 12.0), 1.0, 0.1, stiff, substeps=20000)[-1]
    errs = []
    for n in (4, 8):
        s = integrate(CavState(0.0, 12.0), 1.0, 0.1, stiff, substeps=n)[-1]
        errs.append(max(abs(s.p - ref.p), abs(s.v - ref.v)))
    ratio = errs[0] / errs[1]
    s = integrate(CavState(0.0, 12.0), 2.0, 0.1, PRESETS["paper-simple"], substeps=10)[-1]
    exact = max(abs(s.p - 1.21), abs(s.v - 12.2))
    ok = 14.0 <= ratio <= 18.0 and exact <= 1e-12
    acceptance(7, "RK4 converges at order four and is exact for kinematics", ok, f"halving ratio {ratio:.2f}, kinematic error {exact:.2g}")


def test_8_timing_table(sec5_runs, acceptance):
    problems = []
    for seed, (log, _) in sec5_runs.items():
        t = metrics(log)["timing"]
        for name in ("planning", "tracking", "barrier", "dynamics"):
            if not (t[name]["count"] > 0 and t[name]["mean"] > 0 and t[name]["std"] >= 0):
                problems.append(f"seed {seed} {name}")
        if not t["barrier"]["mean"] < t["planning"]["mean"]:
            problems.append(f"seed {seed} ordering")
    t = metrics(sec5_runs[0][0])["timing"]
    acceptance(
        8, "per-module timing present with barrier cheaper than planning", not problems,
        f"seed 0 planning {t['planning']['mean'] * 1e3:.2f} ms, barrier {t['barrier']['mean'] * 1e3:.3f} ms; problems {problems}",
    )


def test_9_determinism(sec5_runs, sec5_config, tmp_path, acceptance):
    first, _ = sec5_runs[0]
    tic = time.perf_counter()
    second = run(replace(sec5_config, seed=0))
    elapsed = time.perf_counter() - tic
    same = True
    for fmt in ("text", "records"):
        a, b = tmp_path / f"a-{fmt}", tmp_path / f"b-{fmt}"
        export(first, fmt, a)
        export(second, fmt, b)
        names = sorted(p.name for p in a.iterdir() if p.name != "timings.json")
        same &= names == sorted(p.name for p in b.iterdir() if p.name != "timings.json")
        same &= all((a / n).read_bytes() == (b / n).read_bytes() for n in names)
    acceptance(9, "same scenario and seed give byte-identical exports", same, f"seed 0 rerun in {elapsed:.1f} s, text and records compared")
