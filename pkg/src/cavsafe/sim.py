"""Closed-loop simulation: arrivals, planning, tracking, safety filter, dynamics.

One control period of ``dt`` seconds runs, in order:

1. admission -- vehicles whose arrival time has come enter in arrival order and
   plan against the coordinator's stored plans;
2. control -- for every vehicle in queue order, reference control, safety
   filter, zero-order hold;
3. integration -- all vehicles advance with ``substeps`` RK4 steps, and every
   substep state is kept for the audit;
4. retirement -- vehicles past the zone exit leave the queue.

Everything except the wall-clock timings is a pure function of the config.
"""

from __future__ import annotations

import logging
import math
import time
from collections import defaultdict, deque
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import barrier as bc
from .barrier import CbfGains, NeighborView
from .dynamics import CavState, VehicleParams, integrate
from .errors import PlannerInfeasibleError
from .geometry import Coordinator, Intersection, Path
from .planner import CubicPlan, PlanningLimits, plan_exit_time, time_at_position
from .tracking import TrackingGains, planned_feedforward, reference_control

log = logging.getLogger(__name__)

BARRIER_SLACK = 1e-6
CONTROL_TOL = 1e-9
INTERVENTION_TOL = 1e-9
MODULES = ("planning", "tracking", "barrier", "dynamics")


@dataclass(frozen=True)
class ArrivalSpec:
    rate: float = 3600.0  # veh/h, all paths together
    count: int = 24
    mode: str = "exponential"  # or "uniform" (fixed headway)
    split: Optional[tuple[float, ...]] = None  # per-path weights, uniform when None
    v0_range: tuple[float, float] = (12.0, 14.0)


@dataclass(frozen=True)
class ScenarioConfig:
    paths: tuple[Path, ...]
    seed: int = 0
    dt: float = 0.1
    duration: float = 300.0
    substeps: int = 10
    arrivals: ArrivalSpec = ArrivalSpec()
    limits: PlanningLimits = PlanningLimits()
    tracking: TrackingGains = TrackingGains()
    cbf: CbfGains = CbfGains()
    vehicle: VehicleParams = VehicleParams()
    vehicle_preset: str = "midsize"
    barrier_aware_planning: bool = False
    max_entry_delay: float = 30.0
    entry_retry: float = 0.5  # seconds between admission attempts of a refused arrival
    noise_sigma: float = 0.0
    hold_feedforward: bool = True
    name: str = "custom"

    def __post_init__(self):
        if not self.dt > 0:
            raise ValueError("dt must be positive")
        if self.entry_retry < 0 or self.max_entry_delay < 0:
            raise ValueError("entry_retry and max_entry_delay must be non-negative")
        if self.arrivals.rate < 0:
            raise ValueError("arrival rate must be non-negative")
        lo, hi = self.arrivals.v0_range
        if not self.limits.v_min <= lo <= hi <= self.limits.v_max:
            raise ValueError("v0_range must lie within [v_min, v_max]")


@dataclass(frozen=True)
class Arrival:
    index: int
    t: float
    path: int
    v0: float


@dataclass
class StepRecord:
    t: float
    cav: int
    path: int
    p: float
    v: float
    u_plan: float
    u_ref: float
    u_star: float
    active: str
    h1: float
    h2: float
    z1: float
    infeasible: bool


@dataclass
class PairRecord:
    t: float
    cav: int
    other: int
    conflict: int
    case: str
    value: float
    psi1: float


@dataclass
class CavRecord:
    cav: int
    path: int
    arrival: float
    t0: float
    v0: float
    tf: float
    a: float
    b: float
    c: float
    d: float
    exit_time: float
    planner: str
    margin: float
    entry_delay: float
    depends_on: str


@dataclass
class Violation:
    kind: str
    cav: int
    other: int
    t: float
    value: float


@dataclass
class SimLog:
    steps: list[StepRecord] = field(default_factory=list)
    pairs: list[PairRecord] = field(default_factory=list)
    cavs: list[CavRecord] = field(default_factory=list)
    violations: list[Violation] = field(default_factory=list)
    timings: dict[str, list[float]] = field(default_factory=lambda: {m: [] for m in MODULES})

    def plan_of(self, cav: int) -> CubicPlan:
        r = next(c for c in self.cavs if c.cav == cav)
        return CubicPlan(r.a, r.b, r.c, r.d, r.t0, r.tf)


def spawn_arrivals(config: ScenarioConfig) -> list[Arrival]:
    """Seeded arrival schedule: headways, path choice and entry speeds."""
    spec = config.arrivals
    if spec.rate <= 0 or spec.count <= 0:
        return []
    rng = np.random.default_rng(config.seed)
    mean = 3600.0 / spec.rate
    if spec.mode == "exponential":
        gaps = rng.exponential(mean, spec.count)
        gaps[0] = 0.0
    elif spec.mode == "uniform":
        gaps = np.full(spec.count, mean)
        gaps[0] = 0.0
    else:
        raise ValueError(f"unknown arrival mode {spec.mode!r}")
    times = np.cumsum(gaps)
    ids = [p.id for p in config.paths]
    w = np.ones(len(ids)) if spec.split is None else np.asarray(spec.split, dtype=float)
    choice = rng.choice(len(ids), size=spec.count, p=w / w.sum())
    v0 = rng.uniform(spec.v0_range[0], spec.v0_range[1], spec.count)
    return [Arrival(k, float(times[k]), ids[choice[k]], float(v0[k])) for k in range(spec.count)]


@dataclass
class _Pair:
    other: int
    conflict: int
    p_in: float
    p_jn: float
    t_in: float
    t_jn: float
    case: str


@dataclass
class _Cav:
    cav: int
    path: Path
    plan: CubicPlan
    record: CavRecord
    pairs: list[_Pair]
    entry_index: int  # dense sample index of entry
    p: list[float] = field(default_factory=list)
    v: list[float] = field(default_factory=list)
    exit_index: Optional[int] = None


class _Runner:
    def __init__(self, config: ScenarioConfig):
        self.cfg = config
        self.intersection = Intersection(config.paths)
        lim = config.limits
        self.coord = Coordinator(self.intersection, lim.v_min, lim.v_max)
        self.gains = config.cbf
        self.params = config.vehicle
        self.log = SimLog()
        self.cars: dict[int, _Cav] = {}
        self.state: dict[int, CavState] = {}
        self.last_u: dict[int, float] = {}
        self.noise = np.random.default_rng([config.seed, 1])
        self.next_try: dict[int, int] = {}  # arrival index -> earliest step of next attempt

    # -- admission ------------------------------------------------------

    def _snapshot(self):
        return [(c, self.coord.path_of(c), self.coord.plan_of(c)) for c in self.coord.queue]

    def _entry_pairs(self, path: Path, plan: CubicPlan) -> list[_Pair]:
        pairs = []
        for j in self.coord.queue:
            pj = self.cars[j].path
            for n, p_in, p_jn in self.intersection.shared_conflicts(path.id, pj.id):
                if self.state[j].p >= p_jn:
                    continue
                t_in = time_at_position(plan, p_in)
                t_jn = time_at_position(self.cars[j].plan, p_jn)
                case = bc.select_lateral_case(t_in, t_jn)
                pairs.append(_Pair(j, n, p_in, p_jn, t_in, t_jn, case))
        return pairs

    def _entry_safe(self, path: Path, x: CavState, pairs: list[_Pair]) -> bool:
        g = self.gains
        pred = next((c for c in reversed(self.coord.queue) if self.cars[c].path.id == path.id), None)
        if pred is not None and bc.rear_end_barrier(x, self.state[pred], g) < 0:
            return False
        for pr in pairs:
            xj = self.state[pr.other]
            if pr.case == bc.AFTER:
                if bc.lateral_after_barrier(x, xj, pr.p_in, pr.p_jn, g) < 0:
                    return False
            else:
                psi0, psi1 = bc.psi_chain(
                    x, xj, self.last_u.get(pr.other, 0.0), self.params, g, pr.p_in, pr.p_jn
                )
                if psi0 < 0 or psi1 < 0:
                    return False
        return True

    def _try_admit(self, arr: Arrival, k: int, force: bool) -> bool:
        cfg = self.cfg
        t = k * cfg.dt
        path = self.intersection.path(arr.path)
        snapshot = self._snapshot()
        tic = time.perf_counter()
        status = "ok"
        try:
            res = plan_exit_time(
                -1,
                t,
                arr.v0,
                path,
                snapshot,
                cfg.limits,
                self.intersection,
                gains=self.gains if cfg.barrier_aware_planning else None,
                report_best=force,
            )
        except PlannerInfeasibleError as err:
            if not force:
                self.log.timings["planning"].append(time.perf_counter() - tic)
                return False
            res = err.best
            status = "infeasible"
        self.log.timings["planning"].append(time.perf_counter() - tic)
        x0 = CavState(0.0, arr.v0)
        pairs = self._entry_pairs(path, res.plan)
        if status == "ok" and not self._entry_safe(path, x0, pairs):
            if not force:
                return False
            status = "unsafe-entry"
        if status != "ok":
            log.warning("arrival %d admitted with planner status %s", arr.index, status)

        cav = self.coord.register_cav(path.id, t, arr.v0)
        self.coord.set_plan(cav, res.plan)
        p = res.plan
        rec = CavRecord(
            cav, path.id, arr.t, t, arr.v0, p.tf, p.a, p.b, p.c, p.d, math.nan, status,
            res.margin, t - arr.t, " ".join(str(c) for c in res.depends_on),
        )
        car = _Cav(cav, path, p, rec, pairs, k * cfg.substeps, [0.0], [arr.v0])
        self.cars[cav] = car
        self.state[cav] = x0
        self.log.cavs.append(rec)
        return True

    def _admit(self, k: int, waiting: dict[int, deque]) -> None:
        t = k * self.cfg.dt
        heads = [q[0] for q in waiting.values() if q and q[0].t <= t + 1e-9]
        for arr in sorted(heads, key=lambda a: (a.t, a.index)):
            force = t - arr.t >= self.cfg.max_entry_delay
            if not force and k < self.next_try.get(arr.index, 0):
                continue
            if self._try_admit(arr, k, force):
                waiting[arr.path].popleft()
            else:
                retry = max(1, int(round(self.cfg.entry_retry / self.cfg.dt)))
                self.next_try[arr.index] = k + retry

    # -- control --------------------------------------------------------

    def _views(self, car: _Cav, x: CavState, u_now: dict[int, float]) -> tuple[list[NeighborView], list]:
        views = []
        pred = self.coord.preceding_cav(car.cav)
        if pred is not None:
            views.append(NeighborView(pred, "predecessor", self.state[pred], params=self.params))
        active = []
        for pr in car.pairs:
            if pr.other not in self.coord.queue:
                continue
            xj = self.state[pr.other]
            if pr.case == bc.AFTER and xj.p >= pr.p_jn:
                continue
            if pr.case == bc.BEFORE and x.p >= pr.p_in:
                continue
            plan_j = self.cars[pr.other].plan
            views.append(
                NeighborView(
                    pr.other, "lateral", xj, u_now[pr.other], 6.0 * plan_j.a, self.params,
                    pr.conflict, pr.p_in, pr.p_jn, pr.t_in, pr.t_jn,
                )
            )
            active.append(pr)
        return views, active

    def _control(self, k: int) -> dict[int, float]:
        cfg, g = self.cfg, self.gains
        t = k * cfg.dt
        hold = cfg.dt if cfg.hold_feedforward else 0.0
        u_now: dict[int, float] = {}
        for cav in self.coord.queue:
            car = self.cars[cav]
            x = self.state[cav]
            tic = time.perf_counter()
            u_plan = planned_feedforward(car.plan, t, hold)
            u_ref = reference_control(car.plan, x, t, cfg.tracking, hold)
            if cfg.noise_sigma > 0:
                u_ref += float(self.noise.normal(0.0, cfg.noise_sigma))
            tac = time.perf_counter()
            views, active = self._views(car, x, u_now)
            qp = bc.assemble_qp(u_ref, x, self.params, views, g)
            sol = bc.solve_qp(qp)
            toc = time.perf_counter()
            self.log.timings["tracking"].append(tac - tic)
            self.log.timings["barrier"].append(toc - tac)
            u_now[cav] = sol.u

            h1, h2 = bc.speed_barriers(x, g)
            pred = next((v for v in views if v.role == "predecessor"), None)
            z1 = bc.rear_end_barrier(x, pred.state, g) if pred else math.nan
            self.log.steps.append(
                StepRecord(
                    t, cav, car.path.id, x.p, x.v, u_plan, u_ref, sol.u, "|".join(sol.active),
                    h1, h2, z1, not sol.feasible,
                )
            )
            for pr in active:
                xj = self.state[pr.other]
                if pr.case == bc.AFTER:
                    val = bc.lateral_after_barrier(x, xj, pr.p_in, pr.p_jn, g)
                    psi1 = math.nan
                else:
                    val, psi1 = bc.psi_chain(x, xj, u_now[pr.other], self.params, g, pr.p_in, pr.p_jn)
                self.log.pairs.append(PairRecord(t, cav, pr.other, pr.conflict, pr.case, val, psi1))
        return u_now

    def _integrate(self, k: int, u_now: dict[int, float]) -> None:
        cfg = self.cfg
        for cav in list(self.coord.queue):
            car = self.cars[cav]
            tic = time.perf_counter()
            traj = integrate(self.state[cav], u_now[cav], cfg.dt, self.params, cfg.substeps)
            self.log.timings["dynamics"].append(time.perf_counter() - tic)
            for s in traj:
                car.p.append(s.p)
                car.v.append(s.v)
            self.state[cav] = traj[-1]
            self.last_u[cav] = u_now[cav]
            if traj[-1].p >= car.path.length:
                first = next(i for i, s in enumerate(traj) if s.p >= car.path.length)
                car.exit_index = k * cfg.substeps + first + 1
                car.record.exit_time = car.exit_index * cfg.dt / cfg.substeps
                self.coord.mark_exited(cav)
        self.coord.check_invariants()

    def run(self) -> SimLog:
        cfg = self.cfg
        waiting: dict[int, deque] = defaultdict(deque)
        arrivals = spawn_arrivals(cfg)
        for arr in arrivals:
            waiting[arr.path].append(arr)
        n_steps = int(round(cfg.duration / cfg.dt))
        for k in range(n_steps + 1):
            self._admit(k, waiting)
            if not self.coord.queue:
                if not any(waiting.values()):
                    break
                continue
            u_now = self._control(k)
            self._integrate(k, u_now)
        self.log.violations = audit(self, cfg)
        return self.log


def run(config: ScenarioConfig) -> SimLog:
    return _Runner(config).run()


# --- audit -----------------------------------------------------------------


def _dense(car: _Cav):
    return np.asarray(car.p), np.asarray(car.v)


def _window(car: _Cav, start: int, stop: int):
    """Slice of car's dense samples covering global indices [start, stop)."""
    lo = start - car.entry_index
    hi = stop - car.entry_index
    p, v = _dense(car)
    lo = max(lo, 0)
    hi = min(hi, len(p))
    return p[lo:hi], v[lo:hi]


def _in_zone_end(car: _Cav) -> int:
    """One past the last global sample index at which the car is inside the zone."""
    p = np.asarray(car.p)
    inside = np.nonzero(p < car.path.length)[0]
    return car.entry_index + (int(inside[-1]) + 1 if inside.size else 0)


def audit(runner: _Runner, cfg: ScenarioConfig) -> list[Violation]:
    """Check speed, control, rear-end and lateral constraints on realized motion.

    Speed and pairwise constraints are evaluated on every integration
    substep; control on every applied input. Lateral safety is satisfied when
    either crossing order's condition held over its realized interval.
    """
    lim, g = cfg.limits, runner.gains
    h = cfg.dt / cfg.substeps
    out: list[Violation] = []

    for rec in runner.log.steps:
        if rec.u_star < lim.u_min - CONTROL_TOL or rec.u_star > lim.u_max + CONTROL_TOL:
            out.append(Violation("control", rec.cav, 0, rec.t, rec.u_star))

    cars = sorted(runner.cars.values(), key=lambda c: c.cav)
    for car in cars:
        p, v = _dense(car)
        end = _in_zone_end(car) - car.entry_index
        worst = np.minimum(lim.v_max - v[:end], v[:end] - lim.v_min)
        if worst.size and worst.min() < -BARRIER_SLACK:
            k = int(np.argmin(worst))
            out.append(Violation("speed", car.cav, 0, (car.entry_index + k) * h, float(worst[k])))

    by_path: dict[int, list[_Cav]] = defaultdict(list)
    for car in cars:
        by_path[car.path.id].append(car)
    for group in by_path.values():
        for lead, car in zip(group, group[1:]):
            start = car.entry_index
            stop = min(_in_zone_end(lead), _in_zone_end(car))
            if stop <= start:
                continue
            pk, _ = _window(lead, start, stop)
            pi, vi = _window(car, start, stop)
            z1 = pk - pi - g.gamma - g.phi * vi
            if z1.min() < -BARRIER_SLACK:
                k = int(np.argmin(z1))
                out.append(Violation("rear-end", car.cav, lead.cav, (start + k) * h, float(z1[k])))

    for car in cars:
        for other in cars:
            if other.cav >= car.cav:
                break
            for n, p_in, p_jn in runner.intersection.shared_conflicts(car.path.id, other.path.id):
                val, t = _lateral_audit(car, other, p_in, p_jn, g, h)
                if val < -BARRIER_SLACK:
                    out.append(Violation("lateral", car.cav, other.cav, t, val))
    return out


def _lateral_audit(car: _Cav, other: _Cav, p_in: float, p_jn: float, g: CbfGains, h: float):
    start = car.entry_index
    pi_all, vi_all = _dense(car)
    pj_all, vj_all = _dense(other)
    off = start - other.entry_index
    pj_all, vj_all = pj_all[off:], vj_all[off:]

    def crossing(p, target):
        idx = np.nonzero(p >= target)[0]
        return int(idx[0]) if idx.size else len(p)

    cj = crossing(pj_all, p_jn)
    ci = crossing(pi_all, p_in)
    # case 1: i behind, over [t_i0, t_j^n)
    m = min(cj, len(pi_all))
    if cj == 0:
        case1, t1 = math.inf, math.nan
    elif cj > len(pi_all):
        case1, t1 = -math.inf, math.nan
    else:
        z2 = (p_in - pi_all[:m]) + (p_jn - pj_all[:m]) - g.gamma - g.phi * vi_all[:m]
        k = int(np.argmin(z2))
        case1, t1 = float(z2[k]), (start + k) * h
    # case 2: i ahead, over [t_i0, t_i^n)
    if ci > len(pj_all):
        case2, t2 = -math.inf, math.nan
    else:
        z3 = (p_in - pi_all[:ci]) + (p_jn - pj_all[:ci]) - g.gamma - g.phi * vj_all[:ci]
        k = int(np.argmin(z3))
        case2, t2 = float(z3[k]), (start + k) * h
    return (case1, t1) if case1 >= case2 else (case2, t2)


# --- metrics ---------------------------------------------------------------


def metrics(log: SimLog) -> dict:
    timing = {}
    for m in MODULES:
        xs = np.asarray(log.timings.get(m, []), dtype=float)
        timing[m] = {
            "count": int(xs.size),
            "mean": float(xs.mean()) if xs.size else 0.0,
            "std": float(xs.std()) if xs.size else 0.0,
        }
    travel = {
        c.cav: c.exit_time - c.t0 for c in log.cavs if math.isfinite(c.exit_time)
    }
    kinds = ("control", "speed", "rear-end", "lateral")
    violations = {k: sum(1 for v in log.violations if v.kind == k) for k in kinds}
    dips = sum(
        1
        for r in log.steps
        if min(r.h1, r.h2, r.z1 if math.isfinite(r.z1) else math.inf) < -BARRIER_SLACK
    ) + sum(
        1
        for r in log.pairs
        if min(r.value, r.psi1 if math.isfinite(r.psi1) else math.inf) < -BARRIER_SLACK
    )
    return {
        "timing": timing,
        "cavs": {
            "registered": len(log.cavs),
            "exited": len(travel),
            "planner_flagged": sum(1 for c in log.cavs if c.planner != "ok"),
            "mean_entry_delay": float(np.mean([c.entry_delay for c in log.cavs])) if log.cavs else 0.0,
        },
        "travel_time": {
            "mean": float(np.mean(list(travel.values()))) if travel else 0.0,
            "per_cav": {str(k): v for k, v in travel.items()},
        },
        "violations": violations,
        "violations_total": sum(violations.values()),
        "barrier_dips": dips,
        "qp_interventions": sum(1 for r in log.steps if abs(r.u_star - r.u_ref) > INTERVENTION_TOL),
        "qp_infeasible": sum(1 for r in log.steps if r.infeasible),
    }
