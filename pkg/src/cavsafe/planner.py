"""Minimum exit-time planning over unconstrained cubic trajectories.

Each vehicle entering the zone picks the earliest exit time whose cubic
trajectory (zero terminal acceleration, fixed entry speed and zone length)
keeps every speed, control, rear-end and lateral constraint inactive with
respect to the plans already stored by the coordinator.

Everything that scans over candidate exit times works on stacked arrays so a
whole block of candidates is checked at once; the scalar functions in the
public API call the same kernels with a block of one.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import polynomial as poly
from .errors import (
    DegenerateHorizonError,
    InfeasibleWindowError,
    PlannerInfeasibleError,
    PositionOutOfRangeError,
)

log = logging.getLogger(__name__)

HORIZON_FLOOR = 1e-6
BOUND_TOL = 1e-9


@dataclass(frozen=True)
class PlanningLimits:
    v_min: float = 0.2
    v_max: float = 20.0
    u_min: float = -2.0
    u_max: float = 2.0
    gamma: float = 2.5
    phi: float = 0.5

    def __post_init__(self):
        if not 0 < self.v_min < self.v_max:
            raise ValueError("need 0 < v_min < v_max")
        if not self.u_min <= 0 <= self.u_max:
            raise ValueError("need u_min <= 0 <= u_max")
        if not (self.gamma > 0 and self.phi > 0):
            raise ValueError("gamma and phi must be positive")


@dataclass(frozen=True)
class CubicPlan:
    """p(t) = a t^3 + b t^2 + c t + d on [t0, tf], t in absolute seconds.

    Evaluation goes through ``local``, the same cubic in s = t - t0, because
    expanding around a large entry time cancels digits. The solver passes the
    local coefficients it solved for; otherwise they are shifted from a..d.
    """

    a: float
    b: float
    c: float
    d: float
    t0: float
    tf: float
    local: Optional[tuple] = field(default=None, compare=False, repr=False)

    def __post_init__(self):
        if self.local is None:
            a, b, c, d, t0 = self.a, self.b, self.c, self.d, self.t0
            shifted = (a, 3.0 * a * t0 + b, (3.0 * a * t0 + 2.0 * b) * t0 + c, ((a * t0 + b) * t0 + c) * t0 + d)
            object.__setattr__(self, "local", tuple(float(x) for x in shifted))

    @property
    def coef(self) -> np.ndarray:
        return np.array([self.a, self.b, self.c, self.d])

    def in_horizon(self, t: float) -> bool:
        return self.t0 <= t <= self.tf

    def exit_state(self) -> tuple[float, float]:
        p, v, _ = eval_plan(self, self.tf)
        return p, v


@dataclass(frozen=True)
class ExitWindow:
    tf_min: float
    tf_max: float


# --- single-plan operations ------------------------------------------------


def _solve_local(T: np.ndarray, v0: float, pf: float) -> np.ndarray:
    """Stacked 4x4 boundary solves in time measured from entry.

    Unknowns are the local coefficients [A, B, C, D] of
    A s^3 + B s^2 + C s + D with s = t - t0.
    """
    T = np.asarray(T, dtype=float)
    M = np.zeros(T.shape + (4, 4))
    M[..., 0, 3] = 1.0  # p(0) = 0
    M[..., 1, 2] = 1.0  # v(0) = v0
    M[..., 2, :] = np.stack([T**3, T**2, T, np.ones_like(T)], axis=-1)  # p(T) = pf
    M[..., 3, 0] = 6.0 * T  # u(T) = 0
    M[..., 3, 1] = 2.0
    rhs = np.zeros(T.shape + (4, 1))
    rhs[..., 1, 0] = v0
    rhs[..., 2, 0] = pf
    return np.linalg.solve(M, rhs)[..., 0]


def _to_absolute(local: np.ndarray, t0: float) -> np.ndarray:
    A, B, C, D = (local[..., k] for k in range(4))
    return np.stack(
        [
            A,
            B - 3.0 * A * t0,
            C - 2.0 * B * t0 + 3.0 * A * t0**2,
            D - C * t0 + B * t0**2 - A * t0**3,
        ],
        axis=-1,
    )


def _boundary_coefs(t0: float, tfs: np.ndarray, v0: float, pf: float) -> np.ndarray:
    return _to_absolute(_solve_local(np.asarray(tfs, dtype=float) - t0, v0, pf), t0)


def solve_boundary_cubic(t0: float, tf: float, v0: float, pf: float) -> CubicPlan:
    """Cubic through p(t0)=0, v(t0)=v0, p(tf)=pf with u(tf)=0."""
    if not tf - t0 > HORIZON_FLOOR:
        raise DegenerateHorizonError(f"horizon tf - t0 = {tf - t0} below {HORIZON_FLOOR}")
    local = _solve_local(np.array([tf - t0]), v0, pf)[0]
    a, b, c, d = _to_absolute(local, t0)
    return CubicPlan(float(a), float(b), float(c), float(d), float(t0), float(tf), tuple(float(x) for x in local))


def eval_plan(plan: CubicPlan, t):
    """Position, speed and control of the plan at ``t`` (extrapolates outside [t0, tf])."""
    A, B, C, D = plan.local
    s = t - plan.t0
    p = ((A * s + B) * s + C) * s + D
    v = (3.0 * A * s + 2.0 * B) * s + C
    u = 6.0 * A * s + 2.0 * B
    return p, v, u


def boundary_residuals(plan: CubicPlan, v0: float, pf: float) -> tuple[float, float, float, float]:
    p0, vv0, _ = eval_plan(plan, plan.t0)
    pT, _, uT = eval_plan(plan, plan.tf)
    return p0, vv0 - v0, pT - pf, uT


def _bounds_ok(coef: np.ndarray, t0, tf, limits: PlanningLimits, tol: float = BOUND_TOL) -> np.ndarray:
    a, b, c = coef[..., 0], coef[..., 1], coef[..., 2]
    t0 = np.asarray(t0, dtype=float)
    tf = np.asarray(tf, dtype=float)
    ok = np.ones(np.broadcast_shapes(a.shape, t0.shape, tf.shape), dtype=bool)
    for t in (t0, tf):
        u = 6.0 * a * t + 2.0 * b
        v = (3.0 * a * t + 2.0 * b) * t + c
        ok &= (u >= limits.u_min - tol) & (u <= limits.u_max + tol)
        ok &= (v >= limits.v_min - tol) & (v <= limits.v_max + tol)
    with np.errstate(divide="ignore", invalid="ignore"):
        tv = np.where(a != 0.0, -b / (3.0 * a), np.nan)
    inside = np.isfinite(tv) & (tv > t0) & (tv < tf)
    tv = np.where(inside, tv, t0)
    vv = (3.0 * a * tv + 2.0 * b) * tv + c
    ok &= ~inside | ((vv >= limits.v_min - tol) & (vv <= limits.v_max + tol))
    return ok


def check_state_control_bounds(plan: CubicPlan, limits: PlanningLimits, tol: float = BOUND_TOL) -> bool:
    """True iff speed and control stay within limits over the whole horizon.

    Control is affine in t, so its extremes are at the endpoints; speed is
    quadratic, so its interior vertex is checked as well.
    """
    return bool(_bounds_ok(plan.coef, plan.t0, plan.tf, limits, tol))


def time_at_position(plan: CubicPlan, p_target: float) -> float:
    p_end = eval_plan(plan, plan.tf)[0]
    if not -1e-9 <= p_target <= p_end + 1e-9:
        raise PositionOutOfRangeError(f"position {p_target} outside [0, {p_end}]")
    return float(poly.invert_increasing(plan.coef, p_target, plan.t0, plan.tf))


def feasible_exit_window(t0: float, v0: float, pf: float, limits: PlanningLimits) -> ExitWindow:
    """Range of exit times whose boundary cubic respects speed and control limits.

    The constant-speed exit time pf/v0 is always feasible when v0 is within
    limits; each edge is located by bisection from there towards an analytic
    bracket (pf/v_max below, the time at which the exit speed reaches v_min
    above).
    """

    def feasible(tf: float) -> bool:
        if tf - t0 <= HORIZON_FLOOR:
            return False
        coef = _boundary_coefs(t0, np.array([tf]), v0, pf)
        return bool(_bounds_ok(coef, t0, tf, limits)[0])

    inner = t0 + pf / v0
    if not feasible(inner):
        raise InfeasibleWindowError(f"no feasible exit time for v0={v0}, pf={pf}")

    def edge(good: float, bad: float) -> float:
        for _ in range(200):
            if abs(good - bad) <= 1e-10 * max(1.0, abs(good)):
                break
            mid = 0.5 * (good + bad)
            if feasible(mid):
                good = mid
            else:
                bad = mid
        return good

    lo = t0 + pf / limits.v_max
    tf_min = lo if feasible(lo) else edge(inner, lo)

    hi = t0 + 3.0 * pf / (2.0 * limits.v_min + v0)
    hi = hi + 1e-6 * (hi - t0) + 1e-6
    while feasible(hi):
        hi = t0 + 2.0 * (hi - t0)
    tf_max = edge(inner, hi)
    return ExitWindow(tf_min, tf_max)


# --- pairwise margins --------------------------------------------------------


def _vel(c):
    return poly.derivative(c)


def _acc(c):
    return poly.derivative(poly.derivative(c))


def _jerk(c):
    return poly.derivative(poly.derivative(poly.derivative(c)))


def _const(x) -> np.ndarray:
    out = np.zeros(np.shape(x) + (4,))
    out[..., 3] = x
    return out


def _segments(plan: CubicPlan):
    """The plan on [.., tf] and its constant-speed continuation past tf."""
    p_f, v_f, _ = eval_plan(plan, plan.tf)
    cont = np.array([0.0, 0.0, v_f, p_f - v_f * plan.tf])
    return [(plan.coef, -math.inf, plan.tf), (cont, plan.tf, math.inf)]


def _seg_min(build, lo, hi, other: CubicPlan) -> np.ndarray:
    best = None
    for coef, s_lo, s_hi in _segments(other):
        m = poly.interval_min(build(coef), np.maximum(lo, s_lo), np.minimum(hi, s_hi))
        best = m if best is None else np.minimum(best, m)
    return best


def _rear_exprs(ci, ck, limits, lam=None):
    gap = ck - ci - limits.phi * _vel(ci) - _const(limits.gamma)
    if lam is None:
        return gap
    return _vel(ck) - _vel(ci) - limits.phi * _acc(ci) + lam * gap


def _rear_margin(ci, lo, hi, plan_k, limits, lam=None):
    return _seg_min(lambda ck: _rear_exprs(ci, ck, limits, lam), lo, hi, plan_k)


def min_rear_end_margin(plan_i: CubicPlan, plan_k: CubicPlan, interval, limits: PlanningLimits) -> float:
    """Minimum over ``interval`` of p_k - p_i - gamma - phi v_i.

    The predecessor continues at its exit speed past its own exit time.
    An empty interval gives +inf.
    """
    lo, hi = interval
    return float(_rear_margin(plan_i.coef, lo, hi, plan_k, limits))


def _z_after(ci, cj, pin, pjn, limits):
    return _const(pin + pjn - limits.gamma) - ci - cj - limits.phi * _vel(ci)


def _z_before(ci, cj, pin, pjn, limits):
    return _const(pin + pjn - limits.gamma) - ci - cj - limits.phi * _vel(cj)


def _after_compat(ci, cj, pin, pjn, limits, lam4):
    return -_vel(ci) - _vel(cj) - limits.phi * _acc(ci) + lam4 * _z_after(ci, cj, pin, pjn, limits)


def _psi1_poly(ci, cj, pin, pjn, limits, lam5):
    return -_vel(ci) - _vel(cj) - limits.phi * _acc(cj) + lam5 * _z_before(ci, cj, pin, pjn, limits)


def _psi2_poly(ci, cj, pin, pjn, limits, lam5, lam6):
    dz = -_vel(ci) - _vel(cj) - limits.phi * _acc(cj)
    ddz = -_acc(ci) - _acc(cj) - limits.phi * _jerk(cj)
    return ddz + lam5 * dz + lam6 * _psi1_poly(ci, cj, pin, pjn, limits, lam5)


def _lateral_cases(ci, t_i0, tf_i, t_in, plan_j, t_jn, pin, pjn, limits):
    case1 = _seg_min(
        lambda cj: _z_after(ci, cj, pin, pjn, limits), t_i0, np.minimum(t_jn, tf_i), plan_j
    )
    case2 = _seg_min(lambda cj: _z_before(ci, cj, pin, pjn, limits), t_i0, t_in, plan_j)
    return case1, case2


def lateral_margin(plan_i: CubicPlan, plan_j: CubicPlan, p_in: float, p_jn: float, limits: PlanningLimits) -> float:
    """Best of the two crossing orders at a shared conflict point.

    Case one (i crosses after j) is the minimum of s_i + s_j - delta_i up to
    j's crossing time; case two (i crosses first) is the minimum of
    s_i + s_j - delta_j up to i's crossing time. Empty intervals count as
    +inf, so a vehicle j that crossed before i entered imposes nothing.
    """
    t_jn = time_at_position(plan_j, p_jn)
    if t_jn < plan_i.t0:
        return math.inf
    t_in = time_at_position(plan_i, p_in)
    c1, c2 = _lateral_cases(plan_i.coef, plan_i.t0, plan_i.tf, t_in, plan_j, t_jn, p_in, p_jn, limits)
    return float(max(c1, c2))


# --- exit-time search ----------------------------------------------------------


@dataclass(frozen=True)
class _Lateral:
    cav: int
    conflict: int
    p_in: float
    p_jn: float
    t_jn: float
    plan: CubicPlan


@dataclass
class _Constraints:
    predecessor: Optional[tuple[int, CubicPlan]]
    lateral: list[_Lateral]


def _collect(path, snapshot, intersection, t0) -> _Constraints:
    pred = None
    lateral = []
    for cav, path_j, plan_j in snapshot:
        if path_j == path.id:
            pred = (cav, plan_j)
            continue
        for n, p_in, p_jn in intersection.shared_conflicts(path.id, path_j):
            t_jn = time_at_position(plan_j, p_jn)
            if t_jn < t0:
                continue  # crossed before we entered: both cases vacuous
            lateral.append(_Lateral(cav, n, p_in, p_jn, t_jn, plan_j))
    return _Constraints(pred, lateral)


def _constraint_terms(t0, limits, cons: _Constraints, gains=None):
    """One callable per constraint mapping ``(ci, tfs)`` to ``(ok, margin)``."""
    terms = []
    if cons.predecessor is not None:
        _, plan_k = cons.predecessor

        def rear(ci, tfs):
            m = _rear_margin(ci, t0, tfs, plan_k, limits)
            ok = m >= 0.0
            if gains is not None:
                ok &= _rear_margin(ci, t0, tfs, plan_k, limits, gains.lambda3) >= 0.0
            return ok, m

        terms.append(rear)
    for lat in cons.lateral:
        terms.append(lambda ci, tfs, lat=lat: _lateral_term(ci, tfs, t0, limits, lat, gains))
    return terms


def _lateral_term(ci, tfs, t0, limits, lat: _Lateral, gains=None):
    t_in = poly.invert_increasing(ci, lat.p_in, t0, tfs)
    c1, c2 = _lateral_cases(ci, t0, tfs, t_in, lat.plan, lat.t_jn, lat.p_in, lat.p_jn, limits)
    if gains is None:
        m = np.maximum(c1, c2)
        return m >= 0.0, m
    after = t_in >= lat.t_jn
    hi1 = np.minimum(lat.t_jn, tfs)
    comp1 = _seg_min(lambda cj: _after_compat(ci, cj, lat.p_in, lat.p_jn, limits, gains.lambda4), t0, hi1, lat.plan)
    psi1 = _seg_min(lambda cj: _psi1_poly(ci, cj, lat.p_in, lat.p_jn, limits, gains.lambda5), t0, t_in, lat.plan)
    psi2 = _seg_min(
        lambda cj: _psi2_poly(ci, cj, lat.p_in, lat.p_jn, limits, gains.lambda5, gains.lambda6),
        t0,
        t_in,
        lat.plan,
    )
    m = np.where(after, c1, c2)
    return np.where(after, comp1 >= 0.0, (psi1 >= 0.0) & (psi2 >= 0.0)) & (m >= 0.0), m


def _evaluate(tfs, t0, v0, pf, limits, cons: _Constraints, gains=None):
    """Feasibility mask and worst raw safety margin for candidate exit times."""
    tfs = np.asarray(tfs, dtype=float)
    ci = _boundary_coefs(t0, tfs, v0, pf)
    ok = _bounds_ok(ci, t0, tfs, limits)
    margin = np.full(tfs.shape, np.inf)
    for term in _constraint_terms(t0, limits, cons, gains):
        term_ok, m = term(ci, tfs)
        ok &= term_ok
        margin = np.minimum(margin, m)
    return ok, margin


def _feasible(tfs, t0, v0, pf, limits, cons: _Constraints, gains=None) -> np.ndarray:
    """Same mask as ``_evaluate`` but drops each candidate at its first failed constraint."""
    tfs = np.asarray(tfs, dtype=float)
    ci = _boundary_coefs(t0, tfs, v0, pf)
    live = np.nonzero(_bounds_ok(ci, t0, tfs, limits))[0]
    for term in _constraint_terms(t0, limits, cons, gains):
        if not live.size:
            break
        term_ok, _ = term(ci[live], tfs[live])
        live = live[term_ok]
    out = np.zeros(tfs.shape, dtype=bool)
    out[live] = True
    return out


@dataclass(frozen=True)
class PlanResult:
    tf: float
    plan: CubicPlan
    window: ExitWindow
    margin: float
    depends_on: tuple[int, ...]


def plan_exit_time(
    cav_id: int,
    t0: float,
    v0: float,
    path,
    snapshot: Sequence[tuple[int, int, CubicPlan]],
    limits: PlanningLimits,
    intersection,
    gains=None,
    step: float = 1e-3,
    refine: float = 1e-6,
    block: int = 4096,
    report_best: bool = True,
) -> PlanResult:
    """Earliest exit time whose cubic keeps all constraints inactive.

    Candidates are scanned upward from the window's lower edge at ``step``;
    the first feasible one is refined against its infeasible neighbour on a
    sub-grid of spacing ``refine``. With ``gains`` (an object exposing
    ``lambda3..lambda6``) the planned pair trajectories must also satisfy the
    barrier-function decay conditions, so an exactly tracked plan never makes
    the safety filter intervene on a rear-end or lateral constraint.

    Raises PlannerInfeasibleError when nothing in the window is feasible. It
    carries the grid candidate with the largest worst-case margin unless
    ``report_best`` is False, which skips that extra pass.
    """
    pf = path.length
    window = feasible_exit_window(t0, v0, pf, limits)
    cons = _collect(path, snapshot, intersection, t0)
    depends = tuple(c for c, _, _ in snapshot)

    n = int(math.floor((window.tf_max - window.tf_min) / step)) + 1
    good = bad = None
    start, size = 0, min(256, block)
    while start < n:
        tfs = window.tf_min + step * np.arange(start, min(start + size, n))
        ok = _feasible(tfs, t0, v0, pf, limits, cons, gains)
        if ok.any():
            first = int(np.argmax(ok))
            good = float(tfs[first])
            bad = good - step if start + first > 0 else None
            break
        start += size
        size = min(2 * size, block)
    if good is None and not report_best:
        raise PlannerInfeasibleError(
            f"CAV {cav_id}: no exit time in [{window.tf_min:.3f}, {window.tf_max:.3f}] is safe"
        )
    if good is None:
        best_tf, best_margin = window.tf_min, -math.inf
        for start in range(0, n, block):
            tfs = window.tf_min + step * np.arange(start, min(start + block, n))
            _, margin = _evaluate(tfs, t0, v0, pf, limits, cons, gains)
            k = int(np.argmax(margin))
            if margin[k] > best_margin:
                best_tf, best_margin = float(tfs[k]), float(margin[k])
        plan = solve_boundary_cubic(t0, best_tf, v0, pf)
        raise PlannerInfeasibleError(
            f"CAV {cav_id}: no exit time in [{window.tf_min:.3f}, {window.tf_max:.3f}] is safe",
            best=PlanResult(best_tf, plan, window, best_margin, depends),
            margin=best_margin,
        )

    if bad is not None:
        # a dense sub-grid between the last infeasible and first feasible
        # candidates: its first feasible point is what bisection converges to
        # when the transition is unique, and stays correct when it is not
        sub = np.linspace(bad, good, int(math.ceil((good - bad) / refine)) + 1)[1:]
        ok = _feasible(sub, t0, v0, pf, limits, cons, gains)
        good = float(sub[int(np.argmax(ok))])
    _, margin = _evaluate(np.array([good]), t0, v0, pf, limits, cons, gains)
    plan = solve_boundary_cubic(t0, good, v0, pf)
    return PlanResult(good, plan, window, float(margin[0]), depends)
