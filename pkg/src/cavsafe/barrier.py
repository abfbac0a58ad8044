"""Control-barrier-function safety filter.

Every constraint on a vehicle becomes a half-line bound on its scalar control
input, and the filter returns the admissible control closest to the
reference. Barrier functions use linear class-K terms ``lambda_q * x``.

Barrier values (all must stay >= 0):

* ``h1 = v_max - v``, ``h2 = v - v_min``
* ``z1 = p_k - p_i - gamma - phi v_i`` against the same-path predecessor k
* ``z2 = s_i + s_j - gamma - phi v_i`` while i crosses after j
* ``z3 = s_i + s_j - gamma - phi v_j`` while i crosses before j, handled through
  the chain ``psi0 = z3``, ``psi1 = dz3/dt + lambda5 z3``, ``psi2 = dpsi1/dt + lambda6 psi1``
  because the own control first appears in the second derivative of z3.

with ``s_i = p_i^n - p_i`` the remaining distance to the shared conflict point.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

from .dynamics import CavState, VehicleParams, resistance_force

log = logging.getLogger(__name__)

UPPER = "upper"
LOWER = "lower"

SPEED_MAX = "speed-max"
SPEED_MIN = "speed-min"
REAR_END = "rear-end"
LATERAL_AFTER = "lateral-after"
LATERAL_BEFORE = "lateral-before"
ACTUATOR = "actuator"

AFTER = "after"
BEFORE = "before"


@dataclass(frozen=True)
class CbfGains:
    lambda1: float = 1.0
    lambda2: float = 1.0
    lambda3: float = 1.0
    lambda4: float = 1.0
    lambda5: float = 1.0
    lambda6: float = 1.0
    gamma: float = 2.5
    phi: float = 0.5
    v_min: float = 0.2
    v_max: float = 20.0

    def __post_init__(self):
        lams = (self.lambda1, self.lambda2, self.lambda3, self.lambda4, self.lambda5, self.lambda6)
        if min(lams) <= 0:
            raise ValueError("class-K slopes must be positive")


@dataclass(frozen=True)
class ControlBound:
    kind: str
    value: float
    source: str

    def __post_init__(self):
        if self.kind not in (UPPER, LOWER):
            raise ValueError(f"bad bound kind {self.kind!r}")


@dataclass(frozen=True)
class NeighborView:
    """What vehicle i may read about neighbour j from the coordinator."""

    cav_id: int
    role: str  # "predecessor" or "lateral"
    state: CavState
    u: float = 0.0
    u_dot: float = 0.0
    params: VehicleParams = field(default_factory=VehicleParams)
    conflict: Optional[int] = None
    p_in: float = math.nan
    p_jn: float = math.nan
    t_in: float = math.nan
    t_jn: float = math.nan


@dataclass(frozen=True)
class QpProblem:
    u_ref: float
    bounds: tuple[ControlBound, ...]

    def __post_init__(self):
        act = [b for b in self.bounds if b.source == ACTUATOR]
        if sorted(b.kind for b in act) != [LOWER, UPPER]:
            raise ValueError("QP needs exactly one actuator upper and one actuator lower bound")
        if not all(math.isfinite(b.value) for b in self.bounds):
            raise ValueError("bounds must be finite")


@dataclass(frozen=True)
class QpSolution:
    u: float
    active: tuple[str, ...]
    feasible: bool
    lower: float
    upper: float


def _drag(v: float, params: VehicleParams) -> float:
    return resistance_force(v, params) / params.mass


# --- barrier values ----------------------------------------------------------


def speed_barriers(x: CavState, gains: CbfGains) -> tuple[float, float]:
    return gains.v_max - x.v, x.v - gains.v_min


def rear_end_barrier(x_i: CavState, x_k: CavState, gains: CbfGains) -> float:
    return x_k.p - x_i.p - gains.gamma - gains.phi * x_i.v


def lateral_after_barrier(x_i: CavState, x_j: CavState, p_in: float, p_jn: float, gains: CbfGains) -> float:
    return (p_in - x_i.p) + (p_jn - x_j.p) - gains.gamma - gains.phi * x_i.v


def lateral_before_barrier(x_i: CavState, x_j: CavState, p_in: float, p_jn: float, gains: CbfGains) -> float:
    return (p_in - x_i.p) + (p_jn - x_j.p) - gains.gamma - gains.phi * x_j.v


# --- bounds ------------------------------------------------------------------


def cbf_speed_bounds(x_i: CavState, params: VehicleParams, gains: CbfGains) -> tuple[ControlBound, ControlBound]:
    drag = _drag(x_i.v, params)
    h1, h2 = speed_barriers(x_i, gains)
    return (
        ControlBound(UPPER, drag + gains.lambda1 * h1, SPEED_MAX),
        ControlBound(LOWER, drag - gains.lambda2 * h2, SPEED_MIN),
    )


def cbf_rear_end_bound(x_i: CavState, x_k: CavState, params_i: VehicleParams, gains: CbfGains) -> ControlBound:
    z1 = rear_end_barrier(x_i, x_k, gains)
    value = (gains.lambda3 * z1 + x_k.v - x_i.v) / gains.phi + _drag(x_i.v, params_i)
    return ControlBound(UPPER, value, REAR_END)


def cbf_lateral_after_bound(
    x_i: CavState, x_j: CavState, p_in: float, p_jn: float, params_i: VehicleParams, gains: CbfGains
) -> ControlBound:
    z2 = lateral_after_barrier(x_i, x_j, p_in, p_jn, gains)
    value = (gains.lambda4 * z2 - (x_i.v + x_j.v)) / gains.phi + _drag(x_i.v, params_i)
    return ControlBound(UPPER, value, LATERAL_AFTER)


def psi_chain(
    x_i: CavState, x_j: CavState, u_j: float, params_j: VehicleParams, gains: CbfGains, p_in: float, p_jn: float
) -> tuple[float, float]:
    z3 = lateral_before_barrier(x_i, x_j, p_in, p_jn, gains)
    dz3 = -x_i.v - x_j.v + gains.phi * _drag(x_j.v, params_j) - gains.phi * u_j
    return z3, dz3 + gains.lambda5 * z3


def psi2(
    x_i: CavState,
    x_j: CavState,
    u_i: float,
    u_j: float,
    u_dot_j: float,
    params_i: VehicleParams,
    params_j: VehicleParams,
    gains: CbfGains,
    p_in: float,
    p_jn: float,
) -> float:
    """d(psi1)/dt + lambda6 psi1 along the closed-loop flow, assembled term by term."""
    lam5, lam6, phi = gains.lambda5, gains.lambda6, gains.phi
    acc_i = u_i - _drag(x_i.v, params_i)
    acc_j = u_j - _drag(x_j.v, params_j)
    drag_slope_j = (params_j.beta1 + 2.0 * params_j.beta2 * x_j.v) / params_j.mass
    _, psi1 = psi_chain(x_i, x_j, u_j, params_j, gains, p_in, p_jn)
    # psi1 = -v_i - v_j + phi F_j/m_j - phi u_j + lam5 z3, differentiated piece by piece
    d_psi1 = (
        -acc_i
        - acc_j
        + phi * drag_slope_j * acc_j
        - phi * u_dot_j
        + lam5 * (-x_i.v - x_j.v - phi * acc_j)
    )
    return d_psi1 + lam6 * psi1


def cbf_lateral_before_bound(
    x_i: CavState, view: NeighborView, params_i: VehicleParams, gains: CbfGains
) -> ControlBound:
    """Largest u_i with psi2 >= 0 (psi2 is affine in u_i with slope -1)."""
    x_j, u_j, params_j = view.state, view.u, view.params
    lam5, phi = gains.lambda5, gains.phi
    drag_i = _drag(x_i.v, params_i)
    drag_j = _drag(x_j.v, params_j)
    coeff_j = phi * (params_j.beta1 + 2.0 * params_j.beta2 * x_j.v) / params_j.mass - lam5 * phi - 1.0
    _, psi1 = psi_chain(x_i, x_j, u_j, params_j, gains, view.p_in, view.p_jn)
    value = (
        drag_i
        - lam5 * (x_i.v + x_j.v)
        + coeff_j * (u_j - drag_j)
        - phi * view.u_dot
        + gains.lambda6 * psi1
    )
    return ControlBound(UPPER, value, LATERAL_BEFORE)


def select_lateral_case(t_in: float, t_jn: float) -> str:
    if t_in > t_jn:
        return AFTER
    if t_in < t_jn:
        return BEFORE
    log.warning("simultaneous planned crossing (t=%.6f); treating as crossing after", t_in)
    return AFTER


def lateral_bound(x_i: CavState, view: NeighborView, params_i: VehicleParams, gains: CbfGains) -> ControlBound:
    if select_lateral_case(view.t_in, view.t_jn) == AFTER:
        return cbf_lateral_after_bound(x_i, view.state, view.p_in, view.p_jn, params_i, gains)
    return cbf_lateral_before_bound(x_i, view, params_i, gains)


def assemble_qp(
    u_ref: float,
    x_i: CavState,
    params_i: VehicleParams,
    neighbor_views: Sequence[NeighborView],
    gains: CbfGains,
) -> QpProblem:
    bounds = [
        ControlBound(UPPER, params_i.u_max, ACTUATOR),
        ControlBound(LOWER, params_i.u_min, ACTUATOR),
        *cbf_speed_bounds(x_i, params_i, gains),
    ]
    for view in neighbor_views:
        if view.role == "predecessor":
            bounds.append(cbf_rear_end_bound(x_i, view.state, params_i, gains))
        else:
            bounds.append(lateral_bound(x_i, view, params_i, gains))
    return QpProblem(float(u_ref), tuple(bounds))


def solve_qp(problem: QpProblem) -> QpSolution:
    """Closest admissible control to the reference.

    For a scalar decision variable the minimiser of (u - u_ref)^2 over an
    intersection of half-lines is the reference clipped to that interval.
    When the interval is empty the most restrictive upper bound is applied,
    floored at the actuator minimum, and the result is flagged infeasible.
    """
    lo = max(b.value for b in problem.bounds if b.kind == LOWER)
    hi = min(b.value for b in problem.bounds if b.kind == UPPER)
    u_min = next(b.value for b in problem.bounds if b.kind == LOWER and b.source == ACTUATOR)
    if lo > hi:
        u = max(u_min, hi)
        active = tuple(sorted({b.source for b in problem.bounds if b.kind == UPPER and b.value == hi}))
        return QpSolution(u, active, False, lo, hi)
    if problem.u_ref > hi:
        u = hi
        active = tuple(sorted({b.source for b in problem.bounds if b.kind == UPPER and b.value == hi}))
    elif problem.u_ref < lo:
        u = lo
        active = tuple(sorted({b.source for b in problem.bounds if b.kind == LOWER and b.value == lo}))
    else:
        u = problem.u_ref
        active = ()
    return QpSolution(u, active, True, lo, hi)
