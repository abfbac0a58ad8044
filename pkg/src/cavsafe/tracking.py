"""Feedforward-feedback tracking of a planned cubic."""

from __future__ import annotations

from dataclasses import dataclass

from .planner import CubicPlan, eval_plan


@dataclass(frozen=True)
class TrackingGains:
    kp: float = 1.5  # 1/s^2
    kv: float = 1.5  # 1/s

    def __post_init__(self):
        if not (self.kp > 0 and self.kv > 0):
            raise ValueError("tracking gains must be positive")


def reference_control(plan: CubicPlan, state, t: float, gains: TrackingGains, hold: float = 0.0) -> float:
    """u_ref = u_plan + kp (p_plan - p) + kv (v_plan - v).

    The feedback acts on speed error (not a second position term). Beyond the
    plan's exit time the plan is frozen at tf, where the planned control is
    zero. ``hold`` > 0 replaces the sampled feedforward with its average over
    the coming zero-order-hold interval ``[t, t + hold]``.
    """
    u_ff = planned_feedforward(plan, t, hold)
    tc = min(t, plan.tf)
    p_bar, v_bar, _ = eval_plan(plan, tc)
    return u_ff + gains.kp * (p_bar - state.p) + gains.kv * (v_bar - state.v)


def planned_feedforward(plan: CubicPlan, t: float, hold: float = 0.0) -> float:
    if hold <= 0.0:
        return eval_plan(plan, min(t, plan.tf))[2]
    lo = min(t, plan.tf)
    hi = min(t + hold, plan.tf)
    # u is affine in t and zero past tf, so its hold-average is exact in closed form
    v_lo = eval_plan(plan, lo)[1]
    v_hi = eval_plan(plan, hi)[1]
    return (v_hi - v_lo) / hold
