"""Longitudinal vehicle model with quadratic speed-dependent resistance."""

from __future__ import annotations

from dataclasses import dataclass


@dataclass(frozen=True)
class VehicleParams:
    mass: float = 1200.0  # kg
    beta0: float = 10.0  # N
    beta1: float = 1.0  # N s/m
    beta2: float = 0.4  # N s^2/m^2
    u_min: float = -2.0
    u_max: float = 2.0

    def __post_init__(self):
        if not self.mass > 0:
            raise ValueError("mass must be positive")
        if min(self.beta0, self.beta1, self.beta2) < 0:
            raise ValueError("resistance coefficients must be non-negative")

    def resistance_slope_bound(self, v_max: float) -> float:
        """Upper bound on |d(F_r/m)/dv| over [0, v_max] (Lipschitz constant of the drift)."""
        return (self.beta1 + 2.0 * self.beta2 * v_max) / self.mass


PRESETS = {
    "midsize": VehicleParams(),
    "paper-simple": VehicleParams(beta0=0.0, beta1=0.0, beta2=0.0),
}


@dataclass(frozen=True)
class CavState:
    p: float
    v: float


def resistance_force(v: float, params: VehicleParams) -> float:
    return params.beta0 + params.beta1 * v + params.beta2 * v * v


def state_derivative(state: CavState, u: float, params: VehicleParams) -> tuple[float, float]:
    return state.v, u - resistance_force(state.v, params) / params.mass


def step(state: CavState, u: float, dt: float, params: VehicleParams) -> CavState:
    """One classical RK4 step with ``u`` held constant."""
    p, v = state.p, state.v
    m = params.mass
    b0, b1, b2 = params.beta0, params.beta1, params.beta2

    def acc(vv):
        return u - (b0 + b1 * vv + b2 * vv * vv) / m

    k1p, k1v = v, acc(v)
    v2 = v + 0.5 * dt * k1v
    k2p, k2v = v2, acc(v2)
    v3 = v + 0.5 * dt * k2v
    k3p, k3v = v3, acc(v3)
    v4 = v + dt * k3v
    k4p, k4v = v4, acc(v4)
    return CavState(
        p + dt / 6.0 * (k1p + 2.0 * k2p + 2.0 * k3p + k4p),
        v + dt / 6.0 * (k1v + 2.0 * k2v + 2.0 * k3v + k4v),
    )


def integrate(state: CavState, u: float, dt: float, params: VehicleParams, substeps: int = 10) -> list[CavState]:
    """Advance over one control period; returns the state after every substep."""
    h = dt / substeps
    out = []
    for _ in range(substeps):
        state = step(state, u, h, params)
        out.append(state)
    return out
