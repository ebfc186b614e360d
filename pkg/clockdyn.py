"""
Clock dynamics for simulated devices.

Drift follows a discretized Ornstein-Uhlenbeck process, offsets follow a
two-regime shock/jitter mixture and the epoch-overflow flag latches once the
reported time reaches 2**31 seconds. All step functions take explicit random
draws so callers control reproducibility.
"""

from dataclasses import dataclass
from typing import NamedTuple, Optional, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator

# 2**31 seconds: the first value a signed 32-bit Unix timestamp cannot hold
T0: int = 2_147_483_648
_WRAP_MODULUS = 2 * T0


class TimeConstants(BaseModel):
    """Epoch threshold and nominal sampling interval"""

    model_config = ConfigDict(frozen=True)

    T0: int = T0
    dt: float = Field(default=1.0, gt=0)

    @field_validator("T0")
    @classmethod
    def validate_t0(cls, v: int) -> int:
        if v != T0:
            raise ValueError(f"T0 is fixed at {T0}")
        return v


class ClockParams(BaseModel):
    """Stochastic dynamics of one device clock"""

    model_config = ConfigDict(frozen=True, allow_inf_nan=False)

    alpha: float = Field(default=0.99, gt=0, le=1, description="Drift mean-reversion coefficient")
    sigma: float = Field(default=0.001, ge=0, description="Drift diffusion scale (s / sqrt(s))")
    shock_prob: float = Field(default=0.001, ge=0, le=1)
    shock_scale: float = Field(default=0.01, ge=0, description="Std of offset shocks (s)")
    jitter_scale: float = Field(default=0.0005, ge=0, description="Std of per-step offset jitter (s)")


@dataclass
class ClockState:
    delta: float = 0.0
    eta: float = 0.0
    overflow: int = 0
    tau_prev: float = 0.0


def ou_drift_step(delta_prev: float, params: ClockParams, dt: float, noise: float) -> float:
    """delta_t = alpha * delta_{t-1} + sigma * sqrt(dt) * noise"""
    return params.alpha * delta_prev + params.sigma * np.sqrt(dt) * noise


def offset_step(eta_prev: float, params: ClockParams, uniform_draw: float, normal_draw: float) -> float:
    """Add a shock with probability shock_prob, otherwise small jitter"""
    if uniform_draw < params.shock_prob:
        xi = params.shock_scale * normal_draw
    else:
        xi = params.jitter_scale * normal_draw
    return eta_prev + xi


def overflow_indicator(tau_prev: float, t0: int = T0) -> int:
    return 1 if tau_prev >= t0 else 0


def compose_timestamp(t: float, state: ClockState, t0: int = T0) -> float:
    """Model-internal reported time: t + delta + eta + o * T0"""
    return t + state.delta + state.eta + state.overflow * t0


def distortion(tau: float, t: float) -> float:
    return tau - t


def incremental_distortion(psi_next: float, psi: float) -> float:
    return psi_next - psi


def wrap32(seconds: int) -> int:
    """Reduce an integer second count into the signed 32-bit range"""
    return ((int(seconds) + T0) % _WRAP_MODULUS) - T0


def device_rng(seed: int, device_id: int) -> np.random.Generator:
    """Independent generator for one device, stable across process layouts"""
    return np.random.default_rng(np.random.SeedSequence([seed, device_id]))


def _step_within(prev: float, new: float, cap: float) -> float:
    """Pull new toward prev one ulp at a time until |new - prev| <= cap"""
    while abs(new - prev) > cap:
        new = float(np.nextafter(new, prev))
    return new


class ClockStep(NamedTuple):
    t: float
    delta: float
    eta: float
    overflow: int
    tau: float


class ClockSimulator:
    """Stateful driver that advances one device clock step by step.

    Every step consumes exactly three draws (normal, uniform, normal) so the
    random stream stays aligned whatever scenario controls are applied.
    """

    def __init__(
        self,
        params: ClockParams,
        rng: np.random.Generator,
        start_time: float,
        constants: Optional[TimeConstants] = None,
    ):
        self.params = params
        self.rng = rng
        self.constants = constants or TimeConstants()
        self.state = ClockState(tau_prev=start_time - self.constants.dt)

    def step(
        self,
        t: float,
        sigma_scale: float = 1.0,
        offset_kick: float = 0.0,
        drift_ramp: float = 0.0,
        stealth: Optional[Tuple[float, float]] = None,
    ) -> ClockStep:
        """Advance to true time t.

        stealth=(eps_t, eps_d) caps the per-step drift increment at eps_d and
        the per-step distortion increment at eps_t.
        """
        dt = self.constants.dt
        noise = self.rng.standard_normal()
        uniform = self.rng.random()
        normal = self.rng.standard_normal()

        params = self.params
        if sigma_scale != 1.0:
            params = params.model_copy(update={"sigma": params.sigma * sigma_scale})

        state = self.state
        delta = ou_drift_step(state.delta, params, dt, noise) + drift_ramp
        eta = offset_step(state.eta, params, uniform, normal) + offset_kick

        if stealth is not None:
            eps_t, eps_d = stealth
            # rounding room for tau - t at the magnitude of the reported time
            slack = 4.0 * float(np.spacing(abs(t) + abs(state.tau_prev)))
            d_cap = min(eps_d, max(eps_t - slack, 0.0))
            d_delta = float(np.clip(delta - state.delta, -d_cap, d_cap))
            budget = max(eps_t - slack - abs(d_delta), 0.0)
            d_eta = float(np.clip(eta - state.eta, -budget, budget))
            delta = _step_within(state.delta, state.delta + d_delta, d_cap)
            eta = _step_within(state.eta, state.eta + d_eta, budget)

        overflow = max(state.overflow, overflow_indicator(state.tau_prev, self.constants.T0))
        state.delta, state.eta, state.overflow = float(delta), float(eta), overflow
        tau = compose_timestamp(t, state, self.constants.T0)
        state.tau_prev = tau
        return ClockStep(t=t, delta=state.delta, eta=state.eta, overflow=overflow, tau=tau)
