"""Noise schedules, forward noising, prediction conversions, DDIM, CFG.

Everything here works on both numpy arrays and torch tensors: schedule
coefficients are plain floats (or broadcastable arrays for per-sample
timesteps), so the same functions serve training loops and samplers.

The schedule is defined in continuous time: a 1000-step reference curve is
built once per kind and log-interpolated to any T, so the endpoint noise
level (and every invariant) is independent of T. Serialization is just
``(kind, T)``; the table is recomputed bit-stably on load.
"""

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError

_REF_STEPS = 1000


def _reference_log_alpha_bar(kind: str) -> np.ndarray:
    if kind == "scaled_linear":
        betas = np.linspace(0.00085**0.5, 0.012**0.5, _REF_STEPS) ** 2
    elif kind == "linear":
        betas = np.linspace(1e-4, 0.02, _REF_STEPS)
    else:
        raise ConfigError(f"unknown schedule kind: {kind!r}")
    log_ab = np.concatenate([[0.0], np.cumsum(np.log1p(-betas))])
    return log_ab  # (1001,), log alpha_bar at integer reference steps


@dataclass(frozen=True)
class NoiseSchedule:
    kind: str
    T: int
    alpha_bar: np.ndarray  # (T + 1,), alpha_bar[0] = 1, strictly decreasing

    def validate(self):
        ab = self.alpha_bar
        if ab.shape != (self.T + 1,):
            raise ConfigError("alpha_bar length must be T + 1")
        if ab[0] != 1.0:
            raise ConfigError("alpha_bar[0] must be 1")
        if not np.all(np.diff(ab) < 0):
            raise ConfigError("alpha_bar must be strictly decreasing")
        if not (0.0 < ab[-1] <= 0.01):
            raise ConfigError(f"alpha_bar[T] = {ab[-1]:.4g} outside (0, 0.01]")
        if not np.all((ab > 0) & (ab <= 1)):
            raise ConfigError("alpha_bar values must lie in (0, 1]")


def make_schedule(kind: str = "scaled_linear", T: int = 1000) -> NoiseSchedule:
    if T < 1:
        raise ConfigError(f"T must be >= 1, got {T}")
    ref = _reference_log_alpha_bar(kind)
    s = np.arange(T + 1) * (_REF_STEPS / T)
    alpha_bar = np.exp(np.interp(s, np.arange(_REF_STEPS + 1), ref))
    alpha_bar[0] = 1.0
    schedule = NoiseSchedule(kind, T, alpha_bar)
    schedule.validate()
    return schedule


def _coeff(schedule: NoiseSchedule, t, x, clamp_floor=0.0):
    """alpha_bar at t, shaped to broadcast against x (numpy or torch)."""
    t_arr = np.asarray(t)
    if np.any(t_arr < 0) or np.any(t_arr > schedule.T):
        raise ConfigError(f"timestep {t} outside [0, {schedule.T}]")
    ab = schedule.alpha_bar[t_arr]
    if clamp_floor:
        ab = np.maximum(ab, clamp_floor)
    if np.ndim(ab) == 0:
        return float(ab)
    ab = ab.reshape((len(ab),) + (1,) * (x.ndim - 1))
    if hasattr(x, "device"):  # torch tensor
        import torch

        return torch.as_tensor(ab, dtype=x.dtype, device=x.device)
    return ab


def add_noise(x0, eps, t, schedule: NoiseSchedule):
    """Forward process: sqrt(ab_t) * x0 + sqrt(1 - ab_t) * eps."""
    if x0.shape != eps.shape:
        raise ConfigError(f"shape mismatch: x0 {x0.shape} vs eps {eps.shape}")
    ab = _coeff(schedule, t, x0)
    return ab**0.5 * x0 + (1 - ab) ** 0.5 * eps


def x0_from_eps(x_t, eps_hat, t, schedule: NoiseSchedule):
    """Invert the forward process given a noise prediction.

    alpha_bar is clamped at 1e-6 so the conversion stays finite at maximal
    noise levels.
    """
    ab = _coeff(schedule, t, x_t, clamp_floor=1e-6)
    return (x_t - (1 - ab) ** 0.5 * eps_hat) / ab**0.5


def eps_from_x0(x_t, x0_hat, t, schedule: NoiseSchedule):
    """Noise prediction implied by a clean-signal prediction."""
    ab = _coeff(schedule, t, x_t, clamp_floor=1e-6)
    denom = np.maximum(1.0 - np.asarray(ab), 1e-12) ** 0.5
    if hasattr(x_t, "device") and not np.isscalar(denom):
        import torch

        denom = torch.as_tensor(denom, dtype=x_t.dtype, device=x_t.device)
    elif np.isscalar(np.asarray(denom)) or np.ndim(denom) == 0:
        denom = float(denom)
    return (x_t - ab**0.5 * x0_hat) / denom


def ddim_step(x_t, x0_pred, t, t_prev, schedule: NoiseSchedule):
    """One deterministic (eta = 0) DDIM update from t to t_prev < t."""
    if not np.all(np.asarray(t_prev) < np.asarray(t)):
        raise ConfigError(f"ddim_step requires t_prev < t, got {t_prev} >= {t}")
    eps_hat = eps_from_x0(x_t, x0_pred, t, schedule)
    ab_prev = _coeff(schedule, t_prev, x_t)
    return ab_prev**0.5 * x0_pred + (1 - ab_prev) ** 0.5 * eps_hat


def cfg_combine(cond_pred, uncond_pred, omega: float):
    """Classifier-free guidance: uncond + omega * (cond - uncond)."""
    if cond_pred.shape != uncond_pred.shape:
        raise ConfigError("cfg_combine shape mismatch")
    return uncond_pred + omega * (cond_pred - uncond_pred)


def inference_timesteps(T: int, num_steps: int) -> list:
    """Strictly decreasing timesteps T = t_0 > t_1 > ... > t_K = 0.

    Uniform strides over [0, T]; the chain always ends at t = 0.
    """
    if not 1 <= num_steps <= T:
        raise ConfigError(f"num_steps must be in [1, {T}], got {num_steps}")
    ts = np.unique(np.round(np.linspace(0, T, num_steps + 1)).astype(int))
    return [int(t) for t in ts[::-1]]
