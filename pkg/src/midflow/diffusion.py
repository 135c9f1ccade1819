"""Noise schedule, forward diffusion, prediction conversions, training
losses, and the ancestral sampler with spaced step plans.

Timesteps are 1-indexed: ``t`` in [1, T], with t=0 denoting the clean
state (cumulative signal fraction 1).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .rng import Rng
from .tensor import Tensor


@dataclass(frozen=True)
class NoiseSchedule:
    """Per-step beta/alpha tables and the cumulative signal fraction."""

    steps: int
    beta: np.ndarray
    alpha: np.ndarray
    alpha_bar: np.ndarray

    def abar(self, t) -> np.ndarray:
        """Cumulative product at 1-indexed ``t`` (scalar or array); abar(0) = 1."""
        t = np.asarray(t, dtype=np.int64)
        if np.any(t < 0) or np.any(t > self.steps):
            raise ValueError(f"timestep {t} outside [0, {self.steps}]")
        padded = np.concatenate([[np.float32(1.0)], self.alpha_bar])
        return padded[t]


def make_linear_schedule(steps: int, beta_start: float = 1e-4,
                         beta_end: float = 0.02) -> NoiseSchedule:
    """Linearly spaced betas inclusive of both endpoints."""
    if steps < 1:
        raise ValueError(f"schedule needs at least 1 step, got {steps}")
    if not (0.0 < beta_start < beta_end < 1.0) and not (steps == 1 and 0.0 < beta_start < 1.0):
        raise ValueError(f"beta range ({beta_start}, {beta_end}) must satisfy 0 < start < end < 1")
    beta = np.linspace(beta_start, beta_end, steps, dtype=np.float64).astype(np.float32)
    alpha = (1.0 - beta).astype(np.float32)
    alpha_bar = np.cumprod(alpha, dtype=np.float64).astype(np.float32)
    return NoiseSchedule(steps, beta, alpha, alpha_bar)


def _per_sample(coeff: np.ndarray, like: Tensor) -> Tensor:
    """Broadcast per-sample scalars over the remaining axes."""
    arr = np.asarray(coeff, dtype=np.float32)
    if arr.ndim == 0:
        return Tensor(arr.reshape(1))
    return Tensor(arr.reshape((-1,) + (1,) * (like.ndim - 1)))


def q_sample(z0, t, eps, schedule: NoiseSchedule) -> Tensor:
    """Forward diffusion: sqrt(abar_t) * z0 + sqrt(1 - abar_t) * eps."""
    z0, eps = T.as_tensor(z0), T.as_tensor(eps)
    if z0.shape != eps.shape:
        raise T.ShapeError(f"q_sample: eps shape {eps.shape} != z0 shape {z0.shape}")
    t = np.asarray(t)
    if np.any(t < 1) or np.any(t > schedule.steps):
        raise ValueError(f"q_sample: t={t} outside [1, {schedule.steps}]")
    ab = schedule.abar(t)
    return z0 * _per_sample(np.sqrt(ab), z0) + eps * _per_sample(np.sqrt(1.0 - ab), z0)


_KINDS = ("eps", "x0", "v")


def convert_prediction(value, z_t, t, schedule: NoiseSchedule,
                       kind_in: str, kind_out: str) -> Tensor:
    """Convert between eps-, x0-, and v-parameterizations at timestep t.

    The algebra runs in float64 so the only information loss is the float32
    rounding of the stored result; at extreme timesteps (signal or noise
    fraction below ~1e-3) that rounding is what bounds round-trip accuracy.
    """
    if kind_in not in _KINDS or kind_out not in _KINDS:
        raise ValueError(f"prediction kinds must be in {_KINDS}, got {kind_in}->{kind_out}")
    value, z_t = T.as_tensor(value), T.as_tensor(z_t)
    if value.shape != z_t.shape:
        raise T.ShapeError(f"convert_prediction: value {value.shape} vs z_t {z_t.shape}")
    if kind_in == kind_out:
        return value
    ab = schedule.abar(np.asarray(t)).astype(np.float64)
    bshape = (-1,) + (1,) * (z_t.ndim - 1)
    sa = np.sqrt(ab).reshape(bshape) if ab.ndim else np.sqrt(ab)
    sb = np.sqrt(1.0 - ab).reshape(bshape) if ab.ndim else np.sqrt(1.0 - ab)
    val = value.data.astype(np.float64)
    z = z_t.data.astype(np.float64)
    if kind_in == "eps":
        x0 = (z - sb * val) / sa
    elif kind_in == "x0":
        x0 = val
    else:  # v
        x0 = sa * z - sb * val
    if kind_out == "x0":
        out = x0
    elif kind_out == "eps":
        out = (z - sa * x0) / sb
    else:  # v
        out = sa * (z - sa * x0) / sb - sb * x0
    return Tensor(out.astype(np.float32))


def loss_x0_l1(pred_x0, true_z0) -> Tensor:
    """Mean absolute error between the prediction and the clean state."""
    pred_x0, true_z0 = T.as_tensor(pred_x0), T.as_tensor(true_z0)
    if pred_x0.shape != true_z0.shape:
        raise T.ShapeError(f"loss_x0_l1: {pred_x0.shape} vs {true_z0.shape}")
    return T.absolute(pred_x0 - true_z0).mean()


def loss_snr_weighted_x0(pred_x0, true_z0, t, schedule: NoiseSchedule) -> Tensor:
    """(abar/(1-abar))-weighted MSE; equals the eps-space squared loss."""
    pred_x0, true_z0 = T.as_tensor(pred_x0), T.as_tensor(true_z0)
    if pred_x0.shape != true_z0.shape:
        raise T.ShapeError(f"loss_snr_weighted_x0: {pred_x0.shape} vs {true_z0.shape}")
    t = np.asarray(t)
    if np.any(t < 1) or np.any(t > schedule.steps):
        raise ValueError(f"loss_snr_weighted_x0: t={t} outside [1, {schedule.steps}]")
    ab = schedule.abar(t)
    weight = _per_sample(ab / (1.0 - ab), pred_x0)
    return (T.square(pred_x0 - true_z0) * weight).mean()


def ddpm_ancestral_step(z_t, pred_x0, t: int, t_prev: int,
                        schedule: NoiseSchedule, noise=None) -> Tensor:
    """One reverse-posterior step from t to t_prev (possibly a spaced jump).

    The prediction is clamped to [-1, 1] first. The jump uses the effective
    per-jump alpha ``abar_t / abar_prev`` and the small posterior variance;
    the final step to t_prev=0 is deterministic.
    """
    if not (t > t_prev >= 0):
        raise ValueError(f"ancestral step needs t > t_prev >= 0, got {t} -> {t_prev}")
    z_t = T.as_tensor(z_t)
    x0 = T.clamp(T.as_tensor(pred_x0), -1.0, 1.0)
    ab_t = float(schedule.abar(t))
    ab_prev = float(schedule.abar(t_prev))
    alpha_eff = ab_t / ab_prev
    beta_eff = 1.0 - alpha_eff
    coef_x0 = np.sqrt(ab_prev) * beta_eff / (1.0 - ab_t)
    coef_zt = np.sqrt(alpha_eff) * (1.0 - ab_prev) / (1.0 - ab_t)
    mean = x0 * float(coef_x0) + z_t * float(coef_zt)
    if t_prev == 0:
        return mean
    if noise is None:
        raise ValueError("ancestral step to t_prev > 0 requires a noise draw")
    var = beta_eff * (1.0 - ab_prev) / (1.0 - ab_t)
    return mean + T.as_tensor(noise) * float(np.sqrt(var))


@dataclass(frozen=True)
class StepPlan:
    """Strictly decreasing inference timesteps; the loop ends by jumping to 0."""

    timesteps: tuple[int, ...]

    def __post_init__(self):
        ts = self.timesteps
        if not ts or any(a <= b for a, b in zip(ts, ts[1:])):
            raise ValueError(f"step plan must be strictly decreasing, got {ts}")
        if ts[-1] < 1:
            raise ValueError(f"step plan must end at a timestep >= 1, got {ts}")

    @property
    def num_steps(self) -> int:
        return len(self.timesteps)

    def transitions(self):
        ts = self.timesteps
        return [(ts[i], ts[i + 1] if i + 1 < len(ts) else 0) for i in range(len(ts))]


def make_step_plan(num_steps: int, total_steps: int) -> StepPlan:
    """Evenly spaced, deduplicated timesteps over [1, total_steps]."""
    if not 1 <= num_steps <= total_steps:
        raise ValueError(f"step count {num_steps} outside [1, {total_steps}]")
    raw = np.round(np.linspace(total_steps, 1, num_steps)).astype(np.int64)
    ts: list[int] = []
    for t in raw:
        if not ts or t < ts[-1]:
            ts.append(int(t))
    if num_steps > 1:
        ts[-1] = 1
    return StepPlan(tuple(ts))


def ancestral_sample(predict_x0_fn, shape, plan: StepPlan,
                     schedule: NoiseSchedule, rng: Rng) -> Tensor:
    """Run the reverse chain from pure noise with a caller-supplied predictor.

    ``predict_x0_fn(z_t, t)`` returns the clean-state prediction at t.
    """
    z = Tensor(rng.normal(shape))
    for t, t_prev in plan.transitions():
        x0 = predict_x0_fn(z, t)
        noise = Tensor(rng.normal(shape)) if t_prev > 0 else None
        z = ddpm_ancestral_step(z, x0, t, t_prev, schedule, noise)
    return z
