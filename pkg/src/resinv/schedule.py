"""Noise schedules and deterministic DDIM step arithmetic.

Timesteps are 1-based: ``alpha_bar(0) == 1`` is the clean-data boundary and
``alpha_bar(T)`` the noisiest level. Step functions accept numpy arrays or
:class:`~resinv.tensor.Tensor` values; coefficients are computed in double
precision. For numpy inputs the elementwise arithmetic also runs in double
precision and the result is cast back to the input dtype, so a float32
latent stays float32 but carries one rounding per step instead of several.
Tensors go through the tape ops in float32.
"""

from __future__ import annotations

import functools
import hashlib
import json
import math
from dataclasses import dataclass

import numpy as np

from .errors import ScheduleError, ShapeError

DEFAULT_T = 50


@dataclass(frozen=True, eq=False)
class NoiseSchedule:
    betas: np.ndarray  # float64, betas[t-1] is beta_t

    def __post_init__(self):
        b = np.asarray(self.betas, dtype=np.float64)
        if b.ndim != 1 or b.size < 1:
            raise ScheduleError("betas must be a non-empty 1-D sequence")
        if not np.all((b > 0) & (b < 1)):
            raise ScheduleError("every beta must lie strictly inside (0, 1)")
        b.flags.writeable = False
        object.__setattr__(self, "betas", b)
        alphas = 1.0 - b
        alphas.flags.writeable = False
        object.__setattr__(self, "alphas", alphas)
        bars = np.concatenate([[1.0], np.cumprod(alphas)])
        bars.flags.writeable = False
        object.__setattr__(self, "alpha_bars", bars)

    @property
    def T(self) -> int:
        return int(self.betas.size)

    def alpha(self, t: int) -> float:
        self._check(t, low=1)
        return float(self.alphas[t - 1])

    def alpha_bar(self, t: int) -> float:
        self._check(t, low=0)
        return float(self.alpha_bars[t])

    def _check(self, t: int, low: int) -> None:
        if not (low <= int(t) <= self.T):
            raise ScheduleError(f"timestep {t} outside [{low}, {self.T}]")

    def to_json(self) -> str:
        return json.dumps({"T": self.T, "betas": [float(x) for x in self.betas]})

    @classmethod
    def from_json(cls, text: str) -> "NoiseSchedule":
        doc = json.loads(text)
        betas = doc["betas"]
        if len(betas) != doc["T"]:
            raise ScheduleError(f"T={doc['T']} but {len(betas)} betas given")
        return cls(np.asarray(betas, dtype=np.float64))

    def hash(self) -> str:
        return hashlib.sha256(self.to_json().encode()).hexdigest()

    def __eq__(self, other):
        return isinstance(other, NoiseSchedule) and np.array_equal(self.betas, other.betas)

    __hash__ = None


def make_linear_schedule(T: int, beta_start: float, beta_end: float) -> NoiseSchedule:
    if T < 2:
        raise ScheduleError(f"T must be at least 2, got {T}")
    if not (0 < beta_start <= beta_end < 1):
        raise ScheduleError(
            f"need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}"
        )
    return NoiseSchedule(np.linspace(beta_start, beta_end, T, dtype=np.float64))


def default_schedule(T: int = DEFAULT_T) -> NoiseSchedule:
    """DDPM's linear 1e-4 -> 0.02 (1000 steps) rescaled to a ``T``-step chain.

    The unscaled range over 50 steps leaves alpha_bar(T) near 0.6, so sampling
    from a unit Gaussian would start far off the training distribution.
    """
    scale = 1000 / T
    return make_linear_schedule(T, 1e-4 * scale, min(0.02 * scale, 0.999))


def _same_shape(a, b, what: str) -> None:
    sa, sb = tuple(a.shape), tuple(b.shape)
    if sa != sb:
        raise ShapeError(f"{what}: shapes {sa} and {sb} differ")


def _wide(fn):
    """Run ``fn`` in float64 for ndarray arguments and cast back."""

    @functools.wraps(fn)
    def wrapper(schedule, a, b, t):
        if isinstance(a, np.ndarray) and isinstance(b, np.ndarray):
            dtype = np.result_type(a, b)
            out = fn(schedule, a.astype(np.float64), b.astype(np.float64), t)
            return np.asarray(out).astype(dtype, copy=False)
        return fn(schedule, a, b, t)

    return wrapper


@_wide
def q_sample(schedule: NoiseSchedule, x0, t: int, noise):
    """Forward noising ``sqrt(ab_t) x0 + sqrt(1 - ab_t) noise``."""
    _same_shape(x0, noise, "q_sample")
    ab = schedule.alpha_bar(t)
    if ab == 1.0:
        return x0.copy() if isinstance(x0, np.ndarray) else x0
    return math.sqrt(ab) * x0 + math.sqrt(1.0 - ab) * noise


def ddim_coefficients(schedule: NoiseSchedule, t: int) -> tuple[float, float]:
    """``(a, b)`` with ``z_{t-1} = a * z_t + b * eps`` for the eta=0 step."""
    if int(t) < 1:
        raise ScheduleError("DDIM steps need t >= 1")
    ab_t = schedule.alpha_bar(t)
    ab_p = schedule.alpha_bar(t - 1)
    a = math.sqrt(ab_p / ab_t)
    b = math.sqrt(1.0 - ab_p) - math.sqrt(ab_p) * math.sqrt(1.0 - ab_t) / math.sqrt(ab_t)
    return a, b


def predict_x0(schedule: NoiseSchedule, z_t, eps, t: int):
    ab = schedule.alpha_bar(t)
    return (z_t - math.sqrt(1.0 - ab) * eps) * (1.0 / math.sqrt(ab))


@_wide
def ddim_step(schedule: NoiseSchedule, z_t, eps, t: int):
    """Deterministic DDIM update from ``t`` to ``t - 1``."""
    _same_shape(z_t, eps, "ddim_step")
    if int(t) < 1:
        raise ScheduleError("ddim_step needs t >= 1")
    ab_p = schedule.alpha_bar(t - 1)
    x0 = predict_x0(schedule, z_t, eps, t)
    return math.sqrt(ab_p) * x0 + math.sqrt(1.0 - ab_p) * eps


@_wide
def ddim_inverse_step(schedule: NoiseSchedule, z_prev, eps, t: int):
    """Algebraic inverse of :func:`ddim_step`: maps ``z_{t-1}`` to ``z_t``."""
    _same_shape(z_prev, eps, "ddim_inverse_step")
    if int(t) < 1:
        raise ScheduleError("ddim_inverse_step needs t >= 1")
    ab_t = schedule.alpha_bar(t)
    ab_p = schedule.alpha_bar(t - 1)
    x0 = (z_prev - math.sqrt(1.0 - ab_p) * eps) * (1.0 / math.sqrt(ab_p))
    return math.sqrt(ab_t) * x0 + math.sqrt(1.0 - ab_t) * eps


@_wide
def implied_eps(schedule: NoiseSchedule, z_t, z_prev, t: int):
    """The eps for which ``ddim_step(z_t, eps, t)`` lands exactly on ``z_prev``."""
    _same_shape(z_t, z_prev, "implied_eps")
    a, b = ddim_coefficients(schedule, t)
    if abs(b) < 1e-12:
        raise ScheduleError(f"eps coefficient vanishes at t={t}; schedule is degenerate")
    return (z_prev - a * z_t) * (1.0 / b)


@_wide
def ddpm_mean_step(schedule: NoiseSchedule, z_t, eps, t: int):
    """Posterior-mean form ``(z_t - (1-a_t)/sqrt(1-ab_t) eps) / sqrt(a_t)``, no noise added."""
    _same_shape(z_t, eps, "ddpm_mean_step")
    if int(t) < 1:
        raise ScheduleError("ddpm_mean_step needs t >= 1")
    a_t = schedule.alpha(t)
    ab_t = schedule.alpha_bar(t)
    return (z_t - ((1.0 - a_t) / math.sqrt(1.0 - ab_t)) * eps) * (1.0 / math.sqrt(a_t))


def cfg_combine(eps_uncond, eps_cond, w: float):
    _same_shape(eps_uncond, eps_cond, "cfg_combine")
    return eps_uncond + w * (eps_cond - eps_uncond)
