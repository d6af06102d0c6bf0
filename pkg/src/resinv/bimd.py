"""Bidirectionally manipulated sampling over a pivot trajectory.

Three flows act on one sampling run of the personalized model:

* the pivot: DDIM sampling from the anchor's ``Z_T*`` in customization-free
  space (NULL identity);
* the backward flow: recorded residuals, scaled by ``lambda_bkwd``, that pull
  the run back onto the anchors;
* the forward flow: the identity-conditioned prediction, scaled by
  ``lambda_fwd``.

For the first ``mss`` steps (counted from t=T) all three are combined; the
remaining steps use the identity-conditioned prediction alone.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np

from .denoiser import Conditioning, DenoiserParams, predict_eps
from .errors import ConfigError, NonFiniteError, ScheduleError
from .glyphs import RenderedImage
from .inversion import DdimTrajectory, ResidualTrack, ddim_invert, res_invert
from .schedule import ddim_step, ddpm_mean_step
from .tensor import DTYPE

SIGN_MODES = ("guidance", "verbatim")
STEP_FORMS = ("ddim", "ddpm-mean")


@dataclass(frozen=True)
class BimdConfig:
    """``sign_mode='verbatim'`` subtracts the customized prediction exactly as
    the printed update does; ``'guidance'`` adds ``lambda_fwd * (eps_cus - eps_free)``.
    ``step_form='ddpm-mean'`` uses the posterior-mean coefficient instead of DDIM.
    """

    mss: int = 25
    lambda_bkwd: float = 1.0
    lambda_fwd: float = 1.0
    sign_mode: str = "guidance"
    step_form: str = "ddim"

    def __post_init__(self):
        if self.mss < 0:
            raise ConfigError("must be >= 0", field="mss")
        if self.sign_mode not in SIGN_MODES:
            raise ConfigError(f"must be one of {SIGN_MODES}", field="sign_mode")
        if self.step_form not in STEP_FORMS:
            raise ConfigError(f"must be one of {STEP_FORMS}", field="step_form")
        for name in ("lambda_bkwd", "lambda_fwd"):
            if not np.isfinite(getattr(self, name)):
                raise ConfigError("must be finite", field=name)

    def replace(self, **kw) -> "BimdConfig":
        return BimdConfig(**{**asdict(self), **kw})

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class FlowBundle:
    pivot: DdimTrajectory
    residuals: ResidualTrack
    identity_cond: Conditioning
    free_cond: Conditioning

    def __post_init__(self):
        if self.pivot.schedule != self.residuals.schedule:
            raise ScheduleError("pivot and residuals were recorded under different schedules")
        if self.free_cond.identity is not None:
            raise ValueError("free conditioning must use the NULL identity")
        if self.residuals.cond != self.free_cond:
            raise ValueError("residuals were recorded under a different free conditioning")
        if self.identity_cond.scene_code != self.free_cond.scene_code:
            raise ValueError("identity and free conditioning use different scene codes")

    @property
    def schedule(self):
        return self.pivot.schedule


def build_bundle(model: DenoiserParams, image, identity_cond: Conditioning,
                 free_cond: Conditioning | None = None, schedule=None) -> FlowBundle:
    """Invert ``image`` in customization-free space and record its residuals."""
    free_cond = free_cond or identity_cond.free()
    pivot = ddim_invert(model, image, free_cond, schedule)
    track = res_invert(model, pivot, free_cond)
    return FlowBundle(pivot, track, identity_cond, free_cond)


def bimd_sample(model: DenoiserParams, bundle: FlowBundle, config: BimdConfig) -> RenderedImage:
    schedule = bundle.schedule
    T = schedule.T
    if config.mss > T:
        raise ConfigError(f"mss {config.mss} exceeds T={T}", field="mss")
    step = ddim_step if config.step_form == "ddim" else ddpm_mean_step
    z = np.asarray(bundle.pivot.start, dtype=DTYPE)
    for k, t in enumerate(range(T, 0, -1), start=1):
        if k <= config.mss:
            eps_free = predict_eps(model, z, t, bundle.free_cond, schedule)
            eps = eps_free + config.lambda_bkwd * bundle.residuals.at(t)
            if config.lambda_fwd != 0.0:
                eps_cus = predict_eps(model, z, t, bundle.identity_cond, schedule)
                if config.sign_mode == "verbatim":
                    eps = eps - config.lambda_fwd * eps_cus
                else:
                    eps = eps + config.lambda_fwd * (eps_cus - eps_free)
        else:
            eps = predict_eps(model, z, t, bundle.identity_cond, schedule)
        z = step(schedule, z, eps, t).astype(DTYPE)
        if not np.isfinite(z).all():
            raise NonFiniteError(f"non-finite latent in bimd_sample at t={t}")
    return RenderedImage(z, "enhanced")


def flow_ablation(model: DenoiserParams, bundle: FlowBundle, which: str,
                  config: BimdConfig) -> RenderedImage:
    """Run :func:`bimd_sample` with the forward, backward, or both flows zeroed.

    The steps after ``mss`` are pure customization, which belongs to the
    forward flow, so ablating it also stretches the window to the full chain.
    """
    T = bundle.schedule.T
    if which == "fwd":
        cfg = config.replace(lambda_fwd=0.0, mss=T)
    elif which == "bkwd":
        cfg = config.replace(lambda_bkwd=0.0)
    elif which == "both":
        cfg = config.replace(lambda_fwd=0.0, lambda_bkwd=0.0, mss=T)
    else:
        raise ValueError(f"which must be 'fwd', 'bkwd' or 'both', got {which!r}")
    return bimd_sample(model, bundle, cfg)


def identity_fusion(model: DenoiserParams, image_a, identity_b: Conditioning,
                    mss_sweep: Sequence[int], config: BimdConfig,
                    bundle: FlowBundle | None = None) -> list[RenderedImage]:
    """Blend image A (backward flow) with identity B (forward flow) over an MSS sweep.

    Small ``mss`` leaves generation to identity B; large ``mss`` keeps A's
    reconstruction in charge for longer.
    """
    if config.lambda_fwd != config.lambda_bkwd:
        raise ConfigError("identity fusion needs lambda_fwd == lambda_bkwd", field="lambda_fwd")
    bundle = bundle or build_bundle(model, image_a, identity_b)
    return [bimd_sample(model, bundle, config.replace(mss=int(m))) for m in mss_sweep]
