"""Desk-scale diffusion inversion lab: DDIM anchors, null-embedding
optimization, residual replay and bidirectional sampling on glyph scenes."""

from importlib.metadata import PackageNotFoundError, version

try:
    __version__ = version("artifact")
except PackageNotFoundError:  # running from a source tree
    __version__ = "0.1.0"

from .bimd import BimdConfig, FlowBundle, bimd_sample, build_bundle, flow_ablation, identity_fusion
from .denoiser import (Conditioning, DenoiserConfig, DenoiserParams, load_weights, predict_eps,
                       save_weights, train)
from .errors import ResinvError
from .glyphs import IdentityParams, RenderedImage, SceneParams, fit_identity, glyph_swap, render
from .inversion import (ddim_invert, nti_invert, reconstruct_ddim, reconstruct_nti,
                        reconstruct_res, res_invert)
from .schedule import NoiseSchedule, default_schedule, make_linear_schedule

__all__ = [
    "BimdConfig", "Conditioning", "DenoiserConfig", "DenoiserParams", "FlowBundle",
    "IdentityParams", "NoiseSchedule", "RenderedImage", "ResinvError", "SceneParams",
    "bimd_sample", "build_bundle", "ddim_invert", "default_schedule", "fit_identity",
    "flow_ablation", "glyph_swap", "identity_fusion", "load_weights", "make_linear_schedule",
    "nti_invert", "predict_eps", "reconstruct_ddim", "reconstruct_nti", "reconstruct_res",
    "render", "res_invert", "save_weights", "train",
]
