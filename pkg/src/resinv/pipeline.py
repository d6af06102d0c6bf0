"""End-to-end enhancement: base scene, glyph swap, inversion, BiMD.

Stages run in order base -> swapped -> enhanced. The control mask only ever
reaches the base model; the personalized model sees the scene code and the
target identity.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field
from pathlib import Path
from statistics import median
from typing import Sequence

import numpy as np

from .bimd import (BimdConfig, FlowBundle, bimd_sample, build_bundle, flow_ablation,
                   identity_fusion)
from .denoiser import Conditioning, DenoiserParams
from .errors import ShapeError, StageError
from .glyphs import (SCENE_CATALOG, SIZE, IdentityFit, IdentityParams, RenderedImage,
                     background_diversity, box_mse, exterior_mask, fit_identity, glyph_swap,
                     identity_error, random_identity, render, scene_for_code, write_pgm)
from .inversion import sample_ddim
from .tensor import DTYPE

STAGES = ("base", "swapped", "enhanced")
ABLATION_ROWS = ("final", "after-swap", "after-base", "ab-fwd", "ab-bkwd")
DEFAULT_GUIDANCE = 1.0  # identity branch; w=3 over-drives glyph intensity
PREDIFFUSION_GUIDANCE = 3.0


def seed_latent(seed: int, size: int = SIZE) -> np.ndarray:
    """The Gaussian start latent shared by the base and personalized-only runs."""
    return np.random.default_rng([int(seed), 1]).standard_normal((size, size)).astype(DTYPE)


@dataclass(frozen=True)
class EnhanceRequest:
    scene_code: int
    target: IdentityParams
    control: np.ndarray | None = field(default=None, compare=False)
    config: BimdConfig = BimdConfig()
    seed: int = 0
    guidance: float = DEFAULT_GUIDANCE

    def __post_init__(self):
        if not 0 <= self.scene_code < len(SCENE_CATALOG):
            raise ShapeError(f"scene code {self.scene_code} outside [0, {len(SCENE_CATALOG)})")
        if self.control is not None and np.shape(self.control) != (SIZE, SIZE):
            raise ShapeError(f"control mask must be {SIZE}x{SIZE}, got {np.shape(self.control)}")

    @property
    def identity_cond(self) -> Conditioning:
        return Conditioning(self.scene_code, self.target, guidance=self.guidance)

    @property
    def free_cond(self) -> Conditioning:
        return Conditioning(self.scene_code, None, guidance=PREDIFFUSION_GUIDANCE)

    def describe(self) -> dict:
        return {
            "scene_code": self.scene_code,
            "target": self.target.to_dict(),
            "control": None if self.control is None else np.flatnonzero(self.control).tolist(),
            "bimd": self.config.to_dict(),
            "seed": self.seed,
            "guidance": self.guidance,
        }


def request_for_seed(seed: int, config: BimdConfig = BimdConfig(),
                     guidance: float = DEFAULT_GUIDANCE) -> EnhanceRequest:
    """Deterministic scene code and target identity for a seed."""
    rng = np.random.default_rng([int(seed), 0])
    code = int(rng.integers(len(SCENE_CATALOG)))
    return EnhanceRequest(code, random_identity(rng), None, config, int(seed), guidance)


@dataclass
class EnhanceResult:
    request: EnhanceRequest
    base: RenderedImage
    swapped: RenderedImage
    enhanced: RenderedImage
    fits: dict[str, IdentityFit]
    errors: dict[str, float]
    latencies: dict[str, float]
    bundle: FlowBundle | None = field(default=None, repr=False)

    @property
    def exterior(self) -> np.ndarray:
        """Background pixels of the enhanced image (its diversity contribution)."""
        return self.enhanced.pixels[exterior_mask()]

    def images(self) -> dict[str, RenderedImage]:
        return {"base": self.base, "swapped": self.swapped, "enhanced": self.enhanced}

    def metrics(self) -> dict:
        return {
            "request": self.request.describe(),
            "stages": {
                s: {
                    "identity_error": self.errors[s],
                    "fit": self.fits[s].params.to_dict(),
                    "fit_residual": self.fits[s].residual,
                    "latency_s": self.latencies[s],
                }
                for s in STAGES
            },
        }


def generate_base(base_model: DenoiserParams, scene_code: int, control=None,
                  seed: int = 0, schedule=None) -> RenderedImage:
    if base_model.config.uses_identity:
        raise ValueError("generate_base needs a base (identity-free) model")
    ctrl = None if control is None else np.asarray(control, DTYPE)
    cond = Conditioning(scene_code, None, ctrl, guidance=1.0)
    return RenderedImage(sample_ddim(base_model, seed_latent(seed), cond, schedule), "base")


def personalized_only(model: DenoiserParams, request: EnhanceRequest,
                      schedule=None) -> RenderedImage:
    """Baseline: identity-conditioned DDIM sample from the request's seed latent."""
    z = sample_ddim(model, seed_latent(request.seed), request.identity_cond, schedule)
    return RenderedImage(z, "sample")


def _stage(name: str, partial: dict, fn, *args, **kw):
    t0 = time.perf_counter()
    try:
        out = fn(*args, **kw)
    except Exception as exc:  # any failure is reported with its stage
        raise StageError(name, exc, dict(partial)) from exc
    return out, time.perf_counter() - t0


def enhance(request: EnhanceRequest, base_model: DenoiserParams,
            personalized_model: DenoiserParams, schedule=None,
            keep_bundle: bool = False) -> EnhanceResult:
    partial: dict = {}
    base, t_base = _stage("base", partial, generate_base, base_model, request.scene_code,
                          request.control, request.seed, schedule)
    partial["base"] = base
    swapped, t_swap = _stage("swap", partial, glyph_swap, base, request.target, True)
    partial["swapped"] = swapped
    bundle, t_inv = _stage("invert", partial, build_bundle, personalized_model, swapped,
                           request.identity_cond, request.free_cond, schedule)
    partial["bundle"] = bundle
    enhanced, t_bimd = _stage("bimd", partial, bimd_sample, personalized_model, bundle,
                              request.config)
    images = {"base": base, "swapped": swapped, "enhanced": enhanced}
    fits = {s: fit_identity(im) for s, im in images.items()}
    errors = {s: identity_error(im, request.target) for s, im in images.items()}
    latencies = {"base": t_base, "swapped": t_swap, "enhanced": t_inv + t_bimd}
    return EnhanceResult(request, base, swapped, enhanced, fits, errors, latencies,
                         bundle if keep_bundle else None)


def write_result(result: EnhanceResult, out_dir, manifest: dict | None = None) -> Path:
    """Write ``base.pgm``, ``swap.pgm``, ``enhanced.pgm``, ``metrics.json``, ``manifest.json``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_pgm(out / "base.pgm", result.base)
    write_pgm(out / "swap.pgm", result.swapped)
    write_pgm(out / "enhanced.pgm", result.enhanced)
    (out / "metrics.json").write_text(json.dumps(result.metrics(), indent=2, sort_keys=True))
    doc = {"request": result.request.describe(), **(manifest or {})}
    (out / "manifest.json").write_text(json.dumps(doc, indent=2, sort_keys=True))
    return out


# -- ablation -----------------------------------------------------------------

@dataclass
class AblationReport:
    seeds: list[int]
    rows: list[dict]
    per_seed: dict[str, list[float]]

    def row(self, stage: str) -> dict:
        for r in self.rows:
            if r["stage"] == stage:
                return r
        raise KeyError(stage)

    def to_json(self) -> str:
        return json.dumps({"seeds": self.seeds, "rows": self.rows, "per_seed": self.per_seed},
                          indent=2, sort_keys=True)


def run_ablation_suite(base_model: DenoiserParams, personalized_model: DenoiserParams,
                       seeds: Sequence[int], config: BimdConfig = BimdConfig(),
                       guidance: float = DEFAULT_GUIDANCE, schedule=None) -> AblationReport:
    """Per-stage identity error, background diversity and latency over ``seeds``."""
    if len(seeds) < 2:
        raise ValueError("run_ablation_suite needs at least two seeds")
    errs = {s: [] for s in ABLATION_ROWS}
    imgs = {s: [] for s in ABLATION_ROWS}
    lat = {s: [] for s in ABLATION_ROWS}
    for seed in seeds:
        req = request_for_seed(seed, config, guidance)
        res = enhance(req, base_model, personalized_model, schedule, keep_bundle=True)
        t_base = res.latencies["base"]
        t_swap = t_base + res.latencies["swapped"]
        stage_out = {
            "after-base": (res.base, t_base),
            "after-swap": (res.swapped, t_swap),
            "final": (res.enhanced, t_swap + res.latencies["enhanced"]),
        }
        for which, row in (("fwd", "ab-fwd"), ("bkwd", "ab-bkwd")):
            t0 = time.perf_counter()
            img = flow_ablation(personalized_model, res.bundle, which, config)
            # the bundle is shared, so charge the inversion from the final row
            inv = res.latencies["enhanced"]
            stage_out[row] = (img, t_swap + inv + time.perf_counter() - t0)
        for row, (img, t) in stage_out.items():
            errs[row].append(identity_error(img, req.target))
            imgs[row].append(img)
            lat[row].append(t)
    rows = [
        {
            "stage": row,
            "identity_error": float(np.mean(errs[row])),
            "identity_error_median": float(median(errs[row])),
            "diversity": background_diversity(imgs[row]),
            "latency_s": float(median(lat[row])),
        }
        for row in ABLATION_ROWS
    ]
    return AblationReport([int(s) for s in seeds], rows, {k: [float(v) for v in vs]
                                                          for k, vs in errs.items()})


# -- identity fusion ------------------------------------------------------------

@dataclass
class FusionRun:
    seed: int
    source: RenderedImage
    identity_a: IdentityParams
    identity_b: IdentityParams
    scene_code: int
    mss_sweep: list[int]
    frames: list[RenderedImage]

    @property
    def box_mse_to_source(self) -> list[float]:
        return [box_mse(f, self.source) for f in self.frames]

    def record(self) -> dict:
        return {
            "seed": self.seed,
            "scene_code": self.scene_code,
            "identity_a": self.identity_a.to_dict(),
            "identity_b": self.identity_b.to_dict(),
            "box_mse_to_source": self.box_mse_to_source,
            "fit_kind": [fit_identity(f).params.kind for f in self.frames],
        }


def fusion_case(seed: int, guidance: float = DEFAULT_GUIDANCE
                ) -> tuple[RenderedImage, IdentityParams, Conditioning]:
    """Source image A on a jittered scene plus a conditioning for a different-kind B."""
    rng = np.random.default_rng([int(seed), 7])
    code = int(rng.integers(len(SCENE_CATALOG)))
    ident_a = random_identity(rng)
    ident_b = random_identity(rng)
    while ident_b.kind == ident_a.kind:
        ident_b = random_identity(rng)
    image = render(scene_for_code(code, rng), ident_a)
    return image, ident_a, Conditioning(code, ident_b, guidance=guidance)


def run_fusion(model: DenoiserParams, seed: int, mss_sweep: Sequence[int],
               config: BimdConfig = BimdConfig(), guidance: float = DEFAULT_GUIDANCE,
               schedule=None) -> FusionRun:
    image, ident_a, cond_b = fusion_case(seed, guidance)
    free = Conditioning(cond_b.scene_code, None, guidance=PREDIFFUSION_GUIDANCE)
    bundle = build_bundle(model, image, cond_b, free, schedule)
    frames = identity_fusion(model, image, cond_b, mss_sweep, config, bundle=bundle)
    return FusionRun(int(seed), image, ident_a, cond_b.identity, cond_b.scene_code,
                     [int(m) for m in mss_sweep], frames)
