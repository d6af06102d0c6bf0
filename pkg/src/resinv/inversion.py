"""Image inversion: DDIM anchors, null-embedding optimization, residual replay.

All three engines start from the same anchor trajectory ``Z_0* .. Z_T*``
produced by :func:`ddim_invert`:

* plain DDIM just samples back from ``Z_T*``;
* :func:`nti_invert` optimizes a per-step unconditional (NULL) embedding so
  that guided steps land on the anchors;
* :func:`res_invert` records, per step, the difference between the noise the
  anchor transition implies and the noise the model predicts at the anchor.
  Adding those residuals back during sampling retraces the anchors exactly.
"""

from __future__ import annotations

import logging
import statistics
import struct
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from threadpoolctl import threadpool_limits

from . import tensor as tn
from .denoiser import Conditioning, DenoiserParams, branch_eps, predict_eps
from .errors import (DivergenceError, NonFiniteError, ScheduleError, ShapeError,
                     WeightFileError)
from .glyphs import RenderedImage
from .schedule import (NoiseSchedule, cfg_combine, ddim_inverse_step, ddim_step,
                       default_schedule, implied_eps)
from .tensor import DTYPE, Tape, Tensor

log = logging.getLogger(__name__)

METHODS = ("ddim", "res", "nti")

NTI_INNER_ITERS = 10
NTI_LR = 1e-2
NTI_EARLY_STOP = 1e-5


@dataclass
class DdimTrajectory:
    latents: list  # latents[t] is Z_t*, t = 0..T
    cond: Conditioning
    schedule: NoiseSchedule

    def __post_init__(self):
        if len(self.latents) != self.schedule.T + 1:
            raise ScheduleError(
                f"trajectory has {len(self.latents)} latents, schedule needs {self.schedule.T + 1}"
            )

    @property
    def start(self) -> np.ndarray:
        return self.latents[-1]

    @property
    def T(self) -> int:
        return self.schedule.T


@dataclass
class ResidualTrack:
    """Residual noises for t = 1..T (``residuals[t - 1]``).

    The usual notation counts residuals from 0; here index ``t`` is the step
    from ``t`` to ``t - 1``, so there are exactly T of them.
    """

    residuals: list
    cond: Conditioning
    schedule: NoiseSchedule

    def __post_init__(self):
        if len(self.residuals) != self.schedule.T:
            raise ScheduleError(f"{len(self.residuals)} residuals for T={self.schedule.T}")

    def at(self, t: int) -> np.ndarray:
        return self.residuals[t - 1]

    def norms(self) -> list[float]:
        return [float(np.linalg.norm(r)) for r in self.residuals]


@dataclass
class NullTrack:
    """Optimized NULL embeddings; ``embeddings[t - 1]`` is used at step t."""

    embeddings: list
    iterations: list
    losses_before: list
    losses_after: list

    def at(self, t: int) -> np.ndarray:
        return self.embeddings[t - 1]

    @property
    def T(self) -> int:
        return len(self.embeddings)


@dataclass
class InversionReport:
    method: str
    latency_s: float
    max_abs_err: float
    mse: float
    T: int
    inner_iters: int | None = None
    latencies: list = field(default_factory=list)

    def row(self) -> dict:
        return {"method": self.method, "T": self.T, "inner_iters": self.inner_iters,
                "latency_s": self.latency_s, "max_abs_err": self.max_abs_err, "mse": self.mse}


def _as_latent(image) -> np.ndarray:
    px = image.pixels if isinstance(image, RenderedImage) else image
    return np.asarray(px, dtype=DTYPE)


def _finite(z: np.ndarray, what: str, t: int) -> np.ndarray:
    if not np.isfinite(z).all():
        raise NonFiniteError(f"non-finite latent in {what} at t={t}")
    return z


def ddim_invert(model: DenoiserParams, image, cond: Conditioning,
                schedule: NoiseSchedule | None = None) -> DdimTrajectory:
    schedule = schedule or default_schedule()
    z = _as_latent(image).copy()
    cfg = model.config
    if z.shape != (cfg.image_size, cfg.image_size):
        raise ShapeError(f"image shape {z.shape} does not match the model")
    latents = [z]
    for t in range(1, schedule.T + 1):
        eps = predict_eps(model, z, t, cond, schedule)
        z = _finite(ddim_inverse_step(schedule, z, eps, t).astype(DTYPE), "ddim_invert", t)
        latents.append(z)
    return DdimTrajectory(latents, cond, schedule)


def sample_ddim(model: DenoiserParams, z_start, cond: Conditioning,
                schedule: NoiseSchedule | None = None, t_start: int | None = None) -> np.ndarray:
    """Plain guided DDIM sampling from ``t_start`` (default T) down to 0."""
    schedule = schedule or default_schedule()
    z = np.asarray(z_start, dtype=DTYPE)
    for t in range(t_start or schedule.T, 0, -1):
        eps = predict_eps(model, z, t, cond, schedule)
        z = _finite(ddim_step(schedule, z, eps, t).astype(DTYPE), "sampling", t)
    return z


def reconstruct_ddim(model: DenoiserParams, traj_start, cond: Conditioning,
                     schedule: NoiseSchedule | None = None) -> RenderedImage:
    return RenderedImage(sample_ddim(model, traj_start, cond, schedule), "reconstruction")


def _check_free(traj: DdimTrajectory, cond_free: Conditioning) -> None:
    if cond_free.identity is not None:
        raise ValueError("residuals must be recorded in customization-free space (identity=None)")
    if cond_free.scene_code != traj.cond.scene_code:
        raise ValueError("free conditioning uses a different scene code than the trajectory")


def res_invert(model: DenoiserParams, traj: DdimTrajectory,
               cond_free: Conditioning) -> ResidualTrack:
    """Record ``implied_eps(Z_t*, Z_{t-1}*) - predict_eps(Z_t*)`` for every step."""
    _check_free(traj, cond_free)
    schedule = traj.schedule
    residuals = [None] * schedule.T
    for t in range(schedule.T, 0, -1):
        z_t, z_prev = traj.latents[t], traj.latents[t - 1]
        target = implied_eps(schedule, z_t, z_prev, t)
        pred = predict_eps(model, z_t, t, cond_free, schedule)
        residuals[t - 1] = _finite((target - pred).astype(DTYPE), "res_invert", t)
    return ResidualTrack(residuals, cond_free, schedule)


def reconstruct_res(model: DenoiserParams, track: ResidualTrack, traj_start,
                    cond_free: Conditioning) -> RenderedImage:
    schedule = track.schedule
    z = np.asarray(traj_start, dtype=DTYPE)
    if z.shape != track.at(1).shape:
        raise ShapeError(f"start latent {z.shape} vs residual shape {track.at(1).shape}")
    for t in range(schedule.T, 0, -1):
        eps = predict_eps(model, z, t, cond_free, schedule) + track.at(t)
        z = _finite(ddim_step(schedule, z, eps, t).astype(DTYPE), "reconstruct_res", t)
    return RenderedImage(z, "reconstruction")


def _nti_loss(model, z_bar, t, cond, eps_cond, null, target, schedule):
    eps_u = branch_eps(model, z_bar, t, cond, use_identity=False, null=null, schedule=schedule)
    eps = cfg_combine(eps_u, Tensor(eps_cond), cond.guidance)
    z_prev = ddim_step(schedule, z_bar, eps, t)
    return tn.mean(tn.square(z_prev - target)), z_prev


def nti_invert(model: DenoiserParams, traj: DdimTrajectory, cond: Conditioning,
               inner_iters: int = NTI_INNER_ITERS, lr: float = NTI_LR,
               early_stop_eps: float = NTI_EARLY_STOP) -> NullTrack:
    """Per-step Adam optimization of the NULL embedding against the anchors.

    Each step starts from the previous step's embedding (the stored NULL
    token at t=T), runs up to ``inner_iters`` updates, and keeps the best
    iterate seen, so the achieved loss never exceeds the starting loss.
    """
    if inner_iters < 1:
        raise ValueError("inner_iters must be >= 1")
    if cond.guidance <= 1.0:
        raise ValueError("null-embedding optimization needs guidance > 1")
    if cond.identity is None:
        raise ValueError("null-embedding optimization needs an identity conditioning")
    schedule = traj.schedule
    T = schedule.T
    null = model.null_token.astype(DTYPE).copy()
    z_bar = np.asarray(traj.start, dtype=DTYPE)
    embeddings, iterations = [None] * T, [0] * T
    before, after = [0.0] * T, [0.0] * T
    for t in range(T, 0, -1):
        target = traj.latents[t - 1]
        eps_cond = branch_eps(model, z_bar, t, cond, schedule=schedule).numpy()
        state = tn.AdamState.zeros_like([null])
        best = None
        used = 0
        for it in range(inner_iters + 1):
            var = Tensor(null, requires_grad=True)
            with Tape():
                loss, z_prev = _nti_loss(model, z_bar, t, cond, eps_cond, var, target, schedule)
            value = loss.item()
            if not np.isfinite(value):
                raise DivergenceError(f"NTI loss non-finite at t={t}, iteration {it}",
                                      step=t, iteration=it)
            if it == 0:
                before[t - 1] = value
            if best is None or value < best[0]:
                best = (value, null, z_prev.numpy())
            if it == inner_iters or value < early_stop_eps:
                break
            try:
                (grad,) = tn.backward(loss, [var])
            except NonFiniteError as exc:
                raise DivergenceError(f"NTI gradient non-finite at t={t}, iteration {it}",
                                      step=t, iteration=it) from exc
            (null,) = tn.adam_step([null], [grad], state, lr)
            used += 1
        value, null, z_next = best
        embeddings[t - 1] = null
        iterations[t - 1] = used
        after[t - 1] = value
        z_bar = _finite(z_next.astype(DTYPE), "nti_invert", t)
    return NullTrack(embeddings, iterations, before, after)


def reconstruct_nti(model: DenoiserParams, nulls: NullTrack, traj_start, cond: Conditioning,
                    schedule: NoiseSchedule | None = None) -> RenderedImage:
    schedule = schedule or default_schedule()
    if nulls.T != schedule.T:
        raise ShapeError(f"null track has {nulls.T} steps, schedule {schedule.T}")
    z = np.asarray(traj_start, dtype=DTYPE)
    for t in range(schedule.T, 0, -1):
        eps_c = branch_eps(model, z, t, cond, schedule=schedule).data
        eps_u = branch_eps(model, z, t, cond, use_identity=False, null=Tensor(nulls.at(t)),
                           schedule=schedule).data
        eps = cfg_combine(eps_u, eps_c, cond.guidance)
        z = _finite(ddim_step(schedule, z, eps, t).astype(DTYPE), "reconstruct_nti", t)
    return RenderedImage(z, "reconstruction")


def reconstruction_error(recon, original) -> tuple[float, float]:
    """``(max_abs, mse)`` between two images or latents."""
    a = _as_latent(recon).astype(np.float64)
    b = _as_latent(original).astype(np.float64)
    d = a - b
    return float(np.abs(d).max()), float((d * d).mean())


def run_method(method: str, model: DenoiserParams, image, cond: Conditioning,
               schedule: NoiseSchedule | None = None, inner_iters: int = NTI_INNER_ITERS,
               lr: float = NTI_LR, early_stop_eps: float = NTI_EARLY_STOP) -> RenderedImage:
    """Invert ``image`` and reconstruct it with one method (the timed unit)."""
    schedule = schedule or default_schedule()
    traj = ddim_invert(model, image, cond, schedule)
    if method == "ddim":
        return reconstruct_ddim(model, traj.start, cond, schedule)
    if method == "res":
        free = cond.free()
        track = res_invert(model, traj, free)
        return reconstruct_res(model, track, traj.start, free)
    if method == "nti":
        nulls = nti_invert(model, traj, cond, inner_iters, lr, early_stop_eps)
        return reconstruct_nti(model, nulls, traj.start, cond, schedule)
    raise ValueError(f"unknown inversion method {method!r}; choose from {METHODS}")


def _single_thread():
    return threadpool_limits(limits=1)


def bench_inversions(model: DenoiserParams, images: Sequence, conds: Sequence[Conditioning],
                     methods: Sequence[str] = METHODS, repeats: int = 5, *,
                     inner_iters: int = NTI_INNER_ITERS, lr: float = NTI_LR,
                     early_stop_eps: float = NTI_EARLY_STOP,
                     schedule: NoiseSchedule | None = None) -> list[InversionReport]:
    """Median per-image latency over ``repeats`` plus mean reconstruction error.

    Runs one image at a time with BLAS pinned to a single thread.
    """
    if repeats < 3:
        raise ValueError("repeats must be at least 3")
    if not images or len(images) != len(conds):
        raise ValueError("need one conditioning per image and at least one image")
    schedule = schedule or default_schedule()
    reports = []
    with _single_thread():
        for method in methods:
            if method not in METHODS:
                raise ValueError(f"unknown inversion method {method!r}")
            per_repeat, errs = [], []
            for r in range(repeats):
                total = 0.0
                for img, cond in zip(images, conds):
                    t0 = time.perf_counter()
                    recon = run_method(method, model, img, cond, schedule,
                                       inner_iters, lr, early_stop_eps)
                    total += time.perf_counter() - t0
                    if r == 0:
                        errs.append(reconstruction_error(recon, img))
                per_repeat.append(total / len(images))
            reports.append(InversionReport(
                method=method,
                latency_s=statistics.median(per_repeat),
                max_abs_err=float(np.mean([e[0] for e in errs])),
                mse=float(np.mean([e[1] for e in errs])),
                T=schedule.T,
                inner_iters=inner_iters if method == "nti" else None,
                latencies=per_repeat,
            ))
    return reports


# -- RTRK containers -----------------------------------------------------------

TRACK_MAGIC = b"RTRK"
TRACK_VERSION = 1
_KIND = {"trajectory": 0, "residuals": 1, "nulls": 2}


def save_track(path, arrays: Sequence[np.ndarray], schedule: NoiseSchedule, kind: str) -> None:
    """Binary container: magic, version, kind, schedule hash, count, shape, float32 LE data."""
    arrays = [np.ascontiguousarray(a, dtype="<f4") for a in arrays]
    shape = arrays[0].shape
    if any(a.shape != shape for a in arrays):
        raise ShapeError("all tensors in a track must share one shape")
    head = TRACK_MAGIC + struct.pack("<II", TRACK_VERSION, _KIND[kind])
    head += bytes.fromhex(schedule.hash())
    head += struct.pack("<II", len(arrays), len(shape)) + struct.pack(f"<{len(shape)}I", *shape)
    Path(path).write_bytes(head + b"".join(a.tobytes() for a in arrays))


def load_track(path, schedule: NoiseSchedule, kind: str) -> list[np.ndarray]:
    raw = Path(path).read_bytes()
    if raw[:4] != TRACK_MAGIC:
        raise WeightFileError(f"{path}: bad magic, not a track file")
    if len(raw) < 52:
        raise WeightFileError(f"{path}: truncated header")
    version, k = struct.unpack_from("<II", raw, 4)
    if version != TRACK_VERSION:
        raise WeightFileError(f"{path}: track version {version}, expected {TRACK_VERSION}")
    if k != _KIND[kind]:
        raise WeightFileError(f"{path}: holds kind {k}, expected {kind}")
    if raw[12:44] != bytes.fromhex(schedule.hash()):
        raise WeightFileError(f"{path}: recorded under a different schedule")
    count, ndim = struct.unpack_from("<II", raw, 44)
    shape = struct.unpack_from(f"<{ndim}I", raw, 52)
    offset = 52 + 4 * ndim
    n = int(np.prod(shape))
    if len(raw) != offset + 4 * n * count:
        raise WeightFileError(f"{path}: size does not match {count} tensors of shape {shape}")
    data = np.frombuffer(raw, dtype="<f4", offset=offset).astype(DTYPE)
    return [data[i * n:(i + 1) * n].reshape(shape).copy() for i in range(count)]


def save_trajectory(path, traj: DdimTrajectory) -> None:
    save_track(path, traj.latents, traj.schedule, "trajectory")


def load_trajectory(path, schedule: NoiseSchedule, cond: Conditioning) -> DdimTrajectory:
    return DdimTrajectory(load_track(path, schedule, "trajectory"), cond, schedule)


def save_residuals(path, track: ResidualTrack) -> None:
    save_track(path, track.residuals, track.schedule, "residuals")


def load_residuals(path, schedule: NoiseSchedule, cond_free: Conditioning) -> ResidualTrack:
    return ResidualTrack(load_track(path, schedule, "residuals"), cond_free, schedule)
