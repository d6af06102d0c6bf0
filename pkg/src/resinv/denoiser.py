"""Conditional epsilon-prediction MLPs over flattened 16x16 images.

Two flavours share one architecture:

* ``base``: conditioned on a scene code and an optional control mask; it
  never sees identity, so its glyphs are identity-agnostic.
* ``personalized``: conditioned on a scene code and an identity code. The
  identity slot is replaced by a learned NULL token with probability
  ``cond_dropout`` during training, which defines the customization-free
  space and makes classifier-free guidance meaningful.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import tensor as tn
from .errors import ConfigError, DivergenceError, NonFiniteError, ShapeError, WeightFileError
from .glyphs import SCENE_CATALOG, SIZE, IdentityParams, Sample, identity_feature_size
from .schedule import NoiseSchedule, cfg_combine, default_schedule
from .tensor import DTYPE, Tape, Tensor

log = logging.getLogger(__name__)

MAGIC = b"RINV"
FORMAT_VERSION = 1
KINDS = ("base", "personalized")


@dataclass(frozen=True)
class DenoiserConfig:
    kind: str = "personalized"
    image_size: int = SIZE
    hidden: int = 512
    layers: int = 3
    time_dim: int = 32
    scene_count: int = len(SCENE_CATALOG)
    scene_dim: int = 16
    identity_dim: int = 32
    control_dim: int = 32
    cond_dropout: float = 0.1

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError(f"unknown model kind {self.kind!r}", field="kind")
        for name in ("image_size", "hidden", "layers", "time_dim", "scene_count",
                     "scene_dim", "identity_dim", "control_dim"):
            if int(getattr(self, name)) <= 0:
                raise ConfigError("must be positive", field=name)
        if self.time_dim % 2:
            raise ConfigError("must be even", field="time_dim")
        if not 0.0 <= self.cond_dropout <= 1.0:
            raise ConfigError("must lie in [0, 1]", field="cond_dropout")

    @property
    def data_dim(self) -> int:
        return self.image_size * self.image_size

    @property
    def uses_identity(self) -> bool:
        return self.kind == "personalized"

    @property
    def uses_control(self) -> bool:
        return self.kind == "base"

    def tensor_shapes(self) -> list[tuple[str, tuple[int, ...]]]:
        """Parameter names and shapes in declaration (= file) order."""
        d, h = self.data_dim, self.hidden
        shapes = [("scene_table", (self.scene_count, self.scene_dim))]
        cond = self.scene_dim
        if self.uses_identity:
            shapes += [
                ("id_proj_w", (identity_feature_size(), self.identity_dim)),
                ("id_proj_b", (self.identity_dim,)),
                ("null_token", (self.identity_dim,)),
            ]
            cond += self.identity_dim
        if self.uses_control:
            shapes += [("ctrl_w", (d, self.control_dim)), ("ctrl_b", (self.control_dim,))]
            cond += self.control_dim
        shapes += [("in_w", (d + self.time_dim + cond, h)), ("in_b", (h,))]
        for i in range(self.layers):
            shapes += [(f"h{i}_w", (h, h)), (f"h{i}_b", (h,))]
        shapes += [("out_w", (h, d)), ("out_b", (d,)), ("skip_w", (self.time_dim, 1))]
        return shapes

    @classmethod
    def from_dict(cls, d: dict) -> "DenoiserConfig":
        known = set(cls.__dataclass_fields__)
        extra = set(d) - known
        if extra:
            raise ConfigError(f"unknown keys {sorted(extra)}", field="model")
        return cls(**d)


@dataclass(frozen=True)
class Conditioning:
    """What a single prediction is conditioned on.

    ``identity=None`` selects the NULL token (customization-free space).
    ``guidance`` is the classifier-free guidance weight between the NULL and
    identity branches.
    """

    scene_code: int
    identity: IdentityParams | None = None
    control: np.ndarray | None = field(default=None, compare=False)
    guidance: float = 1.0

    def __post_init__(self):
        if self.guidance < 0:
            raise ConfigError("guidance scale must be >= 0", field="guidance")

    def free(self) -> "Conditioning":
        """Same conditioning with the identity replaced by the NULL token."""
        return Conditioning(self.scene_code, None, self.control, self.guidance)

    def with_guidance(self, w: float) -> "Conditioning":
        return Conditioning(self.scene_code, self.identity, self.control, w)

    def describe(self) -> dict:
        return {
            "scene_code": self.scene_code,
            "identity": None if self.identity is None else self.identity.to_dict(),
            "control": None if self.control is None else np.flatnonzero(self.control).tolist(),
            "guidance": self.guidance,
        }


@dataclass
class DenoiserParams:
    config: DenoiserConfig
    tensors: dict[str, np.ndarray]

    def __post_init__(self):
        for name, shape in self.config.tensor_shapes():
            arr = self.tensors.get(name)
            if arr is None:
                raise ShapeError(f"missing parameter {name}")
            if arr.shape != shape:
                raise ShapeError(f"parameter {name} has shape {arr.shape}, expected {shape}")
            if not np.isfinite(arr).all():
                raise NonFiniteError(f"parameter {name} holds non-finite values")

    @property
    def null_token(self) -> np.ndarray:
        return self.tensors["null_token"]

    def wide(self, name: str) -> np.ndarray:
        """float64 copy of a weight, cached until ``tensors`` is replaced."""
        cache = self.__dict__.get("_wide")
        if cache is None or cache[0] is not self.tensors:
            cache = self.__dict__["_wide"] = (self.tensors, {})
        if name not in cache[1]:
            cache[1][name] = self.tensors[name].astype(np.float64)
        return cache[1][name]

    def digest(self) -> str:
        h = hashlib.sha256(json.dumps(asdict(self.config), sort_keys=True).encode())
        for name, _ in self.config.tensor_shapes():
            h.update(np.ascontiguousarray(self.tensors[name], dtype="<f4").tobytes())
        return h.hexdigest()


def init_params(config: DenoiserConfig, rng: np.random.Generator) -> DenoiserParams:
    tensors = {}
    for name, shape in config.tensor_shapes():
        if name.endswith("_b"):
            arr = np.zeros(shape)
        elif name in ("out_w", "skip_w"):
            arr = np.zeros(shape)
        elif name in ("scene_table", "null_token"):
            arr = rng.normal(0.0, 1.0, shape)
        elif name.startswith("h") and name.endswith("_w"):
            arr = rng.normal(0.0, 1.0, shape) * math.sqrt(1.0 / shape[0])
        else:
            arr = rng.normal(0.0, 1.0, shape) * math.sqrt(2.0 / shape[0])
        tensors[name] = arr.astype(DTYPE)
    return DenoiserParams(config, tensors)


def time_embedding(t, dim: int, T: int) -> np.ndarray:
    t = np.atleast_1d(np.asarray(t, dtype=np.float64)) * (1000.0 / T)
    half = dim // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half) / half)
    ang = t[:, None] * freqs[None, :]
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=1).astype(DTYPE)


def _forward(params: DenoiserParams, tensors: dict, x, t, scene_codes, *,
             id_features=None, id_keep=None, null=None, control=None,
             schedule: NoiseSchedule):
    """Batched network evaluation on :mod:`resinv.tensor` values.

    The output is ``sqrt(ab_t) * F(x, ...) + g_t * sqrt(1 - ab_t) * x``. With
    ``g_t = 1`` the skip is the best linear noise estimate for unit-variance
    data, so the MLP only learns a residual. ``g_t = exp(temb @ skip_w)``
    starts at 1 and lets narrow data raise the low-noise gain toward
    ``1 / (1 - ab_t)``.

    ``id_keep`` is a (B, 1) 0/1 array choosing the identity projection (1) or
    the NULL token (0) per row. ``null`` overrides the stored NULL token.
    """
    T = schedule.T
    cfg = params.config
    b = x.shape[0]
    temb = Tensor(time_embedding(t, cfg.time_dim, T))
    parts = [x, temb,
             tn.take_rows(tensors["scene_table"], scene_codes)]
    if cfg.uses_identity:
        null = tensors["null_token"] if null is None else null
        null_rows = tn.mul(tn.reshape(null, (1, cfg.identity_dim)), np.ones((b, 1), DTYPE))
        if id_features is None:
            parts.append(null_rows)
        else:
            proj = tn.matmul(id_features, tensors["id_proj_w"]) + tensors["id_proj_b"]
            # always mix, so the NULL token stays on the tape even when no row drops
            keep = np.asarray(id_keep, dtype=DTYPE).reshape(b, 1)
            parts.append(proj * keep + null_rows * (1.0 - keep))
    if cfg.uses_control:
        ctrl = np.zeros((b, cfg.data_dim), DTYPE) if control is None else control
        parts.append(tn.matmul(ctrl, tensors["ctrl_w"]) + tensors["ctrl_b"])
    h = tn.silu(tn.matmul(tn.concat(parts, axis=1), tensors["in_w"]) + tensors["in_b"])
    for i in range(cfg.layers):
        h = h + tn.silu(tn.matmul(h, tensors[f"h{i}_w"]) + tensors[f"h{i}_b"])
    ab = schedule.alpha_bars[np.asarray(t)].reshape(b, 1)
    resid = tn.matmul(h, tensors["out_w"]) + tensors["out_b"]
    gain = tn.exp(tn.matmul(temb, tensors["skip_w"]))
    return resid * np.sqrt(ab).astype(DTYPE) + x * (gain * np.sqrt(1.0 - ab).astype(DTYPE))


def _silu_np(x: np.ndarray) -> np.ndarray:
    return x * (0.5 * (1.0 + np.tanh(0.5 * x)))


def _infer(params: DenoiserParams, x: np.ndarray, t: int, scene_code: int, *,
           id_features=None, null=None, control=None, schedule: NoiseSchedule) -> np.ndarray:
    """Tape-free single-row forward; same arithmetic as :func:`_forward`."""
    cfg = params.config
    w = params.tensors
    mm = tn.wide_matmul
    temb = time_embedding([t], cfg.time_dim, schedule.T)
    parts = [x, temb, w["scene_table"][[scene_code]]]
    if cfg.uses_identity:
        if id_features is None:
            null = w["null_token"] if null is None else np.asarray(null, DTYPE)
            parts.append(null.reshape(1, cfg.identity_dim) * np.ones((1, 1), DTYPE))
        else:
            parts.append(mm(id_features.astype(DTYPE), params.wide("id_proj_w")) + w["id_proj_b"])
    if cfg.uses_control:
        ctrl = np.zeros((1, cfg.data_dim), DTYPE) if control is None else control
        parts.append(mm(ctrl, params.wide("ctrl_w")) + w["ctrl_b"])
    h = _silu_np(mm(np.concatenate(parts, axis=1), params.wide("in_w")) + w["in_b"])
    for i in range(cfg.layers):
        h = h + _silu_np(mm(h, params.wide(f"h{i}_w")) + w[f"h{i}_b"])
    ab = schedule.alpha_bars[np.asarray([t])].reshape(1, 1)
    resid = mm(h, params.wide("out_w")) + w["out_b"]
    gain = np.exp(mm(temb, params.wide("skip_w")))
    return resid * np.sqrt(ab).astype(DTYPE) + x * (gain * np.sqrt(1.0 - ab).astype(DTYPE))


def _check_cond(params: DenoiserParams, cond: Conditioning) -> None:
    cfg = params.config
    if not 0 <= cond.scene_code < cfg.scene_count:
        raise ShapeError(f"scene code {cond.scene_code} outside [0, {cfg.scene_count})")
    if cond.control is not None:
        if not cfg.uses_control:
            raise ShapeError("this model has no control input")
        if np.size(cond.control) != cfg.data_dim:
            raise ShapeError(f"control mask has {np.size(cond.control)} values, expected {cfg.data_dim}")


def branch_eps(params: DenoiserParams, z, t: int, cond: Conditioning, *,
               use_identity: bool = True, null=None, schedule: NoiseSchedule | None = None):
    """One unguided network evaluation; returns a Tensor shaped like ``z``.

    With ``use_identity=False`` (or no identity in ``cond``) the NULL token,
    or ``null`` if given, fills the identity slot.
    """
    cfg = params.config
    z = tn.as_tensor(z)
    if z.shape != (cfg.image_size, cfg.image_size):
        raise ShapeError(f"latent shape {z.shape} does not match model ({cfg.image_size}x{cfg.image_size})")
    schedule = schedule or default_schedule()
    T = schedule.T
    if not 1 <= t <= T:
        raise ShapeError(f"timestep {t} outside [1, {T}]")
    _check_cond(params, cond)
    feats = None
    if use_identity and cond.identity is not None and cfg.uses_identity:
        feats = cond.identity.features()[None, :]
    ctrl = None if cond.control is None else np.asarray(cond.control, DTYPE).reshape(1, -1)
    tracked = isinstance(null, Tensor) and null.requires_grad
    if not (tracked or (tn.tape_active() and z.requires_grad)):
        # inference: no graph, no per-op wrapping
        if isinstance(null, Tensor):
            null = null.data
        out = _infer(params, z.data.reshape(1, cfg.data_dim), t, cond.scene_code,
                     id_features=feats, null=null, control=ctrl, schedule=schedule)
        return Tensor(out.reshape(z.shape), _op="branch_eps")
    out = _forward(
        params, params.tensors, tn.reshape(z, (1, cfg.data_dim)), [t], [cond.scene_code],
        id_features=feats, id_keep=np.ones((1, 1)), null=null, control=ctrl, schedule=schedule,
    )
    return tn.reshape(out, z.shape)


def predict_eps(params: DenoiserParams, z, t: int, cond: Conditioning,
                schedule: NoiseSchedule | None = None) -> np.ndarray:
    """Guided noise prediction.

    With ``guidance == 1`` only the conditional branch runs. Otherwise both
    the NULL-token branch and the conditional branch are evaluated and
    combined with classifier-free guidance.
    """
    cond_eps = branch_eps(params, z, t, cond, schedule=schedule)
    if cond.guidance == 1.0:
        return cond_eps.numpy()
    null_eps = branch_eps(params, z, t, cond, use_identity=False, schedule=schedule)
    return np.asarray(cfg_combine(null_eps.data, cond_eps.data, cond.guidance), dtype=DTYPE)


def predict_pair(params: DenoiserParams, z, t: int, cond: Conditioning,
                 schedule: NoiseSchedule | None = None) -> tuple[np.ndarray, np.ndarray]:
    """``(guided eps, NULL-branch eps)`` sharing one NULL evaluation."""
    null_eps = branch_eps(params, z, t, cond, use_identity=False, schedule=schedule).numpy()
    if cond.identity is None:
        return null_eps, null_eps
    cond_eps = branch_eps(params, z, t, cond, schedule=schedule).numpy()
    return np.asarray(cfg_combine(null_eps, cond_eps, cond.guidance), DTYPE), null_eps


# -- training ---------------------------------------------------------------

@dataclass
class TrainResult:
    params: DenoiserParams
    epoch_losses: list[float]
    final_loss: float
    step_losses: list[float] = field(default_factory=list, repr=False)


def _stack_dataset(config: DenoiserConfig, dataset: Sequence[Sample]):
    if not dataset:
        raise ShapeError("training needs a non-empty dataset")
    x = np.stack([np.asarray(s.image, DTYPE).reshape(-1) for s in dataset])
    if x.shape[1] != config.data_dim:
        raise ShapeError(f"images have {x.shape[1]} pixels, model expects {config.data_dim}")
    codes = np.array([s.scene_code for s in dataset], dtype=np.int64)
    if codes.min() < 0 or codes.max() >= config.scene_count:
        raise ShapeError("scene code in dataset outside the model's vocabulary")
    feats = np.stack([s.identity.features() for s in dataset])
    ctrl = np.stack([
        np.zeros(config.data_dim, DTYPE) if s.control is None
        else np.asarray(s.control, DTYPE).reshape(-1) for s in dataset
    ])
    return x, codes, feats, ctrl


def denoising_loss(params: DenoiserParams, tensors: dict, batch, rng: np.random.Generator,
                   schedule: NoiseSchedule, dropout: float, t: np.ndarray | None = None):
    x0, codes, feats, ctrl = batch
    b = x0.shape[0]
    if t is None:
        t = rng.integers(1, schedule.T + 1, size=b)
    noise = rng.standard_normal(x0.shape).astype(DTYPE)
    ab = schedule.alpha_bars[t][:, None]
    xt = (np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * noise).astype(DTYPE)
    keep = (rng.random((b, 1)) >= dropout).astype(DTYPE)
    pred = _forward(params, tensors, Tensor(xt), t, codes, id_features=feats, id_keep=keep,
                    control=ctrl if params.config.uses_control else None, schedule=schedule)
    return tn.mean(tn.square(pred - noise))


def train(config: DenoiserConfig, dataset: Sequence[Sample], *, epochs: int, lr: float,
          seed: int, batch_size: int = 128, schedule: NoiseSchedule | None = None,
          min_lr_frac: float = 0.1,
          on_epoch: Callable[[int, float], None] | None = None) -> TrainResult:
    """Minimize the standard denoising objective with Adam and cosine decay.

    The base model drops identity entirely; the personalized model replaces
    it with the NULL token at ``config.cond_dropout``. Bit-reproducible for a
    fixed seed.
    """
    if epochs < 1:
        raise ConfigError("must be >= 1", field="epochs")
    schedule = schedule or default_schedule()
    x, codes, feats, ctrl = _stack_dataset(config, dataset)
    rng = np.random.default_rng(seed)
    params = init_params(config, rng)
    names = [n for n, _ in config.tensor_shapes()]
    state = tn.AdamState.zeros_like([params.tensors[n] for n in names])
    n = len(x)
    steps_per_epoch = max(1, math.ceil(n / batch_size))
    total = epochs * steps_per_epoch
    dropout = config.cond_dropout if config.uses_identity else 1.0
    epoch_losses, step_losses = [], []
    step = 0
    for epoch in range(epochs):
        order = rng.permutation(n)
        # stratified timesteps: every epoch covers 1..T evenly, which keeps
        # the per-epoch mean from jumping with the luck of the t draw
        steps_t = rng.permutation(np.resize(np.arange(1, schedule.T + 1), n))
        acc = 0.0
        for k in range(steps_per_epoch):
            idx = order[k * batch_size:(k + 1) * batch_size]
            frac = step / max(1, total - 1)
            step_lr = lr * (min_lr_frac + (1 - min_lr_frac) * 0.5 * (1 + math.cos(math.pi * frac)))
            tensors = {name: Tensor(params.tensors[name], requires_grad=True) for name in names}
            try:
                with Tape():
                    loss = denoising_loss(params, tensors, (x[idx], codes[idx], feats[idx], ctrl[idx]),
                                          rng, schedule, dropout, steps_t[idx])
                grads = tn.backward(loss, [tensors[name] for name in names])
            except NonFiniteError as exc:
                raise DivergenceError(f"training diverged at step {step}: {exc}", step=step) from exc
            value = loss.item()
            new = tn.adam_step([params.tensors[nm] for nm in names], grads, state, step_lr)
            params.tensors = dict(zip(names, new))
            step_losses.append(value)
            acc += value
            step += 1
        epoch_losses.append(acc / steps_per_epoch)
        if on_epoch is not None:
            on_epoch(epoch, epoch_losses[-1])
        log.debug("epoch %d loss %.5f", epoch, epoch_losses[-1])
    return TrainResult(DenoiserParams(config, params.tensors), epoch_losses,
                       epoch_losses[-1], step_losses)


def evaluate_loss(params: DenoiserParams, dataset: Sequence[Sample], seed: int,
                  schedule: NoiseSchedule | None = None, repeats: int = 4) -> float:
    """Held-out denoising loss with fixed noise draws (no identity dropout)."""
    schedule = schedule or default_schedule()
    batch = _stack_dataset(params.config, dataset)
    rng = np.random.default_rng(seed)
    tensors = {k: Tensor(v) for k, v in params.tensors.items()}
    vals = [denoising_loss(params, tensors, batch, rng, schedule, 0.0).item() for _ in range(repeats)]
    return float(np.mean(vals))


# -- weight files -----------------------------------------------------------

def save_weights(params: DenoiserParams, path) -> None:
    cfg = params.config
    header = json.dumps({
        "config": asdict(cfg),
        "tensors": [[name, list(shape)] for name, shape in cfg.tensor_shapes()],
    }, sort_keys=True).encode()
    chunks = [MAGIC, struct.pack("<II", FORMAT_VERSION, len(header)), header]
    for name, _ in cfg.tensor_shapes():
        chunks.append(np.ascontiguousarray(params.tensors[name], dtype="<f4").tobytes())
    Path(path).write_bytes(b"".join(chunks))


def load_weights(path) -> DenoiserParams:
    raw = Path(path).read_bytes()
    if len(raw) < 12 or raw[:4] != MAGIC:
        raise WeightFileError(f"{path}: bad magic, not a weight file")
    version, hlen = struct.unpack_from("<II", raw, 4)
    if version != FORMAT_VERSION:
        raise WeightFileError(f"{path}: format version {version}, this build reads {FORMAT_VERSION}")
    if len(raw) < 12 + hlen:
        raise WeightFileError(f"{path}: truncated header")
    try:
        header = json.loads(raw[12:12 + hlen])
        cfg = DenoiserConfig.from_dict(header["config"])
    except (ValueError, KeyError, TypeError, ConfigError) as exc:
        raise WeightFileError(f"{path}: malformed header: {exc}") from None
    expected = [[n, list(s)] for n, s in cfg.tensor_shapes()]
    if header.get("tensors") != expected:
        raise WeightFileError(f"{path}: tensor table does not match the config")
    offset = 12 + hlen
    tensors = {}
    for name, shape in cfg.tensor_shapes():
        count = int(np.prod(shape))
        end = offset + 4 * count
        if end > len(raw):
            raise WeightFileError(f"{path}: truncated while reading {name}")
        tensors[name] = np.frombuffer(raw, dtype="<f4", count=count, offset=offset).astype(DTYPE).reshape(shape)
        offset = end
    if offset != len(raw):
        raise WeightFileError(f"{path}: {len(raw) - offset} trailing bytes")
    return DenoiserParams(cfg, tensors)


def file_digest(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
