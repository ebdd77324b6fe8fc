"""Two-stage optimization: static coarse stage, then deformation + semantics + guidance."""
from __future__ import annotations

import collections
import json
import logging
import dataclasses
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Callable, Optional

import numpy as np
from scipy.spatial import cKDTree

from . import checkpoint as ckpt_io
from .codec import CodecConfig, FeatureCodec, train_codec
from .core import PARAM_NAMES, GaussianCloud, random_cloud
from .deformation import DeformationField, deform, deform_backward, tv_loss
from .losses import (AnchorConfig, GuidanceConfig, Stage, StageGate, adaptive_lambda, anchor_loss,
                     anchor_record, foreground_mask, l1_loss, masked_image_loss, texture_density)
from .metrics import psnr
from .optim import Adam
from .raster import RenderSettings, render, render_backward
from .synth import LEVELS, SceneDataset, sample_primitive_points

log = logging.getLogger(__name__)


class ConfigError(ValueError):
    pass


class NumericalFailure(RuntimeError):
    pass


@dataclass
class TrainConfig:
    coarse_iters: int = 5000
    fine_iters: int = 15000
    # loss weights
    lambda_mask: float = 1.0
    lambda_anchor: float = 1.0
    lambda_semantic: float = 0.1
    lambda_tv: float = 1.0
    # learning rates (position decays exponentially over the whole run)
    lr_position: float = 1.6e-3
    lr_position_final: float = 1.6e-4
    lr_log_scale: float = 5e-3
    lr_rotation: float = 1e-3
    lr_opacity: float = 0.05
    lr_color: float = 5e-3
    lr_feature: float = 5e-3
    lr_deform_grid: float = 1.6e-3
    lr_deform_mlp: float = 1.6e-3
    lr_deform_final_ratio: float = 0.1
    batch_size: int = 2
    # densification
    densify_interval: int = 500
    densify_grad_threshold: float = 2e-4
    prune_opacity: float = 0.005
    clone_scale_fraction: float = 0.01
    split_factor: float = 1.6
    max_gaussians: int = 4000
    # initialization
    n_init: int = 2000
    init: str = "primitives"        # "primitives" or "random"
    init_opacity: float = 0.1
    # switches for the two regularizers
    hgf: bool = True
    hgg: bool = True
    anchor_base: float = 0.1
    anchor_growth: float = 1.5
    anchor_cap_multiplier: float = 10.0
    anchor_reduction: str = "mean"  # "sum" or "mean" over Gaussians
    guidance_alpha: float = 10.0
    guidance_beta: float = 0.01
    edge_threshold: float = 0.25
    # deformation field
    deform_resolution: tuple = (16, 16, 16, 8)
    deform_channels: int = 16
    deform_hidden: int = 64
    # codec
    latent_dim: int = 8
    codec_iters: int = 3000
    # bookkeeping
    eval_every: int = 500
    checkpoint_every: int = 0
    history: int = 1000
    seed: int = 0
    f64: bool = False

    def __post_init__(self):
        self.deform_resolution = tuple(int(r) for r in self.deform_resolution)
        for name in ("coarse_iters", "fine_iters", "densify_interval", "eval_every", "checkpoint_every",
                     "n_init", "codec_iters"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0")
        for name in ("lambda_mask", "lambda_anchor", "lambda_semantic", "lambda_tv"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.init not in ("primitives", "random"):
            raise ConfigError(f"unknown init {self.init!r}")
        if self.anchor_reduction not in ("sum", "mean"):
            raise ConfigError(f"unknown anchor_reduction {self.anchor_reduction!r}")

    @property
    def total_iters(self):
        return self.coarse_iters + self.fine_iters

    @property
    def anchor(self) -> AnchorConfig:
        return AnchorConfig(self.anchor_base, self.anchor_growth, self.anchor_cap_multiplier)

    @property
    def guidance(self) -> GuidanceConfig:
        return GuidanceConfig(alpha=self.guidance_alpha, beta=self.guidance_beta, edge_threshold=self.edge_threshold)

    @property
    def render_settings(self) -> RenderSettings:
        return RenderSettings(f64=self.f64)

    @property
    def dtype(self):
        return np.float64 if self.f64 else np.float32

    def to_dict(self):
        d = asdict(self)
        d["deform_resolution"] = list(self.deform_resolution)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name: f for f in fields(cls)}
        unknown = set(d) - set(known)
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        out = {}
        for k, v in d.items():
            default = known[k].default
            if isinstance(default, bool):
                if not isinstance(v, bool):
                    raise ConfigError(f"{k} must be true/false")
            elif isinstance(default, (int, float)) and not isinstance(default, bool):
                if isinstance(v, bool) or not isinstance(v, (int, float)):
                    raise ConfigError(f"{k} must be a number")
                v = type(default)(v) if isinstance(default, float) or float(v).is_integer() else v
            out[k] = v
        return cls(**out)

    @classmethod
    def load(cls, path) -> "TrainConfig":
        try:
            return cls.from_dict(json.loads(Path(path).read_text()))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from exc


@dataclass
class TrainState:
    cloud: GaussianCloud
    field: DeformationField
    gate: StageGate
    optimizer: Adam
    field_optimizer: Adam
    rng: np.random.Generator
    iteration: int = 0
    history: collections.deque = dataclasses.field(default_factory=lambda: collections.deque(maxlen=1000))
    grad_accum: Optional[np.ndarray] = None
    grad_count: Optional[np.ndarray] = None
    n_densify: int = 0
    n_anchor_refresh: int = 0

    def reset_grad_stats(self):
        self.grad_accum = np.zeros(len(self.cloud))
        self.grad_count = np.zeros(len(self.cloud))


@dataclass
class SceneContext:
    """Per-scene constants shared by every step."""

    latent_table: np.ndarray          # (classes, n) encoded codebook rows
    lam_mask: float                   # adaptive inside-mask weight
    density: float
    extent: float
    background: np.ndarray = dataclasses.field(default_factory=lambda: np.zeros(3))


@dataclass
class TrainResult:
    state: TrainState
    codec: FeatureCodec
    context: SceneContext
    log: list
    config: TrainConfig

    @property
    def cloud(self):
        return self.state.cloud

    @property
    def field(self):
        return self.state.field

    def checkpoint(self) -> ckpt_io.Checkpoint:
        return make_checkpoint(self.state, self.codec, self.config, self.context)


def make_checkpoint(state: TrainState, codec, config: TrainConfig, ctx: SceneContext) -> ckpt_io.Checkpoint:
    meta = {"iteration": state.iteration, "stage": state.gate.stage.value, "config": config.to_dict(),
            "lambda_mask": ctx.lam_mask, "texture_density": ctx.density, "extent": ctx.extent}
    return ckpt_io.Checkpoint(state.cloud, state.field, codec, meta)


# --- initialization -----------------------------------------------------------

def _logit(p):
    return float(np.log(p / (1.0 - p)))


def initial_cloud(dataset: SceneDataset, config: TrainConfig, rng: np.random.Generator) -> GaussianCloud:
    dt = config.dtype
    if config.init == "random":
        cloud = random_cloud(config.n_init, rng, config.latent_dim, bbox=((-2.5, -2, -1.5), (2.5, 2, 1.6)), dtype=dt)
        cloud.opacity_logit[:] = _logit(config.init_opacity)
        return cloud
    pts, cols, _ = sample_primitive_points(dataset.spec, config.n_init, rng)
    k = min(4, len(pts))
    if k > 1:
        dist, _ = cKDTree(pts).query(pts, k=k)
        d2 = np.mean(dist[:, 1:] ** 2, axis=1)
    else:
        d2 = np.full(len(pts), 1e-2)
    log_scale = np.repeat(0.5 * np.log(np.maximum(d2, 1e-7))[:, None], 3, axis=1)
    n = len(pts)
    rot = np.zeros((n, 4))
    rot[:, 0] = 1.0
    return GaussianCloud(pts, log_scale, rot, np.full(n, _logit(config.init_opacity)), cols,
                         np.zeros((n, config.latent_dim)), dtype=dt)


def scene_extent(dataset: SceneDataset) -> float:
    centers = np.array([f.camera.center for f in dataset.train_frames])
    mid = centers.mean(axis=0)
    return float(1.1 * max(np.linalg.norm(centers - mid, axis=1).max(), 1.0))


def scene_bbox(cloud: GaussianCloud, margin=0.5):
    lo = cloud.position.min(axis=0) - margin
    hi = cloud.position.max(axis=0) + margin
    return lo, hi


def build_context(dataset: SceneDataset, codec: FeatureCodec, config: TrainConfig) -> SceneContext:
    images = [f.image for f in dataset.train_frames]
    density = texture_density(images, config.guidance)
    return SceneContext(
        latent_table=codec.encode(dataset.codebook),
        lam_mask=adaptive_lambda(density, config.guidance),
        density=density,
        extent=scene_extent(dataset),
    )


def init_state(dataset: SceneDataset, config: TrainConfig) -> TrainState:
    rng = np.random.default_rng(config.seed)
    cloud = initial_cloud(dataset, config, rng)
    lo, hi = scene_bbox(cloud)
    fld = DeformationField(lo, hi, config.deform_resolution, config.deform_channels, config.deform_hidden,
                           rng=np.random.default_rng(config.seed + 1), dtype=config.dtype)
    anchor_record(cloud)
    state = TrainState(cloud, fld, StageGate(), Adam(), Adam(), rng,
                       history=collections.deque(maxlen=config.history))
    state.n_anchor_refresh = 1
    state.reset_grad_stats()
    return state


# --- loss -----------------------------------------------------------------------

def _zero_grads(cloud):
    return {name: np.zeros(getattr(cloud, name).shape, dtype=np.float64) for name in PARAM_NAMES}


def semantic_loss(rendered_feature, frame, latent_table):
    """Sum over scales of the mean L1 between rendered and target latent features."""
    total, grad = 0.0, np.zeros_like(rendered_feature, dtype=np.float64)
    for lvl in LEVELS:
        target = latent_table[frame.classes[lvl]]
        loss, g = l1_loss(rendered_feature, target)
        total += loss
        grad += g
    return total, grad


def total_loss(state: TrainState, batch, ctx: SceneContext, config: TrainConfig, with_grad: bool = True):
    """Weighted loss over a batch of frames and its gradients.

    Per-view terms (photometric, semantic) are averaged over the batch;
    the anchor and TV terms are added once.

    Returns ``(loss, components, cloud_grads, field_grads, mean2d_norms)``
    where ``mean2d_norms`` is a list of (norm, visible) pairs per view.
    """
    cloud, fld = state.cloud, state.field
    fine = state.gate.stage is Stage.FINE
    settings = config.render_settings
    comps = {"photometric": 0.0, "semantic": 0.0, "anchor": 0.0, "tv": 0.0}
    g_cloud = _zero_grads(cloud)
    g_field = {k: np.zeros(v.shape, dtype=np.float64) for k, v in fld.params.items()}
    screen = []
    nb = len(batch)
    for frame in batch:
        if fine:
            dstate, cache = deform(fld, cloud, frame.time, return_cache=True)
        else:
            dstate, cache = None, None
        out = render(cloud, dstate, frame.camera, ctx.background, settings)
        if fine and config.hgg:
            mask = foreground_mask(frame)
            photo, g_img = masked_image_loss(out.color, frame.image, mask, ctx.lam_mask, config.guidance)
        else:
            photo, g_img = l1_loss(out.color, frame.image)
        comps["photometric"] += photo / nb
        g_feat = None
        if fine and config.lambda_semantic > 0:
            sem, g_feat = semantic_loss(out.feature, frame, ctx.latent_table)
            comps["semantic"] += sem / nb
            g_feat = g_feat * (config.lambda_semantic / nb)
        if not with_grad:
            continue
        g = render_backward(cloud, dstate, frame.camera, out, g_img * (config.lambda_mask / nb), g_feat, None,
                            ctx.background, settings)
        screen.append((np.asarray(g.mean2d_norm, dtype=np.float64) * nb / max(config.lambda_mask, 1e-12),
                       out._proj["visible"] if out._proj and "visible" in out._proj else np.zeros(len(cloud), bool)))
        for name in ("opacity_logit", "color", "feature"):
            g_cloud[name] += getattr(g, name)
        if fine:
            gf, gc = deform_backward(fld, cloud, cache, g.deformed)
            for k, v in gf.items():
                g_field[k] += v
            for k, v in gc.items():
                g_cloud[k] += v
        else:
            for name in ("position", "log_scale", "rotation"):
                g_cloud[name] += getattr(g, name)
    if config.hgf and config.lambda_anchor > 0 and len(cloud):
        a_loss, a_grads = anchor_loss(cloud, state.gate, config.anchor)
        scale = config.lambda_anchor / (len(cloud) if config.anchor_reduction == "mean" else 1.0)
        comps["anchor"] = a_loss / (len(cloud) if config.anchor_reduction == "mean" else 1.0)
        for k, v in a_grads.items():
            g_cloud[k] += scale * v
    if fine and config.lambda_tv > 0:
        t_loss, t_grad = tv_loss(fld, with_grad=True)
        comps["tv"] = t_loss
        g_field["grid"] += config.lambda_tv * t_grad
    loss = (config.lambda_mask * comps["photometric"] + config.lambda_anchor * comps["anchor"] * config.hgf
            + config.lambda_semantic * comps["semantic"] + config.lambda_tv * comps["tv"])
    return loss, comps, g_cloud, g_field, screen


# --- densification --------------------------------------------------------------

def _quat_rotate(q, v):
    w, x, y, z = q.T
    R = np.stack([
        np.stack([1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)], -1),
        np.stack([2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)], -1),
        np.stack([2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)], -1),
    ], -2)
    return np.einsum("nij,nj->ni", R, v)


def densify_and_prune(state: TrainState, config: TrainConfig, extent: float, signal: Optional[np.ndarray] = None):
    """Clone/split high-gradient Gaussians, prune transparent ones, refresh anchors.

    ``signal`` defaults to the mean screen-space gradient accumulated since the
    last event. Optimizer moments follow every Gaussian; newcomers start at zero.
    Returns a dict with counts of cloned, split and pruned Gaussians.
    """
    cloud = state.cloud
    n = len(cloud)
    if n == 0:
        return {"cloned": 0, "split": 0, "pruned": 0}
    if signal is None:
        signal = state.grad_accum / np.maximum(state.grad_count, 1)
    signal = np.asarray(signal, dtype=np.float64)
    new_round = cloud.round + 1
    chosen = np.flatnonzero(signal >= config.densify_grad_threshold)
    room = max(config.max_gaussians - n, 0)
    if len(chosen) > room:
        # keep the strongest; ties resolved by index
        order = np.lexsort((chosen, -signal[chosen]))
        chosen = np.sort(chosen[order[:room]])
    big = cloud.scale().max(axis=1) > config.clone_scale_fraction * extent
    clone_idx = chosen[~big[chosen]]
    split_idx = chosen[big[chosen]]
    params = {name: getattr(cloud, name) for name in PARAM_NAMES}
    new_parts = {name: [] for name in PARAM_NAMES}
    src = []
    if len(clone_idx):
        for name in PARAM_NAMES:
            new_parts[name].append(params[name][clone_idx])
        src.append(clone_idx)
    if len(split_idx):
        stds = cloud.scale()[split_idx].astype(np.float64)
        for _ in range(2):
            offs = state.rng.normal(size=stds.shape) * stds
            pos = cloud.position[split_idx] + _quat_rotate(cloud.rotation[split_idx].astype(np.float64), offs)
            new_parts["position"].append(pos.astype(cloud.dtype))
            new_parts["log_scale"].append((cloud.log_scale[split_idx] - np.log(config.split_factor))
                                          .astype(cloud.dtype))
            for name in ("rotation", "opacity_logit", "color", "feature"):
                new_parts[name].append(params[name][split_idx])
            src.append(split_idx)
    keep = np.ones(n, dtype=bool)
    keep[split_idx] = False
    keep &= cloud.opacity() >= config.prune_opacity
    kept = np.flatnonzero(keep)
    n_new = sum(len(s) for s in src)
    merged = {}
    for name in PARAM_NAMES:
        parts = [params[name][kept]] + new_parts[name]
        merged[name] = np.concatenate(parts) if n_new else params[name][kept]
    generation = np.concatenate([cloud.generation[kept], np.full(n_new, new_round, dtype=np.int64)])
    new_cloud = GaussianCloud(**merged, generation=generation, round=new_round, dtype=cloud.dtype)
    new_cloud.rotation = merged["rotation"]
    anchor_record(new_cloud)
    state.optimizer.reindex(PARAM_NAMES, kept, n_new)
    state.cloud = new_cloud
    state.n_densify += 1
    state.n_anchor_refresh += 1
    state.reset_grad_stats()
    return {"cloned": int(len(clone_idx)), "split": int(len(split_idx)), "pruned": int(n - len(kept) - len(split_idx))}


# --- training loop --------------------------------------------------------------

def learning_rates(config: TrainConfig, iteration: int, stage: Stage, fine_iteration: int):
    total = max(config.total_iters, 1)
    frac = min(iteration / total, 1.0)
    pos_lr = config.lr_position * (config.lr_position_final / config.lr_position) ** frac
    lrs = {"position": pos_lr, "log_scale": config.lr_log_scale, "rotation": config.lr_rotation,
           "opacity_logit": config.lr_opacity, "color": config.lr_color, "feature": config.lr_feature}
    ffrac = min(max(fine_iteration, 0) / max(config.fine_iters, 1), 1.0)
    decay = config.lr_deform_final_ratio ** ffrac
    field_lrs = {"grid": config.lr_deform_grid * decay}
    return lrs, field_lrs, config.lr_deform_mlp * decay


def evaluate(state: TrainState, frames, ctx: SceneContext, config: TrainConfig) -> float:
    """Mean PSNR of the current model over ``frames``."""
    if not frames:
        return float("nan")
    vals = []
    for f in frames:
        vals.append(psnr(np.clip(render_frame(state, f, ctx, config).color, 0, 1), f.image))
    return float(np.mean(vals))


def render_frame(state: TrainState, frame, ctx: SceneContext, config: TrainConfig):
    dstate = deform(state.field, state.cloud, frame.time) if state.gate.stage is Stage.FINE else None
    return render(state.cloud, dstate, frame.camera, ctx.background, config.render_settings)


def _validate_dataset(dataset: SceneDataset, config: TrainConfig):
    if not dataset.train:
        raise ConfigError("dataset has no training frames")
    shapes = {f.image.shape for f in dataset.frames}
    if len(shapes) != 1:
        raise ConfigError(f"frames have inconsistent shapes {shapes}")
    if dataset.codebook.shape[0] < len(dataset.class_names):
        raise ConfigError("codebook has fewer rows than classes")


def train(dataset: SceneDataset, config: TrainConfig | None = None, codec: FeatureCodec | None = None,
          out_dir=None, callback: Optional[Callable] = None) -> TrainResult:
    """Run the coarse stage then the fine stage.

    Args:
        dataset: scene to fit.
        config: hyperparameters; defaults to :class:`TrainConfig`.
        codec: trained feature codec; trained inline on the codebook when absent.
        out_dir: optional directory for ``metrics.jsonl``, periodic and final checkpoints.
        callback: called as ``callback(state, record)`` after every iteration.
    """
    config = config or TrainConfig()
    _validate_dataset(dataset, config)
    if codec is None:
        codec, _ = train_codec(dataset.codebook, CodecConfig(latent_dim=config.latent_dim,
                                                             iterations=config.codec_iters, seed=config.seed))
    elif codec.latent_dim != config.latent_dim or codec.input_dim != dataset.codebook.shape[1]:
        raise ConfigError("codec dimensions do not match the scene and config")
    ctx = build_context(dataset, codec, config)
    state = init_state(dataset, config)
    out = Path(out_dir) if out_dir is not None else None
    log_fh = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        log_fh = open(out / "metrics.jsonl", "w")
    records = []
    train_frames = dataset.train_frames
    test_frames = dataset.test_frames
    order = []
    try:
        for it in range(config.total_iters):
            if it == config.coarse_iters and state.gate.stage is Stage.COARSE:
                state.gate.advance()
                anchor_record(state.cloud)
                state.n_anchor_refresh += 1
            fine = state.gate.stage is Stage.FINE
            if len(order) < config.batch_size:
                order.extend(state.rng.permutation(len(train_frames)).tolist())
            batch = [train_frames[order.pop(0)] for _ in range(config.batch_size)]
            loss, comps, g_cloud, g_field, screen = total_loss(state, batch, ctx, config)
            if not np.isfinite(loss):
                raise NumericalFailure(f"non-finite loss at iteration {it}")
            for norm, vis in screen:
                state.grad_accum += norm * vis
                state.grad_count += vis
            lrs, field_lrs, mlp_lr = learning_rates(config, it, state.gate.stage, it - config.coarse_iters)
            params = state.cloud.params()
            state.optimizer.step(params, {k: v.astype(state.cloud.dtype) for k, v in g_cloud.items()}, lrs)
            np.clip(state.cloud.color, 0.0, 1.0, out=state.cloud.color)
            state.cloud.renormalize()
            if fine:
                fl = {k: (field_lrs["grid"] if k == "grid" else mlp_lr) for k in g_field}
                state.field_optimizer.step(state.field.params,
                                           {k: v.astype(state.field.dtype) for k, v in g_field.items()}, fl)
            state.iteration = it + 1
            record = {"iteration": it + 1, "stage": state.gate.stage.value, "loss": loss, **comps,
                      "n_gaussians": len(state.cloud)}
            if config.densify_interval and (it + 1) % config.densify_interval == 0 and it + 1 < config.total_iters:
                record["densify"] = densify_and_prune(state, config, ctx.extent)
            if config.eval_every and ((it + 1) % config.eval_every == 0 or it + 1 == config.total_iters):
                record["psnr"] = evaluate(state, test_frames, ctx, config)
                log.info("iter %d stage %s loss %.5f psnr %.2f n=%d", it + 1, record["stage"], loss,
                         record["psnr"], len(state.cloud))
            state.history.append(loss)
            records.append(record)
            if log_fh is not None:
                log_fh.write(json.dumps(record) + "\n")
            if out is not None and config.checkpoint_every and (it + 1) % config.checkpoint_every == 0:
                ckpt_io.save(make_checkpoint(state, codec, config, ctx), out / f"checkpoint_{it + 1:06d}.bin")
            if callback is not None:
                callback(state, record)
    finally:
        if log_fh is not None:
            log_fh.close()
    result = TrainResult(state, codec, ctx, records, config)
    if out is not None:
        ckpt_io.save(result.checkpoint(), out / "checkpoint.bin")
    return result
