"""Relevance queries, segmentation, selection-based editing and top-k deformation."""
from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .codec import DimensionMismatch, FeatureCodec
from .core import Camera, DeformedState, GaussianCloud
from .deformation import DeformationField, deform
from .optim import Adam
from .raster import RenderSettings, render, render_backward


class ZeroPrompt(ValueError):
    pass


class EmptySelection(ValueError):
    pass


def _unit(v, axis=-1):
    v = np.asarray(v, dtype=np.float64)
    n = np.linalg.norm(v, axis=axis, keepdims=True)
    if np.any(n == 0):
        raise ZeroPrompt("cannot normalize a zero embedding")
    return v / n


@dataclass
class QueryContext:
    """Query and canonical embeddings (unit length) plus the segmentation threshold."""

    query: np.ndarray
    canonicals: np.ndarray
    threshold: float = 0.6

    def __post_init__(self):
        query = np.asarray(self.query, dtype=np.float64)
        canonicals = np.atleast_2d(np.asarray(self.canonicals, dtype=np.float64))
        if query.ndim != 1 or canonicals.shape[1] != query.shape[0]:
            raise DimensionMismatch(f"query {query.shape} vs canonicals {canonicals.shape}")
        both = _unit(np.vstack([query, canonicals]))
        self.query, self.canonicals = both[0], both[1:]

    @property
    def dim(self):
        return self.query.shape[0]

    @classmethod
    def from_dataset(cls, dataset, prompt: str, threshold: float = 0.6) -> "QueryContext":
        """Prompt = class name, looked up in the scene codebook."""
        if prompt not in dataset.class_names:
            raise KeyError(f"unknown prompt {prompt!r}; known classes: {dataset.class_names}")
        return cls(dataset.embedding(prompt), dataset.canonical_embeddings(), threshold)


def relevance(embedding, ctx: QueryContext) -> np.ndarray:
    """Minimum over canonical phrases of the two-way softmax towards the query.

    ``embedding`` may carry leading batch axes; the last axis is the feature.
    """
    emb = np.asarray(embedding, dtype=np.float64)
    if emb.shape[-1] != ctx.dim:
        raise DimensionMismatch(f"embedding has {emb.shape[-1]} dims, context has {ctx.dim}")
    # one reduction for query and canonicals alike, so identical directions give identical scores
    dirs = np.vstack([ctx.query, ctx.canonicals])
    scores = np.sum(emb[..., None, :] * dirs, axis=-1)
    s_q, s_c = scores[..., 0], scores[..., 1:]
    # exp(a) / (exp(a) + exp(b)) == 1 / (1 + exp(b - a)), stable for large dot products
    pair = 1.0 / (1.0 + np.exp(s_c - s_q[..., None]))
    return pair.min(axis=-1)


@dataclass
class SceneModel:
    """What queries need from a trained checkpoint."""

    cloud: GaussianCloud
    field: Optional[DeformationField]
    codec: FeatureCodec
    settings: RenderSettings = None
    background: np.ndarray = None

    def __post_init__(self):
        self.settings = self.settings or RenderSettings(f64=self.cloud.dtype == np.float64)
        self.background = np.zeros(3) if self.background is None else np.asarray(self.background, dtype=np.float64)

    @classmethod
    def from_checkpoint(cls, ckpt) -> "SceneModel":
        if ckpt.codec is None:
            raise ValueError("checkpoint has no feature codec")
        return cls(ckpt.cloud, ckpt.field, ckpt.codec)

    def deformed(self, t: float) -> Optional[DeformedState]:
        if self.field is None or len(self.cloud) == 0:
            return None
        return deform(self.field, self.cloud, t)

    def render(self, cam: Camera, t: Optional[float] = None):
        t = cam.time if t is None else t
        return render(self.cloud, self.deformed(t), cam, self.background, self.settings)


def relevance_map(model: SceneModel, cam: Camera, t: float, ctx: QueryContext,
                  scale_features: Optional[Sequence[np.ndarray]] = None):
    """Per-pixel relevance and the index of the scale that produced it.

    Rendered latent features are decoded to the codebook space before scoring.
    Each Gaussian carries one feature shared across scales, so by default a
    single scale is scored; ``scale_features`` supplies per-scale rendered
    latent maps when several are available.
    """
    if scale_features is None:
        scale_features = [model.render(cam, t).feature]
    scores = []
    for feat in scale_features:
        h, w, n = feat.shape
        decoded = model.codec.decode(feat.reshape(-1, n)).reshape(h, w, -1)
        scores.append(relevance(decoded, ctx))
    scores = np.stack(scores)
    chosen = np.argmax(scores, axis=0)
    return np.take_along_axis(scores, chosen[None], 0)[0], chosen


def segment(rel_map, threshold: float) -> np.ndarray:
    return np.asarray(rel_map) >= threshold


@dataclass
class RelevanceQuery:
    """Mask source that thresholds a relevance map (see ``losses.foreground_mask``)."""

    model: SceneModel
    ctx: QueryContext
    threshold: Optional[float] = None

    def mask(self, frame) -> np.ndarray:
        thr = self.ctx.threshold if self.threshold is None else self.threshold
        rel, _ = relevance_map(self.model, frame.camera, frame.time, self.ctx)
        return segment(rel, thr)


def cosine_similarity(features, prompt) -> np.ndarray:
    """Cosine between each feature row and the prompt; zero-norm rows score 0."""
    prompt = np.asarray(prompt, dtype=np.float64)
    pn = np.linalg.norm(prompt)
    if pn == 0:
        raise ZeroPrompt("prompt latent has zero norm")
    f = np.asarray(features, dtype=np.float64)
    fn = np.linalg.norm(f, axis=1)
    dots = f @ prompt
    out = np.zeros(len(f))
    nz = fn > 0
    out[nz] = dots[nz] / (fn[nz] * pn)
    return out


def select_gaussians(cloud: GaussianCloud, prompt_latent, threshold: float) -> np.ndarray:
    """Indices of Gaussians whose feature has cosine similarity >= threshold with the prompt."""
    sim = cosine_similarity(cloud.feature, prompt_latent)
    return np.flatnonzero(sim >= threshold)


class Action(enum.Enum):
    REMOVE = "remove"
    RECOLOR = "recolor"


@dataclass
class Recolor:
    """Photometric target for color-only optimization of a selection."""

    target: np.ndarray
    camera: Camera
    time: float = 0.0
    iterations: int = 200
    lr: float = 0.01


def remove(model: SceneModel, selection) -> SceneModel:
    selection = np.unique(np.asarray(selection, dtype=np.int64))
    if len(selection) == 0:
        return model
    keep = np.ones(len(model.cloud), dtype=bool)
    keep[selection] = False
    return SceneModel(model.cloud.subset(np.flatnonzero(keep)), model.field, model.codec, model.settings,
                      model.background)


def recolor(model: SceneModel, selection, spec: Recolor) -> SceneModel:
    """Optimize only the selected Gaussians' colors; everything else stays bit-identical."""
    selection = np.unique(np.asarray(selection, dtype=np.int64))
    if len(selection) == 0:
        raise EmptySelection("recolor needs at least one selected Gaussian")
    cloud = model.cloud.copy()
    state = model.deformed(spec.time)
    target = np.asarray(spec.target, dtype=np.float64)
    colors = {"color": cloud.color[selection].astype(np.float64)}
    opt = Adam(eps=1e-15)
    for _ in range(spec.iterations):
        cloud.color[selection] = colors["color"].astype(cloud.dtype)
        out = render(cloud, state, spec.camera, model.background, model.settings)
        diff = out.color - target
        g_img = np.sign(diff) / diff.size
        g = render_backward(cloud, state, spec.camera, out, g_img, None, None, model.background, model.settings)
        opt.step(colors, {"color": np.asarray(g.color, dtype=np.float64)[selection]}, {"color": spec.lr})
        np.clip(colors["color"], 0.0, 1.0, out=colors["color"])
    cloud.color[selection] = colors["color"].astype(cloud.dtype)
    return SceneModel(cloud, model.field, model.codec, model.settings, model.background)


def edit(model: SceneModel, selection, action, recolor_spec: Optional[Recolor] = None) -> SceneModel:
    """Apply Remove or Recolor to a copy of the model."""
    action = Action(action)
    if action is Action.REMOVE:
        return remove(model, selection)
    if recolor_spec is None:
        raise ValueError("recolor needs a Recolor target")
    return recolor(model, selection, recolor_spec)


def deformation_norms(model: SceneModel, t: float, position_only: bool = False) -> np.ndarray:
    cloud = model.cloud
    state = model.deformed(t)
    if state is None:
        return np.zeros(len(cloud))
    parts = [np.asarray(state.position, np.float64) - cloud.position]
    if not position_only:
        parts.append(np.asarray(state.rotation, np.float64) - cloud.rotation)
        parts.append(np.asarray(state.log_scale, np.float64) - cloud.log_scale)
    return np.linalg.norm(np.concatenate(parts, axis=1), axis=1)


def topk_deformation(model: SceneModel, t: float, k: int, cam: Optional[Camera] = None,
                     position_only: bool = False):
    """Indices of the ``k`` most deformed Gaussians at ``t`` (ties by index) and,
    when ``cam`` is given, a render of that sub-cloud."""
    n = len(model.cloud)
    if not 0 <= k <= n:
        raise ValueError(f"k={k} outside [0, {n}]")
    norms = deformation_norms(model, t, position_only)
    order = np.lexsort((np.arange(n), -norms))
    idx = np.sort(order[:k]) if k < n else np.arange(n)
    image = None
    if cam is not None:
        sub = model.cloud.subset(idx)
        state = model.deformed(t)
        sub_state = None if state is None else DeformedState(state.position[idx], state.rotation[idx],
                                                             state.log_scale[idx])
        image = render(sub, sub_state, cam, model.background, model.settings)
    return idx, norms, image


def fraction_in_mask(points, cam: Camera, mask) -> float:
    """Share of 3D points that project in front of the camera inside ``mask``."""
    points = np.asarray(points, dtype=np.float64)
    if len(points) == 0:
        return float("nan")
    pc = cam.world_to_camera(points)
    uv = cam.project_points(points)
    h, w = mask.shape
    px = np.floor(uv[:, 0]).astype(np.int64)
    py = np.floor(uv[:, 1]).astype(np.int64)
    ok = (pc[:, 2] > 0) & (px >= 0) & (px < w) & (py >= 0) & (py < h)
    inside = np.zeros(len(points), dtype=bool)
    inside[ok] = np.asarray(mask, dtype=bool)[py[ok], px[ok]]
    return float(inside.mean())
