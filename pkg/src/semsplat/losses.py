"""Stage-gated anchor regularization and texture-adaptive masked photometric loss."""
from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .core import GEOMETRY_NAMES, PARAM_NAMES, GaussianCloud


class MissingAnchor(ValueError):
    pass


class EmptyImage(ValueError):
    pass


class ShapeMismatch(ValueError):
    pass


class MaskUnavailable(ValueError):
    pass


class Stage(enum.Enum):
    COARSE = "coarse"
    FINE = "fine"


class StageGate:
    """Coarse -> Fine indicator pair; the switch happens at most once."""

    def __init__(self, stage: Stage = Stage.COARSE):
        self.stage = Stage(stage)

    @property
    def theta_c(self) -> float:
        return 1.0 if self.stage is Stage.COARSE else 0.0

    @property
    def theta_f(self) -> float:
        return 1.0 - self.theta_c

    def advance(self):
        if self.stage is Stage.FINE:
            raise RuntimeError("stage gate already in the fine stage")
        self.stage = Stage.FINE

    def __repr__(self):
        return f"StageGate({self.stage.value})"


@dataclass
class AnchorConfig:
    base: float = 0.1
    growth: float = 1.5
    cap_multiplier: float = 10.0

    def __post_init__(self):
        if self.growth < 1.0:
            raise ValueError("growth factor must be >= 1 so older generations are held harder")


@dataclass
class GuidanceConfig:
    alpha: float = 10.0
    beta: float = 0.01
    edge_operator: str = "sobel"
    edge_threshold: float = 0.25
    region_loss: str = "l1"
    region_norm: str = "mean"

    def __post_init__(self):
        if self.alpha <= 0:
            raise ValueError("alpha must be positive")
        if self.beta < 0:
            raise ValueError("beta must be non-negative")


def anchor_record(cloud: GaussianCloud) -> GaussianCloud:
    """Snapshot every live parameter as the cloud's anchor (in place)."""
    cloud.anchors = {name: getattr(cloud, name).copy() for name in PARAM_NAMES}
    return cloud


def anchor_strength(cloud: GaussianCloud, cfg: AnchorConfig) -> np.ndarray:
    age = cloud.round - cloud.generation
    return np.minimum(cfg.base * cfg.cap_multiplier, cfg.base * cfg.growth ** age.astype(np.float64))


def anchor_loss(cloud: GaussianCloud, gate: StageGate, cfg: AnchorConfig):
    """Per-Gaussian weighted squared deviation from the anchors.

    Coarse stage constrains geometry and color, fine stage only the semantic
    feature. Each property contributes the mean over its coordinates.
    Returns ``(loss, grads)`` with grads keyed by parameter name.
    """
    if cloud.anchors is None:
        if len(cloud) == 0:
            return 0.0, {name: np.zeros_like(getattr(cloud, name)) for name in PARAM_NAMES}
        raise MissingAnchor("anchor_record must run before anchor_loss")
    lam = anchor_strength(cloud, cfg)
    names = GEOMETRY_NAMES if gate.stage is Stage.COARSE else ("feature",)
    loss = 0.0
    grads = {name: np.zeros_like(getattr(cloud, name)) for name in PARAM_NAMES}
    for name in names:
        live = np.asarray(getattr(cloud, name), dtype=np.float64)
        dev = live - cloud.anchors[name]
        if dev.ndim == 1:
            dev = dev[:, None]
        k = dev.shape[1]
        loss += float(np.sum(lam * np.mean(dev * dev, axis=1)))
        grads[name] = (2.0 * lam[:, None] * dev / k).reshape(live.shape).astype(cloud.dtype)
    return loss, grads


LUMA = np.array([0.299, 0.587, 0.114])


def to_gray(image):
    image = np.asarray(image, dtype=np.float64)
    return image @ LUMA if image.ndim == 3 else image


def sobel_magnitude(gray):
    p = np.pad(np.asarray(gray, dtype=np.float64), 1, mode="edge")
    gx = (p[:-2, 2:] + 2.0 * p[1:-1, 2:] + p[2:, 2:]) - (p[:-2, :-2] + 2.0 * p[1:-1, :-2] + p[2:, :-2])
    gy = (p[2:, :-2] + 2.0 * p[2:, 1:-1] + p[2:, 2:]) - (p[:-2, :-2] + 2.0 * p[:-2, 1:-1] + p[:-2, 2:])
    return np.sqrt(gx * gx + gy * gy)


def sobel_edges(image, threshold=0.25):
    """Binary edges: Sobel magnitude at or above ``threshold`` times the image maximum."""
    mag = sobel_magnitude(to_gray(image))
    peak = mag.max()
    if peak <= 0:
        return np.zeros(mag.shape, dtype=bool)
    return mag >= threshold * peak


EDGE_OPERATORS: dict[str, Callable] = {"sobel": sobel_edges}


def texture_density(images, cfg: GuidanceConfig | None = None, operator: Optional[Callable] = None) -> float:
    """Mean fraction of edge pixels over a list of images."""
    cfg = cfg or GuidanceConfig()
    images = list(images)
    if not images:
        raise EmptyImage("texture density needs at least one image")
    op = operator or EDGE_OPERATORS[cfg.edge_operator]
    fractions = []
    for img in images:
        img = np.asarray(img)
        if img.size == 0:
            raise EmptyImage("empty image")
        edges = op(img, cfg.edge_threshold) if operator is None else op(img)
        fractions.append(np.count_nonzero(edges) / (img.shape[0] * img.shape[1]))
    return float(np.mean(fractions))


def adaptive_lambda(density: float, cfg: GuidanceConfig | None = None) -> float:
    cfg = cfg or GuidanceConfig()
    return float(1.0 / (1.0 + np.exp(-cfg.alpha * (density - cfg.beta))))


def _region_loss(diff, region, kind, norm):
    count = region.sum() * diff.shape[-1]
    if count == 0:
        return 0.0, np.zeros_like(diff)
    denom = count if norm == "mean" else 1.0
    d = diff * region[..., None]
    if kind == "l1":
        return float(np.abs(d).sum() / denom), np.sign(d) / denom
    if kind == "l2":
        return float((d * d).sum() / denom), 2.0 * d / denom
    raise ValueError(f"unknown region loss {kind!r}")


def masked_image_loss(rendered, target, mask, lam: float, cfg: GuidanceConfig | None = None):
    """Weighted sum of the in-mask and out-of-mask photometric losses.

    Each region's loss is normalized by its own entry count, so with
    ``lam = 0.5`` and a half-covering mask this is the plain mean L1.
    Returns ``(loss, d loss / d rendered)``.
    """
    cfg = cfg or GuidanceConfig()
    rendered = np.asarray(rendered, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    mask = np.asarray(mask)
    if rendered.shape != target.shape or mask.shape != rendered.shape[:2]:
        raise ShapeMismatch(f"rendered {rendered.shape}, target {target.shape}, mask {mask.shape}")
    inside = mask.astype(bool)
    diff = rendered - target
    l_in, g_in = _region_loss(diff, inside, cfg.region_loss, cfg.region_norm)
    l_out, g_out = _region_loss(diff, ~inside, cfg.region_loss, cfg.region_norm)
    return lam * l_in + (1.0 - lam) * l_out, lam * g_in + (1.0 - lam) * g_out


def l1_loss(rendered, target):
    diff = np.asarray(rendered, dtype=np.float64) - np.asarray(target, dtype=np.float64)
    return float(np.mean(np.abs(diff))), np.sign(diff) / diff.size


class GroundTruthMask:
    """Foreground mask source that reads the generator's mask."""


GROUND_TRUTH = GroundTruthMask()


def foreground_mask(frame, source=GROUND_TRUTH) -> np.ndarray:
    """Binary foreground mask for a frame from ground truth or a relevance query.

    Any source other than :data:`GROUND_TRUTH` must provide ``mask(frame)``
    (see :class:`semsplat.semantics.RelevanceQuery`).
    """
    if isinstance(source, GroundTruthMask):
        mask = getattr(frame, "mask", None)
        if mask is None:
            raise MaskUnavailable("frame carries no ground-truth mask")
        return np.asarray(mask).astype(bool)
    if not hasattr(source, "mask"):
        raise MaskUnavailable(f"unsupported mask source {source!r}")
    return np.asarray(source.mask(frame)).astype(bool)
