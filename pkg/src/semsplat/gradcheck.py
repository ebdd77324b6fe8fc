"""Central finite-difference verification of every analytic gradient class."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .codec import FeatureCodec
from .core import Camera, GaussianCloud, look_at, normalize_quaternions
from .deformation import DeformationField, deform, deform_backward
from .raster import RenderSettings, render, render_backward

CLASSES = ("position", "log_scale", "rotation", "opacity_logit", "color", "feature",
           "deformation_grid", "deformation_mlp", "codec_mlp")
TOLERANCE = 1e-4
STEP = 1e-6
FLOOR = 1e-3  # relative-error denominator floor, as a fraction of the class's largest gradient


@dataclass
class ClassResult:
    max_rel_error: float
    n_checked: int
    max_abs_grad: float


@dataclass
class GradReport:
    seed: int
    results: dict = field(default_factory=dict)
    tolerance: float = TOLERANCE

    @property
    def passed(self) -> bool:
        return all(r.max_rel_error < self.tolerance for r in self.results.values())

    def table(self) -> str:
        lines = [f"{'class':<18} {'max rel err':>12} {'checked':>8}  status"]
        for name, r in self.results.items():
            ok = "ok" if r.max_rel_error < self.tolerance else "FAIL"
            lines.append(f"{name:<18} {r.max_rel_error:12.3e} {r.n_checked:8d}  {ok}")
        return "\n".join(lines)


@dataclass
class GradScene:
    cloud: GaussianCloud
    field: DeformationField
    camera: Camera
    time: float
    background: np.ndarray
    w_color: np.ndarray
    w_feature: np.ndarray
    w_alpha: np.ndarray


def random_scene(seed: int, n_gaussians: int = 20, size: int = 16, feature_dim: int = 3) -> GradScene:
    """Small float64 scene with a non-trivial deformation field and a random linear loss."""
    rng = np.random.default_rng(seed)
    n = n_gaussians
    pos = rng.uniform([-0.8, -0.8, -0.6], [0.8, 0.8, 0.6], size=(n, 3))
    cloud = GaussianCloud(pos, rng.uniform(-2.3, -1.2, (n, 3)), normalize_quaternions(rng.normal(size=(n, 4))),
                          rng.uniform(-1.0, 2.0, n), rng.uniform(0.05, 0.95, (n, 3)),
                          rng.normal(size=(n, feature_dim)), dtype=np.float64)
    fld = DeformationField((-1.2, -1.2, -1.0), (1.2, 1.2, 1.0), (4, 4, 4, 3), channels=4, hidden=8,
                           rng=rng, grid_init=0.5, dtype=np.float64)
    for name in ("head_position", "head_rotation", "head_scale"):
        fld.params[name + "_w"] = rng.normal(scale=0.1, size=fld.params[name + "_w"].shape)
        fld.params[name + "_b"] = rng.normal(scale=0.05, size=fld.params[name + "_b"].shape)
    R, t = look_at((0.3, -0.2, -3.0), (0.0, 0.0, 0.0))
    cam = Camera(18.0, 18.0, size / 2, size / 2, size, size, R, t)
    return GradScene(cloud, fld, cam, float(rng.uniform(0.1, 0.9)), rng.uniform(0, 1, 3),
                     rng.normal(size=(size, size, 3)), rng.normal(size=(size, size, feature_dim)),
                     rng.normal(size=(size, size)))


_SETTINGS = RenderSettings(f64=True)


def scene_loss(scene: GradScene) -> float:
    state = deform(scene.field, scene.cloud, scene.time) if len(scene.cloud) else None
    out = render(scene.cloud, state, scene.camera, scene.background, _SETTINGS)
    return float(np.sum(out.color * scene.w_color) + np.sum(out.feature * scene.w_feature)
                 + np.sum(out.alpha * scene.w_alpha))


def scene_gradients(scene: GradScene) -> dict:
    cloud, fld = scene.cloud, scene.field
    if len(cloud) == 0:
        return {"cloud": {k: np.zeros_like(v) for k, v in cloud.params().items()},
                "field": {k: np.zeros_like(v) for k, v in fld.params.items()}}
    state, cache = deform(fld, cloud, scene.time, return_cache=True)
    out = render(cloud, state, scene.camera, scene.background, _SETTINGS)
    g = render_backward(cloud, state, scene.camera, out, scene.w_color, scene.w_feature, scene.w_alpha,
                        scene.background, _SETTINGS)
    g_field, g_geo = deform_backward(fld, cloud, cache, g.deformed)
    g_cloud = {"position": g_geo["position"], "log_scale": g_geo["log_scale"], "rotation": g_geo["rotation"],
               "opacity_logit": g.opacity_logit, "color": g.color, "feature": g.feature}
    return {"cloud": g_cloud, "field": g_field}


def _compare(array, analytic, loss_fn: Callable[[], float], rng, n_zero_samples=32):
    """Finite differences on every coordinate with a nonzero analytic gradient plus a sample of the rest."""
    flat = array.reshape(-1)
    a_flat = np.asarray(analytic, dtype=np.float64).reshape(-1)
    nonzero = np.flatnonzero(a_flat != 0)
    zero = np.flatnonzero(a_flat == 0)
    if len(zero) > n_zero_samples:
        zero = rng.choice(zero, n_zero_samples, replace=False)
    idx = np.sort(np.concatenate([nonzero, zero]))
    fd = np.empty(len(idx))
    for j, i in enumerate(idx):
        orig = flat[i]
        flat[i] = orig + STEP
        up = loss_fn()
        flat[i] = orig - STEP
        down = loss_fn()
        flat[i] = orig
        fd[j] = (up - down) / (2 * STEP)
    return a_flat[idx], fd


def _rel_errors(pairs):
    an = np.concatenate([p[0] for p in pairs]) if pairs else np.zeros(0)
    fd = np.concatenate([p[1] for p in pairs]) if pairs else np.zeros(0)
    if len(an) == 0:
        return ClassResult(0.0, 0, 0.0)
    floor = max(FLOOR * np.max(np.abs(fd)), 1e-12)
    rel = np.abs(an - fd) / np.maximum(np.maximum(np.abs(an), np.abs(fd)), floor)
    return ClassResult(float(rel.max()), len(an), float(np.max(np.abs(an))))


def check_codec(seed: int, corrupt: Optional[str] = None) -> ClassResult:
    rng = np.random.default_rng(seed + 101)
    codec = FeatureCodec(6, 3, hidden=(5,), seed=seed)
    phi = rng.normal(size=(7, 6))
    params = codec.params()
    for v in params.values():
        v += rng.normal(scale=0.05, size=v.shape)  # move biases off zero
    codec.set_params(params)
    params = codec.params()
    _, grads = codec.reconstruction_loss(phi, "l2", with_grad=True)
    pairs = []
    for name, p in params.items():
        g = grads[name] * (1.01 if corrupt == "codec_mlp" else 1.0)
        pairs.append(_compare(p, g, lambda: codec.reconstruction_loss(phi, "l2"), rng))
    return _rel_errors(pairs)


def check_gradients(seed: int, n_gaussians: int = 20, size: int = 16, corrupt: Optional[str] = None) -> GradReport:
    """Compare analytic and central-difference gradients on one random scene.

    ``corrupt`` names a class whose analytic gradient is deliberately scaled
    by 1.01, as a negative control for the checker itself.
    """
    if corrupt is not None and corrupt not in CLASSES:
        raise ValueError(f"unknown gradient class {corrupt!r}")
    scene = random_scene(seed, n_gaussians, size)
    rng = np.random.default_rng(seed + 202)
    grads = scene_gradients(scene)
    loss = lambda: scene_loss(scene)  # noqa: E731
    report = GradReport(seed)
    factor = lambda name: 1.01 if corrupt == name else 1.0  # noqa: E731
    for name in ("position", "log_scale", "rotation", "opacity_logit", "color", "feature"):
        arr = getattr(scene.cloud, name)
        report.results[name] = _rel_errors([_compare(arr, grads["cloud"][name] * factor(name), loss, rng)])
    report.results["deformation_grid"] = _rel_errors(
        [_compare(scene.field.params["grid"], grads["field"]["grid"] * factor("deformation_grid"), loss, rng)])
    report.results["deformation_mlp"] = _rel_errors(
        [_compare(scene.field.params[k], grads["field"][k] * factor("deformation_mlp"), loss, rng)
         for k in scene.field.mlp_names()])
    report.results["codec_mlp"] = check_codec(seed, corrupt)
    return report


def check_many(seeds, **kw):
    return [check_gradients(s, **kw) for s in seeds]
