"""Forward and reverse-mode rendering of color, feature and alpha images."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..core import (LOWPASS_FLOOR, NEAR_PLANE, Camera, DeformedState, GaussianCloud,
                    projection_jacobian, quaternion_matrix_vjp,
                    quaternion_to_matrix, sigmoid)
from . import _kernels

DET_EPS = 1e-12


class DegenerateCovariance(ValueError):
    pass


@dataclass
class RenderSettings:
    cull_sigma: float = 3.0
    t_stop: float = 1e-4
    near: float = NEAR_PLANE
    f64: bool = False

    @property
    def dtype(self):
        return np.float64 if self.f64 else np.float32


@dataclass
class RenderOutput:
    color: np.ndarray
    feature: np.ndarray
    alpha: np.ndarray
    transmittance: np.ndarray
    order: np.ndarray
    n_degenerate: int = 0
    # internal state reused by render_backward
    _proj: dict = field(default=None, repr=False)


@dataclass
class RenderGradients:
    position: np.ndarray
    log_scale: np.ndarray
    rotation: np.ndarray
    opacity_logit: np.ndarray
    color: np.ndarray
    feature: np.ndarray
    mean2d_norm: np.ndarray
    # gradients w.r.t. the deformed state, for chaining into the deformation field
    deformed: dict = field(default=None, repr=False)

    def as_dict(self) -> dict:
        return {k: getattr(self, k) for k in
                ("position", "log_scale", "rotation", "opacity_logit", "color", "feature")}


def _project(cloud: GaussianCloud, state: DeformedState, cam: Camera, settings: RenderSettings):
    dt = np.float64
    pos = np.asarray(state.position, dtype=dt)
    p_cam = pos @ cam.R.T + cam.t
    n = len(pos)
    visible = p_cam[:, 2] > settings.near if n else np.zeros(0, dtype=bool)
    z = np.where(visible, p_cam[:, 2], 1.0)
    pc = p_cam.copy()
    pc[:, 2] = z
    means = np.stack([cam.fx * pc[:, 0] / z + cam.cx, cam.fy * pc[:, 1] / z + cam.cy], axis=-1)
    J = projection_jacobian(pc, cam.fx, cam.fy)
    M = J @ cam.R
    Rq = quaternion_to_matrix(np.asarray(state.rotation, dtype=dt))
    scale = np.exp(np.asarray(state.log_scale, dtype=dt))
    RS = Rq * scale[:, None, :]
    cov3 = RS @ np.swapaxes(RS, -1, -2)
    cov2 = M @ cov3 @ np.swapaxes(M, -1, -2)
    cov2[:, 0, 0] += LOWPASS_FLOOR
    cov2[:, 1, 1] += LOWPASS_FLOOR
    A, B, C = cov2[:, 0, 0], cov2[:, 0, 1], cov2[:, 1, 1]
    det = A * C - B * B
    degenerate = visible & (det < DET_EPS)
    visible &= ~degenerate
    safe_det = np.where(visible, det, 1.0)
    conics = np.stack([C / safe_det, -B / safe_det, A / safe_det], axis=-1)
    rx = settings.cull_sigma * np.sqrt(np.maximum(A, 0))
    ry = settings.cull_sigma * np.sqrt(np.maximum(C, 0))
    bbox = np.stack([means[:, 0] - rx, means[:, 0] + rx, means[:, 1] - ry, means[:, 1] + ry], axis=-1)
    # off-screen culling
    on_screen = (bbox[:, 1] >= 0) & (bbox[:, 0] <= cam.width) & (bbox[:, 3] >= 0) & (bbox[:, 2] <= cam.height)
    visible &= on_screen
    idx = np.flatnonzero(visible)
    # depth ties broken by index: stable sort over increasing indices
    order = idx[np.argsort(z[idx], kind="stable")].astype(np.int64)
    opac = sigmoid(np.asarray(cloud.opacity_logit, dtype=dt))
    return dict(p_cam=pc, means=means, J=J, M=M, Rq=Rq, scale=scale, RS=RS, cov3=cov3, cov2=cov2,
                conics=conics, bbox=bbox, order=order, opac=opac, visible=visible,
                n_degenerate=int(degenerate.sum()))


def render(cloud: GaussianCloud, state: DeformedState | None, cam: Camera, background=(0.0, 0.0, 0.0),
           settings: RenderSettings | None = None) -> RenderOutput:
    """Composite the cloud front to back into color, feature and alpha images.

    ``state`` carries the (possibly deformed) geometry; ``None`` renders the
    canonical cloud. Features get no background term.
    """
    settings = settings or RenderSettings()
    state = state if state is not None else DeformedState.canonical(cloud)
    if len(state) != len(cloud):
        raise ValueError("deformed state length does not match cloud")
    dt = settings.dtype
    H, W, nf = cam.height, cam.width, cloud.feature_dim
    out_color = np.zeros((H, W, 3), dtype=dt)
    out_feat = np.zeros((H, W, nf), dtype=dt)
    out_alpha = np.zeros((H, W), dtype=dt)
    out_T = np.ones((H, W), dtype=dt)
    count = np.zeros((H, W), dtype=np.int64)
    bg = np.asarray(background, dtype=np.float64)
    if len(cloud) == 0:
        out_color[:] = bg
        return RenderOutput(out_color, out_feat, out_alpha, out_T, np.zeros(0, dtype=np.int64),
                            _proj=dict(order=np.zeros(0, dtype=np.int64), count=count))
    proj = _project(cloud, state, cam, settings)
    colors = np.ascontiguousarray(cloud.color, dtype=np.float64)
    feats = np.ascontiguousarray(cloud.feature, dtype=np.float64)
    n_chunks = (H + _kernels.ROWS_PER_CHUNK - 1) // _kernels.ROWS_PER_CHUNK
    per_pixel = min(_kernels.RECORD_SLOTS_PER_PIXEL, _kernels.RECORD_BUDGET // (H * W))
    slots = _kernels.ROWS_PER_CHUNK * W * per_pixel
    records = (np.empty((H, W), dtype=np.int64), np.empty((H, W), dtype=np.int64),
               np.empty((n_chunks, slots), dtype=np.int32), np.empty((n_chunks, slots)))
    _kernels.forward_kernel(proj["means"], proj["conics"], proj["opac"], colors, feats, proj["order"],
                            proj["bbox"], bg, H, W, settings.t_stop,
                            out_color, out_feat, out_alpha, out_T, count, *records)
    proj["count"] = count
    proj["records"] = records
    return RenderOutput(out_color, out_feat, out_alpha, out_T, proj["order"], proj["n_degenerate"], _proj=proj)


def render_backward(cloud: GaussianCloud, state: DeformedState | None, cam: Camera, out: RenderOutput,
                    grad_color=None, grad_feature=None, grad_alpha=None, background=(0.0, 0.0, 0.0),
                    settings: RenderSettings | None = None) -> RenderGradients:
    """Gradients of a scalar loss given its partials w.r.t. the rendered images.

    ``out`` must come from :func:`render` with the same inputs. Gradients are
    returned for the canonical parameters (through the deformed state, whose
    own partials are kept in ``.deformed`` for the deformation field).
    """
    settings = settings or RenderSettings()
    state = state if state is not None else DeformedState.canonical(cloud)
    n, nf = len(cloud), cloud.feature_dim
    H, W = cam.height, cam.width
    dt = settings.dtype
    zeros = lambda *s: np.zeros(s, dtype=dt)  # noqa: E731
    if n == 0 or len(out.order) == 0:
        g = RenderGradients(zeros(n, 3), zeros(n, 3), zeros(n, 4), zeros(n), zeros(n, 3), zeros(n, nf), zeros(n))
        g.deformed = dict(position=zeros(n, 3), rotation=zeros(n, 4), log_scale=zeros(n, 3))
        return g
    proj = out._proj
    gC = np.zeros((H, W, 3)) if grad_color is None else np.asarray(grad_color, dtype=np.float64)
    gF = np.zeros((H, W, nf)) if grad_feature is None else np.asarray(grad_feature, dtype=np.float64)
    gA = np.zeros((H, W)) if grad_alpha is None else np.asarray(grad_alpha, dtype=np.float64)
    n_chunks = (H + _kernels.ROWS_PER_CHUNK - 1) // _kernels.ROWS_PER_CHUNK
    buf = np.zeros((n_chunks, n, 9 + nf), dtype=dt)
    colors = np.ascontiguousarray(cloud.color, dtype=np.float64)
    feats = np.ascontiguousarray(cloud.feature, dtype=np.float64)
    _kernels.backward_kernel(proj["means"], proj["conics"], proj["opac"], colors, feats, proj["order"],
                             proj["bbox"], np.asarray(background, dtype=np.float64), H, W, proj["count"],
                             *proj["records"], np.ascontiguousarray(gC), np.ascontiguousarray(gF), np.ascontiguousarray(gA), buf)
    g = np.zeros((n, 9 + nf), dtype=dt)
    _kernels.merge_chunks(buf, g)
    g = g.astype(np.float64)
    vis = proj["visible"]
    g[~vis] = 0.0

    g_mean = g[:, 0:2]
    # conic -> cov2d: dL/dSigma = -Q G Q with G the symmetric conic gradient
    Gq = np.empty((n, 2, 2))
    Gq[:, 0, 0] = g[:, 2]
    Gq[:, 0, 1] = Gq[:, 1, 0] = 0.5 * g[:, 3]
    Gq[:, 1, 1] = g[:, 4]
    a, b, c = proj["conics"].T
    Q = np.empty((n, 2, 2))
    Q[:, 0, 0], Q[:, 0, 1], Q[:, 1, 0], Q[:, 1, 1] = a, b, b, c
    G_cov2 = -Q @ Gq @ Q
    M, cov3 = proj["M"], proj["cov3"]
    G_cov3 = np.swapaxes(M, -1, -2) @ G_cov2 @ M
    G_M = 2.0 * G_cov2 @ M @ cov3
    G_J = G_M @ cam.R.T
    x, y, z = proj["p_cam"].T
    fx, fy = cam.fx, cam.fy
    g_pc = np.zeros((n, 3))
    # mean2d = (fx x/z + cx, fy y/z + cy)
    g_pc[:, 0] = g_mean[:, 0] * fx / z
    g_pc[:, 1] = g_mean[:, 1] * fy / z
    g_pc[:, 2] = -(g_mean[:, 0] * fx * x + g_mean[:, 1] * fy * y) / (z * z)
    # Jacobian entries depend on camera-space position
    g_pc[:, 0] += G_J[:, 0, 2] * (-fx / (z * z))
    g_pc[:, 1] += G_J[:, 1, 2] * (-fy / (z * z))
    g_pc[:, 2] += (G_J[:, 0, 0] * (-fx / (z * z)) + G_J[:, 0, 2] * (2 * fx * x / z ** 3)
                   + G_J[:, 1, 1] * (-fy / (z * z)) + G_J[:, 1, 2] * (2 * fy * y / z ** 3))
    g_pos = g_pc @ cam.R
    # cov3 = (R S)(R S)^T
    Rq, scale, RS = proj["Rq"], proj["scale"], proj["RS"]
    G_RS = 2.0 * G_cov3 @ RS
    g_scale = np.sum(Rq * G_RS, axis=-2)
    g_log_scale = g_scale * scale
    g_rot = quaternion_matrix_vjp(np.asarray(state.rotation, dtype=np.float64), G_RS * scale[:, None, :])
    opac = proj["opac"]
    g_logit = g[:, 5] * opac * (1.0 - opac)
    g_pos[~vis] = 0.0
    g_log_scale[~vis] = 0.0
    g_rot[~vis] = 0.0

    mean_norm = np.linalg.norm(g_mean * np.array([0.5 * W, 0.5 * H]), axis=-1)
    res = RenderGradients(
        position=g_pos.astype(dt), log_scale=g_log_scale.astype(dt), rotation=g_rot.astype(dt),
        opacity_logit=g_logit.astype(dt), color=g[:, 6:9].astype(dt), feature=g[:, 9:].astype(dt),
        mean2d_norm=mean_norm.astype(dt),
    )
    res.deformed = dict(position=res.position, rotation=res.rotation, log_scale=res.log_scale)
    return res
