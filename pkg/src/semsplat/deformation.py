"""Spatio-temporal deformation field: a dense 4D feature grid decoded by a small MLP.

Given canonical Gaussians and a timestamp ``t`` the field predicts offsets
(dX, dq, ds) that are added to position, quaternion and log-scale. Semantic
features and opacity are passed through untouched.
"""
from __future__ import annotations

from dataclasses import dataclass

import numba as nb
import numpy as np

from .core import DeformedState, GaussianCloud

HEADS = {"head_position": 3, "head_rotation": 4, "head_scale": 3}


def _he_uniform(rng, fan_in, fan_out):
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=(fan_in, fan_out))


class DeformationField:
    """Dense grid (Nx, Ny, Nz, Nt, C) + two-hidden-layer ReLU MLP.

    Output heads start at zero, so a fresh field is the identity deformation.
    """

    def __init__(self, bbox_min, bbox_max, resolution=(16, 16, 16, 8), channels=16, hidden=64,
                 rng: np.random.Generator | None = None, grid_init=0.1, dtype=np.float32):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.bbox_min = np.asarray(bbox_min, dtype=np.float64)
        self.bbox_max = np.asarray(bbox_max, dtype=np.float64)
        if np.any(self.bbox_max <= self.bbox_min):
            raise ValueError("degenerate bounding box")
        self.resolution = tuple(int(r) for r in resolution)
        self.channels = int(channels)
        self.hidden = int(hidden)
        p = {"grid": rng.uniform(-grid_init, grid_init, size=self.resolution + (self.channels,))}
        p["w1"] = _he_uniform(rng, self.channels + 1, hidden)
        p["b1"] = np.zeros(hidden)
        p["w2"] = _he_uniform(rng, hidden, hidden)
        p["b2"] = np.zeros(hidden)
        for name, k in HEADS.items():
            p[name + "_w"] = np.zeros((hidden, k))
            p[name + "_b"] = np.zeros(k)
        self.params = {k: v.astype(dtype) for k, v in p.items()}
        self.n_clamped = 0

    @property
    def dtype(self):
        return self.params["grid"].dtype

    def copy(self) -> "DeformationField":
        new = object.__new__(DeformationField)
        new.__dict__.update(self.__dict__)
        new.params = {k: v.copy() for k, v in self.params.items()}
        return new

    def astype(self, dtype) -> "DeformationField":
        new = self.copy()
        new.params = {k: v.astype(dtype) for k, v in new.params.items()}
        return new

    def mlp_names(self):
        return [k for k in self.params if k != "grid"]


@dataclass
class DeformCache:
    t: float
    base: np.ndarray    # (N, 4) lower corner cell coordinates
    frac: np.ndarray    # (N, 4) fractional offsets inside the cell
    dscale: np.ndarray  # (N, 3) d(cell coordinate)/d(position), zero where clamped
    grid_feat: np.ndarray
    h0: np.ndarray
    z1: np.ndarray
    h1: np.ndarray
    z2: np.ndarray
    h2: np.ndarray
    q_sum: np.ndarray
    q_changed: np.ndarray
    n_clamped: int


def _interp_setup(field: DeformationField, positions: np.ndarray, t: float):
    res = np.array(field.resolution)
    span = field.bbox_max - field.bbox_min
    u_sp = (positions - field.bbox_min) / span * (res[:3] - 1)
    inside = (u_sp >= 0) & (u_sp <= res[:3] - 1)
    n_clamped = int(np.sum(~np.all(inside, axis=1)))
    u_sp = np.clip(u_sp, 0, res[:3] - 1)
    u_t = np.full((len(positions), 1), float(t) * (res[3] - 1))
    u = np.concatenate([u_sp, u_t], axis=1)
    base = np.minimum(np.floor(u), np.maximum(res - 2, 0)).astype(np.int64)
    frac = u - base
    dscale = inside * ((res[:3] - 1) / span)
    return base, frac, dscale, n_clamped


@nb.njit(cache=True)
def _corner_rows(base, r, p, rows, weights, frac, wax):
    """Flat grid rows of the 16 corners around point ``p`` and their weights."""
    s2 = r[3]
    s1 = r[2] * s2
    s0 = r[1] * s1
    for d in range(4):
        wax[d, 0] = 1.0 - frac[p, d]
        wax[d, 1] = frac[p, d]
    for corner in range(16):
        b0 = (corner >> 3) & 1
        b1 = (corner >> 2) & 1
        b2 = (corner >> 1) & 1
        b3 = corner & 1
        rows[corner] = (min(base[p, 0] + b0, r[0] - 1) * s0 + min(base[p, 1] + b1, r[1] - 1) * s1
                        + min(base[p, 2] + b2, r[2] - 1) * s2 + min(base[p, 3] + b3, r[3] - 1))
        weights[corner] = wax[0, b0] * wax[1, b1] * wax[2, b2] * wax[3, b3]


@nb.njit(cache=True)
def _lerp_forward(grid, base, frac, out):
    """Quadrilinear lookup; ``grid`` is (Nx, Ny, Nz, Nt, C)."""
    n, C = out.shape
    r = np.array(grid.shape[:4])
    flat = grid.reshape(-1, C)
    rows = np.empty(16, dtype=np.int64)
    weights = np.empty(16)
    wax = np.empty((4, 2))
    for p in range(n):
        _corner_rows(base, r, p, rows, weights, frac, wax)
        for corner in range(16):
            w = weights[corner]
            if w == 0.0:
                continue
            row = rows[corner]
            for c in range(C):
                out[p, c] += w * flat[row, c]


@nb.njit(cache=True)
def _lerp_backward(grid, base, frac, dscale, g_feat, g_grid, g_pos):
    """Scatter ``g_feat`` into ``g_grid`` (in point order, so deterministic) and
    accumulate d/d position through the interpolation weights."""
    n, C = g_feat.shape
    r = np.array(grid.shape[:4])
    flat = grid.reshape(-1, C)
    g_flat = g_grid.reshape(-1, C)
    rows = np.empty(16, dtype=np.int64)
    weights = np.empty(16)
    wax = np.empty((4, 2))
    for p in range(n):
        _corner_rows(base, r, p, rows, weights, frac, wax)
        for corner in range(16):
            w = weights[corner]
            row = rows[corner]
            dot = 0.0
            for c in range(C):
                g_flat[row, c] += w * g_feat[p, c]
                dot += flat[row, c] * g_feat[p, c]
            for d in range(3):
                if dscale[p, d] == 0.0:
                    continue
                others = 1.0
                for e in range(4):
                    if e != d:
                        others *= wax[e, (corner >> (3 - e)) & 1]
                sign = 1.0 if (corner >> (3 - d)) & 1 else -1.0
                g_pos[p, d] += dot * sign * others * dscale[p, d]


def _head_matrix(P):
    return np.concatenate([P[name + "_w"] for name in HEADS], axis=1)


def _head_bias(P):
    return np.concatenate([P[name + "_b"] for name in HEADS])


def deform(field: DeformationField, cloud: GaussianCloud, t: float, return_cache: bool = False):
    """Deformed geometry of ``cloud`` at time ``t``; opacity and features untouched."""
    if not 0.0 <= t <= 1.0:
        raise ValueError(f"timestamp {t} outside [0, 1]")
    # the MLP runs in the field's dtype; the grid lookup accumulates in float64
    P = field.params
    fdt = field.dtype
    pos = np.asarray(cloud.position, dtype=np.float64)
    n = len(pos)
    base, frac, dscale, n_clamped = _interp_setup(field, pos, t)
    field.n_clamped = n_clamped
    feat = np.zeros((n, field.channels))
    _lerp_forward(P["grid"], base, frac, feat)
    h0 = np.concatenate([feat, np.full((n, 1), float(t))], axis=1).astype(fdt)
    z1 = h0 @ P["w1"] + P["b1"]
    h1 = np.maximum(z1, 0)
    z2 = h1 @ P["w2"] + P["b2"]
    h2 = np.maximum(z2, 0)
    out = h2 @ _head_matrix(P) + _head_bias(P)
    dX, dq, ds = (o.astype(np.float64) for o in np.split(out, [3, 7], axis=1))
    dt = cloud.dtype
    q_sum = cloud.rotation.astype(np.float64) + dq
    changed = np.any(dq != 0.0, axis=1)
    rot = cloud.rotation.copy()
    if changed.any():
        qs = q_sum[changed]
        rot[changed] = (qs / np.linalg.norm(qs, axis=1, keepdims=True)).astype(dt)
    state = DeformedState(
        position=(cloud.position + dX.astype(dt)) if np.any(dX) else cloud.position.copy(),
        rotation=rot,
        log_scale=(cloud.log_scale + ds.astype(dt)) if np.any(ds) else cloud.log_scale.copy(),
    )
    if not return_cache:
        return state
    cache = DeformCache(float(t), base, frac, dscale, feat, h0, z1, h1, z2, h2, q_sum, changed, n_clamped)
    return state, cache


def deform_backward(field: DeformationField, cloud: GaussianCloud, cache: DeformCache, g_state: dict):
    """Chain deformed-state gradients into field parameters and canonical geometry.

    ``g_state`` holds dL/d(deformed position, rotation, log_scale). Returns
    ``(field_grads, cloud_grads)``; cloud grads cover position, rotation and
    log_scale (position includes the path through the grid lookup).
    """
    P = field.params
    fdt = field.dtype
    gX = np.asarray(g_state["position"], dtype=np.float64)
    gq_def = np.asarray(g_state["rotation"], dtype=np.float64)
    gS = np.asarray(g_state["log_scale"], dtype=np.float64)
    # deformed rotation = normalize(q + dq) where changed; the incoming gradient
    # is already tangent to the unit sphere so only the 1/|u| factor remains
    norm = np.linalg.norm(cache.q_sum, axis=1, keepdims=True)
    gq = np.where(cache.q_changed[:, None], gq_def / norm, gq_def)
    gq = np.where(cache.q_changed[:, None],
                  gq - cache.q_sum / norm * np.sum(gq * cache.q_sum / norm, axis=1, keepdims=True), gq)
    g_out = np.concatenate([gX, gq, gS], axis=1).astype(fdt)
    g_head_w = cache.h2.T @ g_out
    g_head_b = g_out.sum(0)
    grads = {}
    start = 0
    for name, k in HEADS.items():
        grads[name + "_w"] = g_head_w[:, start:start + k]
        grads[name + "_b"] = g_head_b[start:start + k]
        start += k
    g_h2 = g_out @ _head_matrix(P).T
    g_z2 = g_h2 * (cache.z2 > 0)
    grads["w2"] = cache.h1.T @ g_z2
    grads["b2"] = g_z2.sum(0)
    g_h1 = g_z2 @ P["w2"].T
    g_z1 = g_h1 * (cache.z1 > 0)
    grads["w1"] = cache.h0.T @ g_z1
    grads["b1"] = g_z1.sum(0)
    g_feat = (g_z1 @ P["w1"].T)[:, :field.channels].astype(np.float64)
    g_grid = np.zeros(field.resolution + (field.channels,), dtype=fdt)
    g_pos_field = np.zeros((len(g_feat), 3))
    _lerp_backward(P["grid"], cache.base, cache.frac, cache.dscale, np.ascontiguousarray(g_feat), g_grid, g_pos_field)
    grads["grid"] = g_grid
    field_grads = {k: np.ascontiguousarray(v, dtype=fdt) for k, v in grads.items()}
    cloud_grads = {"position": (gX + g_pos_field).astype(cloud.dtype),
                   "rotation": gq.astype(cloud.dtype),
                   "log_scale": gS.astype(cloud.dtype)}
    return field_grads, cloud_grads


@nb.njit(cache=True)
def _tv_axis(g, grad, with_grad):
    """Mean squared difference along the middle axis of an (outer, n, inner) view."""
    no, na, ni = g.shape
    size = no * (na - 1) * ni
    if size == 0:
        return 0.0
    total = 0.0
    scale = 2.0 / size
    for o in range(no):
        for k in range(na - 1):
            for j in range(ni):
                d = np.float64(g[o, k + 1, j]) - g[o, k, j]
                total += d * d
                if with_grad:
                    grad[o, k + 1, j] += scale * d
                    grad[o, k, j] -= scale * d
    return total / size


def _tv_kernel(g, grad, with_grad):
    """Sum over the four grid axes of the mean squared neighbour difference."""
    loss = 0.0
    shape = g.shape
    for a in range(4):
        outer = int(np.prod(shape[:a]))
        inner = int(np.prod(shape[a + 1:]))
        view = (outer, shape[a], inner)
        gv = grad.reshape(view) if with_grad else grad.reshape(1, 1, 1)
        loss += _tv_axis(g.reshape(view), gv, with_grad)
    return loss


def tv_loss(field: DeformationField, with_grad: bool = False):
    """Sum over the four grid axes of the mean squared neighbour difference."""
    g = field.params["grid"]
    grad = np.zeros(g.shape) if with_grad else np.zeros(1)
    loss = float(_tv_kernel(g, grad, with_grad))
    if with_grad:
        return loss, grad.astype(field.dtype)
    return loss
