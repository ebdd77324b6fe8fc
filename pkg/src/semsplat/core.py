"""Gaussians, cameras and the shared geometric math.

Clouds are stored as a structure of arrays so that every operation downstream
(rendering, deformation, losses, optimizer) can work on whole parameter
tensors at once. :class:`Gaussian` is a single-element view used by the
scalar helpers and by tests.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

NEAR_PLANE = 0.01
LOWPASS_FLOOR = 0.3

# Per-Gaussian learnable fields, in checkpoint order.
PARAM_NAMES = ("position", "log_scale", "rotation", "opacity_logit", "color", "feature")
GEOMETRY_NAMES = ("position", "log_scale", "rotation", "opacity_logit", "color")


class BehindCamera(ValueError):
    """Gaussian center lies on or behind the near plane."""


def sigmoid(x):
    x = np.asarray(x)
    # split by sign so large |x| never overflows exp
    out = np.empty_like(x, dtype=np.result_type(x, np.float32))
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out if out.ndim else out[()]


def normalize_quaternions(q: np.ndarray) -> np.ndarray:
    q = np.asarray(q)
    norm = np.linalg.norm(q, axis=-1, keepdims=True)
    return q / np.where(norm > 0, norm, 1.0)


def quaternion_to_matrix(q: np.ndarray) -> np.ndarray:
    """Rotation matrices from (w, x, y, z) quaternions, normalizing first."""
    q = normalize_quaternions(q)
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    R = np.stack(
        [
            1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y),
            2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x),
            2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y),
        ],
        axis=-1,
    )
    return R.reshape(q.shape[:-1] + (3, 3))


def quaternion_matrix_vjp(q: np.ndarray, dR: np.ndarray) -> np.ndarray:
    """Pull a gradient on R(q/|q|) back to the raw (unnormalized) quaternion."""
    norm = np.linalg.norm(q, axis=-1, keepdims=True)
    qn = q / norm
    w, x, y, z = qn[..., 0], qn[..., 1], qn[..., 2], qn[..., 3]
    g = dR.reshape(dR.shape[:-2] + (9,))
    g00, g01, g02, g10, g11, g12, g20, g21, g22 = (g[..., k] for k in range(9))
    gw = 2 * (-z * g01 + y * g02 + z * g10 - x * g12 - y * g20 + x * g21)
    gx = 2 * (y * g01 + z * g02 + y * g10 - 2 * x * g11 - w * g12 + z * g20 + w * g21 - 2 * x * g22)
    gy = 2 * (-2 * y * g00 + x * g01 + w * g02 + x * g10 + z * g12 - w * g20 + z * g21 - 2 * y * g22)
    gz = 2 * (-2 * z * g00 - w * g01 + x * g02 + w * g10 - 2 * z * g11 + y * g12 + x * g20 + y * g21)
    gn = np.stack([gw, gx, gy, gz], axis=-1)
    return (gn - qn * np.sum(gn * qn, axis=-1, keepdims=True)) / norm


def build_covariance(log_scale, rotation) -> np.ndarray:
    """Sigma = R diag(exp(log_scale))^2 R^T, batched over leading axes."""
    R = quaternion_to_matrix(np.asarray(rotation))
    M = R * np.exp(np.asarray(log_scale))[..., None, :]
    return M @ np.swapaxes(M, -1, -2)


@dataclass
class Camera:
    """Pinhole camera, OpenCV convention (x right, y down, z forward)."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    R: np.ndarray = field(default_factory=lambda: np.eye(3))
    t: np.ndarray = field(default_factory=lambda: np.zeros(3))
    time: float = 0.0

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if self.width < 1 or self.height < 1:
            raise ValueError("image size must be at least 1x1")
        if not 0.0 <= self.time <= 1.0:
            raise ValueError(f"timestamp {self.time} outside [0, 1]")
        self.R = np.asarray(self.R, dtype=np.float64)
        self.t = np.asarray(self.t, dtype=np.float64)

    @property
    def center(self) -> np.ndarray:
        return -self.R.T @ self.t

    def world_to_camera(self, points: np.ndarray) -> np.ndarray:
        return points @ self.R.T + self.t

    def project_points(self, points: np.ndarray) -> np.ndarray:
        pc = self.world_to_camera(points)
        return np.stack(
            [self.fx * pc[..., 0] / pc[..., 2] + self.cx, self.fy * pc[..., 1] / pc[..., 2] + self.cy],
            axis=-1,
        )

    def to_dict(self) -> dict:
        return {
            "fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy,
            "width": self.width, "height": self.height,
            "R": self.R.tolist(), "t": self.t.tolist(), "time": self.time,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Camera":
        return cls(
            d["fx"], d["fy"], d["cx"], d["cy"], int(d["width"]), int(d["height"]),
            np.array(d["R"]), np.array(d["t"]), float(d["time"]),
        )

    def at_time(self, t: float) -> "Camera":
        return replace(self, R=self.R.copy(), t=self.t.copy(), time=float(t))


def look_at(eye, target, up=(0.0, -1.0, 0.0)):
    """World-to-camera (R, t) for a camera at ``eye`` looking at ``target``.

    ``up`` is the world direction that should appear towards the top of the
    image; with the y-down camera convention the default is world -y.
    """
    eye = np.asarray(eye, dtype=np.float64)
    forward = np.asarray(target, dtype=np.float64) - eye
    forward /= np.linalg.norm(forward)
    down = -np.asarray(up, dtype=np.float64)
    right = np.cross(down, forward)
    right /= np.linalg.norm(right)
    down = np.cross(forward, right)
    R = np.stack([right, down, forward])
    return R, -R @ eye


@dataclass
class Gaussian:
    position: np.ndarray
    log_scale: np.ndarray
    rotation: np.ndarray
    opacity_logit: float
    color: np.ndarray
    feature: np.ndarray
    generation: int = 0
    anchor: Optional[dict] = None


def activate(g: Gaussian):
    """Return (opacity, scale) from the raw parameters."""
    return float(sigmoid(np.float64(g.opacity_logit))), np.exp(np.asarray(g.log_scale, dtype=np.float64))


def projection_jacobian(p_cam: np.ndarray, fx: float, fy: float) -> np.ndarray:
    x, y, z = p_cam[..., 0], p_cam[..., 1], p_cam[..., 2]
    J = np.zeros(p_cam.shape[:-1] + (2, 3), dtype=p_cam.dtype)
    J[..., 0, 0] = fx / z
    J[..., 0, 2] = -fx * x / (z * z)
    J[..., 1, 1] = fy / z
    J[..., 1, 2] = -fy * y / (z * z)
    return J


def project_gaussian(g: Gaussian, cam: Camera, near: float = NEAR_PLANE):
    """EWA projection of one Gaussian: (mean2d, cov2d, depth)."""
    p = cam.world_to_camera(np.asarray(g.position, dtype=np.float64))
    if p[2] <= near:
        raise BehindCamera(f"camera-space depth {p[2]:.4g} <= near plane {near}")
    mean2d = np.array([cam.fx * p[0] / p[2] + cam.cx, cam.fy * p[1] / p[2] + cam.cy])
    M = projection_jacobian(p, cam.fx, cam.fy) @ cam.R
    cov2d = M @ build_covariance(g.log_scale, g.rotation) @ M.T + LOWPASS_FLOOR * np.eye(2)
    return mean2d, cov2d, float(p[2])


class GaussianCloud:
    """Structure-of-arrays container for N Gaussians.

    Attributes mirror :data:`PARAM_NAMES`; ``generation`` holds the
    densification round in which each Gaussian was created, ``anchors``
    maps parameter names to recorded snapshots (or is ``None``).
    """

    def __init__(self, position, log_scale, rotation, opacity_logit, color, feature,
                 generation=None, anchors=None, round=0, dtype=np.float32):
        self.position = np.asarray(position, dtype=dtype).reshape(-1, 3)
        n = len(self.position)
        self.log_scale = np.asarray(log_scale, dtype=dtype).reshape(n, 3)
        self.rotation = normalize_quaternions(np.asarray(rotation, dtype=dtype).reshape(n, 4))
        self.opacity_logit = np.asarray(opacity_logit, dtype=dtype).reshape(n)
        self.color = np.asarray(color, dtype=dtype).reshape(n, 3)
        feature = np.asarray(feature, dtype=dtype)
        self.feature = feature.reshape(n, -1) if n else feature.reshape(0, feature.shape[-1] if feature.ndim > 1 else 0)
        self.generation = (np.zeros(n, dtype=np.int64) if generation is None
                           else np.asarray(generation, dtype=np.int64).reshape(n))
        self.anchors = None if anchors is None else {k: np.array(v, dtype=dtype) for k, v in anchors.items()}
        self.round = int(round)
        self._validate()

    def _validate(self):
        n = len(self)
        for name in PARAM_NAMES:
            if len(getattr(self, name)) != n:
                raise ValueError(f"{name} has {len(getattr(self, name))} rows, expected {n}")
        if n and self.generation.max() > self.round:
            raise ValueError("generation exceeds densification round")
        if self.anchors is not None:
            for name in PARAM_NAMES:
                if self.anchors[name].shape != getattr(self, name).shape:
                    raise ValueError(f"anchor for {name} has wrong shape")

    @classmethod
    def empty(cls, feature_dim: int = 8, dtype=np.float32) -> "GaussianCloud":
        return cls(np.zeros((0, 3)), np.zeros((0, 3)), np.zeros((0, 4)), np.zeros(0),
                   np.zeros((0, 3)), np.zeros((0, feature_dim)), dtype=dtype)

    def __len__(self) -> int:
        return len(self.position)

    @property
    def feature_dim(self) -> int:
        return self.feature.shape[1]

    @property
    def dtype(self):
        return self.position.dtype

    def params(self) -> dict:
        return {name: getattr(self, name) for name in PARAM_NAMES}

    def copy(self) -> "GaussianCloud":
        c = GaussianCloud(**{k: v.copy() for k, v in self.params().items()},
                          generation=self.generation.copy(),
                          anchors=None if self.anchors is None else {k: v.copy() for k, v in self.anchors.items()},
                          round=self.round, dtype=self.dtype)
        c.rotation = self.rotation.copy()  # stored values exactly, no renormalization
        return c

    def astype(self, dtype) -> "GaussianCloud":
        c = self.copy()
        for name in PARAM_NAMES:
            setattr(c, name, getattr(c, name).astype(dtype))
        if c.anchors is not None:
            c.anchors = {k: v.astype(dtype) for k, v in c.anchors.items()}
        return c

    def subset(self, index) -> "GaussianCloud":
        index = np.asarray(index, dtype=np.int64)
        c = GaussianCloud(**{k: v[index] for k, v in self.params().items()},
                          generation=self.generation[index],
                          anchors=None if self.anchors is None else {k: v[index] for k, v in self.anchors.items()},
                          round=self.round, dtype=self.dtype)
        c.rotation = self.rotation[index].copy()
        return c

    def gaussian(self, i: int) -> Gaussian:
        anchor = None if self.anchors is None else {k: v[i].copy() for k, v in self.anchors.items()}
        return Gaussian(self.position[i].copy(), self.log_scale[i].copy(), self.rotation[i].copy(),
                        float(self.opacity_logit[i]), self.color[i].copy(), self.feature[i].copy(),
                        int(self.generation[i]), anchor)

    def opacity(self) -> np.ndarray:
        return sigmoid(self.opacity_logit)

    def scale(self) -> np.ndarray:
        return np.exp(self.log_scale)

    def renormalize(self):
        self.rotation = normalize_quaternions(self.rotation)
        return self


@dataclass
class DeformedState:
    """Per-Gaussian geometry at one timestamp (what the rasterizer consumes)."""

    position: np.ndarray
    rotation: np.ndarray
    log_scale: np.ndarray

    @classmethod
    def canonical(cls, cloud: GaussianCloud) -> "DeformedState":
        return cls(cloud.position, cloud.rotation, cloud.log_scale)

    def __len__(self):
        return len(self.position)


def random_cloud(n: int, rng: np.random.Generator, feature_dim: int = 8, bbox=((-1, -1, -1), (1, 1, 1)),
                 log_scale_range=(-3.0, -1.5), dtype=np.float32) -> GaussianCloud:
    """Uniform-in-box initialization (the no-prior option)."""
    lo, hi = (np.asarray(b, dtype=np.float64) for b in bbox)
    return GaussianCloud(
        position=lo + (hi - lo) * rng.random((n, 3)),
        log_scale=rng.uniform(*log_scale_range, size=(n, 3)),
        rotation=normalize_quaternions(rng.normal(size=(n, 4))),
        opacity_logit=rng.uniform(-1.0, 1.0, size=n),
        color=rng.random((n, 3)),
        feature=np.zeros((n, feature_dim)),
        dtype=dtype,
    )
