"""Procedural dynamic scenes with exact ground truth, and scene directory I/O.

Scenes are a textured back wall plus a few rigid primitives (boxes and
spheres) moving along parametric trajectories, observed by a ring of
cameras on an arc at every timestamp. Ground truth is produced by ray
casting the primitives (with supersampling), not by the splatting renderer.

On disk::

    manifest.json
    frames/0000.png           RGB, 8 bit
    masks/0000.png            foreground mask, {0, 255}
    classes/{s,m,l}/0000.png  class ids, 16 bit
    codebook.bin              float32 rows, little endian
    codebook.json             {"rows": ..., "dim": ..., "names": [...]}
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
from PIL import Image

from .core import Camera, look_at

LEVELS = ("s", "m", "l")  # subpart, part, whole
CANONICAL_TERMS = ("object", "things", "stuff", "texture")
BACKGROUND_CLASS = "wall"


class SpecValidation(ValueError):
    pass


@dataclass
class ObjectSpec:
    shape: str = "box"                 # "box" or "sphere"
    name: str = "box"
    size: float = 0.6                  # half extent (box) or radius (sphere)
    center: tuple = (0.0, 0.0, 0.0)
    trajectory: str = "static"         # "static", "linear" or "circular"
    amplitude: tuple = (0.0, 0.0, 0.0)  # linear: offset at t=1 relative to t=0.5 (symmetric)
    radius: float = 0.0                # circular, in the x-y plane
    phase: float = 0.0
    color: tuple = (0.80, 0.32, 0.25)
    pattern: float = 0.08              # checker shading amplitude on faces / bands
    part_names: Optional[dict] = None  # {"lid": ..., "body": ..., "label": ...} for multiscale boxes

    def center_at(self, t: float) -> np.ndarray:
        c = np.asarray(self.center, dtype=np.float64)
        if self.trajectory == "linear":
            return c + (t - 0.5) * 2.0 * np.asarray(self.amplitude, dtype=np.float64)
        if self.trajectory == "circular":
            ang = 2.0 * np.pi * t + self.phase
            return c + self.radius * np.array([np.cos(ang), np.sin(ang), 0.0])
        return c


@dataclass
class SceneSpec:
    name: str = "scene"
    width: int = 64
    height: int = 64
    fov_deg: float = 50.0
    n_train_views: int = 20
    n_test_views: int = 4
    n_times: int = 20
    arc_deg: float = 60.0
    cam_radius: float = 4.0
    cam_height: float = -0.8
    wall_z: float = 1.5
    background: str = "textured"       # "flat", "textured" or "noise"
    background_color: tuple = (0.62, 0.66, 0.70)
    noise_amplitude: float = 0.0
    noise_dots: int = 900             # dot count scale; 900 fills ~70% of lattice cells
    objects: list = field(default_factory=list)
    codebook_dim: int = 64
    supersample: int = 3
    seed: int = 0

    def validate(self):
        if self.width < 1 or self.height < 1:
            raise SpecValidation("image size must be positive")
        if self.n_train_views < 1 or self.n_times < 1 or self.n_test_views < 0:
            raise SpecValidation("need at least one training view and one timestamp")
        if self.background not in ("flat", "textured", "noise"):
            raise SpecValidation(f"unknown background {self.background!r}")
        if not 0.0 <= self.noise_amplitude <= 1.0:
            raise SpecValidation("noise amplitude must be in [0, 1]")
        if len(self.objects) > 3:
            raise SpecValidation("at most three foreground objects")
        for obj in self.objects:
            if obj.shape not in ("box", "sphere"):
                raise SpecValidation(f"unknown primitive {obj.shape!r}")
            if obj.trajectory not in ("static", "linear", "circular"):
                raise SpecValidation(f"unknown trajectory {obj.trajectory!r}")
        names = self.class_names()
        if len(names) > self.codebook_dim:
            raise SpecValidation("codebook dimension smaller than class count")

    def class_names(self) -> list:
        names = [BACKGROUND_CLASS]
        for obj in self.objects:
            for n in [obj.name] + list((obj.part_names or {}).values()):
                if n not in names:
                    names.append(n)
        return names + [f"canon:{t}" for t in CANONICAL_TERMS]

    @property
    def focal(self) -> float:
        return 0.5 * self.width / np.tan(np.radians(self.fov_deg) / 2.0)

    def to_dict(self):
        d = asdict(self)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SceneSpec":
        d = dict(d)
        d["objects"] = [ObjectSpec(**o) for o in d.get("objects", [])]
        return cls(**d)


def _view_angles(spec: SceneSpec):
    n = spec.n_train_views + spec.n_test_views
    if n == 1 or spec.arc_deg == 0:
        angles = np.zeros(n)
    else:
        angles = np.radians(np.linspace(-spec.arc_deg / 2, spec.arc_deg / 2, n))
    # held-out views spread evenly through the arc
    test = set()
    if spec.n_test_views:
        step = n / spec.n_test_views
        test = {int(step * (k + 0.5)) for k in range(spec.n_test_views)}
    return angles, test


def make_cameras(spec: SceneSpec):
    angles, test = _view_angles(spec)
    cams = []
    for a in angles:
        eye = (spec.cam_radius * np.sin(a), spec.cam_height, -spec.cam_radius * np.cos(a))
        R, t = look_at(eye, (0.0, 0.0, 0.0))
        f = spec.focal
        cams.append(Camera(f, f, spec.width / 2.0, spec.height / 2.0, spec.width, spec.height, R, t, 0.0))
    return cams, test


# --- textures ---------------------------------------------------------------

DOT_CELL = 0.2


def _dot_cell_params(spec: SceneSpec, ix, iy):
    """Per-cell dot (offset, radius, shade) from a hash of the cell index.

    Every cell of a ``DOT_CELL`` lattice on the wall may hold one dark dot that
    stays inside its cell, so a point only needs to test its own cell.
    """
    h = (ix * 73856093) ^ (iy * 19349663) ^ (spec.seed * 83492791 + 1)
    h = (h * 2654435761) % (2 ** 32)
    u = [((h * (k + 1) * 40503) % 65521) / 65521.0 for k in range(4)]
    present = u[0] < spec.noise_dots / 900.0 * 0.7
    radius = DOT_CELL * (0.15 + 0.3 * u[1])
    margin = DOT_CELL / 2 - radius
    off_x = (u[2] - 0.5) * 2 * margin
    off_y = (u[3] - 0.5) * 2 * margin
    shade = 0.6 + 0.4 * u[1]
    return present, radius, off_x, off_y, shade


def wall_color(spec: SceneSpec, x, y):
    base = np.asarray(spec.background_color, dtype=np.float64)
    col = np.broadcast_to(base, x.shape + (3,)).copy()
    if spec.background in ("textured", "noise"):
        col += 0.10 * np.sin(1.3 * x + 0.4)[..., None] * np.array([1.0, 0.6, 0.2])
        col += 0.08 * np.cos(1.1 * y - 0.2)[..., None] * np.array([0.2, 0.5, 1.0])
        # two broad horizontal bands with soft edges
        band = 0.5 * (np.tanh((np.abs(y - 0.9) - 0.25) * -40.0) + 1.0)
        col -= 0.12 * band[..., None] * np.array([0.3, 1.0, 0.8])
    if spec.background == "noise" and spec.noise_amplitude > 0:
        ix = np.floor(x / DOT_CELL).astype(np.int64)
        iy = np.floor(y / DOT_CELL).astype(np.int64)
        present, radius, off_x, off_y, shade = _dot_cell_params(spec, ix, iy)
        cx = (ix + 0.5) * DOT_CELL + off_x
        cy = (iy + 0.5) * DOT_CELL + off_y
        inside = present & ((x - cx) ** 2 + (y - cy) ** 2 < radius ** 2)
        col *= (1.0 - spec.noise_amplitude * np.where(inside, shade, 0.0))[..., None]
    return np.clip(col, 0.0, 1.0)


def _checker(u, v, cells=2):
    return np.where((np.floor(u * cells) + np.floor(v * cells)) % 2 == 0, 1.0, -1.0)


def object_color(obj: ObjectSpec, local, face):
    """Surface color given the hit point in object-local coordinates (relative to centre)."""
    base = np.asarray(obj.color, dtype=np.float64)
    s = obj.size
    if obj.shape == "box":
        # face: 0/1 = -x/+x, 2/3 = -y/+y, 4/5 = -z/+z
        axis = face // 2
        uv_axes = [(1, 2), (0, 2), (0, 1)]
        col = np.zeros(local.shape[:-1] + (3,))
        u = np.zeros(local.shape[:-1])
        v = np.zeros(local.shape[:-1])
        for a, (i, j) in enumerate(uv_axes):
            sel = axis == a
            u[sel] = (local[sel, i] / s + 1) / 2
            v[sel] = (local[sel, j] / s + 1) / 2
        face_shade = np.array([0.85, 0.85, 1.15, 0.75, 1.0, 1.0])[face]
        col[:] = base
        col *= face_shade[..., None]
        col += obj.pattern * _checker(u, v)[..., None]
        return np.clip(col, 0.0, 1.0)
    lat = np.arcsin(np.clip(local[..., 1] / s, -1, 1))
    band = np.sin(4.0 * lat)
    col = base + obj.pattern * band[..., None] * np.array([1.0, 1.0, 0.6])
    return np.clip(col, 0.0, 1.0)


def object_parts(obj: ObjectSpec, local, face):
    """(part, subpart) class names per hit for objects with a part hierarchy."""
    names = obj.part_names or {}
    n = local.shape[:-1]
    part = np.full(n, obj.name, dtype=object)
    sub = np.full(n, obj.name, dtype=object)
    if obj.shape == "box" and names:
        lid = face == 2  # -y is up in world coordinates
        part[lid] = names.get("lid", obj.name)
        part[~lid] = names.get("body", obj.name)
        sub[:] = part
        label = (face == 4) & (np.abs(local[..., 0]) < 0.5 * obj.size) & (np.abs(local[..., 1]) < 0.5 * obj.size)
        sub[label] = names.get("label", obj.name)
    return part, sub


# --- ray casting -------------------------------------------------------------

def _intersect_box(o, d, center, s):
    inv = 1.0 / np.where(np.abs(d) < 1e-12, 1e-12, d)
    lo = (center - s - o) * inv
    hi = (center + s - o) * inv
    tmin = np.minimum(lo, hi)
    tmax = np.maximum(lo, hi)
    t_near = tmin.max(axis=-1)
    t_far = tmax.min(axis=-1)
    hit = (t_near <= t_far) & (t_near > 1e-6)
    axis = tmin.argmax(axis=-1)
    sign = np.take_along_axis(d, axis[..., None], -1)[..., 0] > 0
    face = 2 * axis + np.where(sign, 0, 1)  # entering through -axis face when moving +axis
    return np.where(hit, t_near, np.inf), face


def _intersect_sphere(o, d, center, r):
    oc = o - center
    b = np.sum(oc * d, axis=-1)
    c = np.sum(oc * oc, axis=-1) - r * r
    disc = b * b - c
    t = -b - np.sqrt(np.maximum(disc, 0))
    hit = (disc >= 0) & (t > 1e-6)
    return np.where(hit, t, np.inf), np.zeros(t.shape, dtype=np.int64)


def cast(spec: SceneSpec, cam: Camera, t: float):
    """Ray cast one frame. Returns image, foreground mask, and class-name maps per level."""
    ss = spec.supersample
    H, W = cam.height, cam.width
    offs = (np.arange(ss) + 0.5) / ss
    ys = (np.arange(H)[:, None] + offs[None, :]).ravel()
    xs = (np.arange(W)[:, None] + offs[None, :]).ravel()
    py, px = np.meshgrid(ys, xs, indexing="ij")
    dc = np.stack([(px - cam.cx) / cam.fx, (py - cam.cy) / cam.fy, np.ones_like(px)], axis=-1)
    d = dc @ cam.R
    d /= np.linalg.norm(d, axis=-1, keepdims=True)
    o = np.broadcast_to(cam.center, d.shape)
    t_wall = (spec.wall_z - o[..., 2]) / d[..., 2]
    best_t = np.where(t_wall > 0, t_wall, np.inf)
    best_obj = np.full(best_t.shape, -1)
    best_face = np.zeros(best_t.shape, dtype=np.int64)
    centers = []
    for k, obj in enumerate(spec.objects):
        c = obj.center_at(t)
        centers.append(c)
        if obj.shape == "box":
            th, face = _intersect_box(o, d, c, obj.size)
        else:
            th, face = _intersect_sphere(o, d, c, obj.size)
        closer = th < best_t
        best_t = np.where(closer, th, best_t)
        best_obj = np.where(closer, k, best_obj)
        best_face = np.where(closer, face, best_face)
    hitp = o + best_t[..., None] * d
    color = wall_color(spec, hitp[..., 0], hitp[..., 1])
    whole = np.full(best_t.shape, BACKGROUND_CLASS, dtype=object)
    part = whole.copy()
    sub = whole.copy()
    for k, obj in enumerate(spec.objects):
        sel = best_obj == k
        if not sel.any():
            continue
        local = hitp[sel] - centers[k]
        color[sel] = object_color(obj, local, best_face[sel])
        whole[sel] = obj.name
        part[sel], sub[sel] = object_parts(obj, local, best_face[sel])
    image = color.reshape(H, ss, W, ss, 3).mean(axis=(1, 3))
    fg = (best_obj >= 0).reshape(H, ss, W, ss).mean(axis=(1, 3)) >= 0.5
    c = ss // 2
    pick = lambda a: a.reshape(H, ss, W, ss)[:, c, :, c]  # noqa: E731
    return image, fg, {"s": pick(sub), "m": pick(part), "l": pick(whole)}


# --- dataset -----------------------------------------------------------------

@dataclass
class Frame:
    image: np.ndarray
    camera: Camera
    time: float
    mask: np.ndarray
    classes: dict
    view: int = 0
    index: int = 0


@dataclass
class SceneDataset:
    spec: SceneSpec
    frames: list
    codebook: np.ndarray
    class_names: list
    train: list
    test: list

    def feature_map(self, frame: Frame, level: str = "l") -> np.ndarray:
        return self.codebook[frame.classes[level]]

    def class_id(self, name: str) -> int:
        return self.class_names.index(name)

    def embedding(self, name: str) -> np.ndarray:
        return self.codebook[self.class_id(name)]

    def canonical_embeddings(self) -> np.ndarray:
        return self.codebook[[self.class_id(f"canon:{t}") for t in CANONICAL_TERMS]]

    @property
    def train_frames(self):
        return [self.frames[i] for i in self.train]

    @property
    def test_frames(self):
        return [self.frames[i] for i in self.test]

    def object_names(self):
        return [o.name for o in self.spec.objects]

    def used_class_ids(self) -> np.ndarray:
        ids = set()
        for f in self.frames:
            for lvl in LEVELS:
                ids.update(np.unique(f.classes[lvl]).tolist())
        return np.array(sorted(ids))


def make_codebook(n_rows: int, dim: int, seed: int) -> np.ndarray:
    """Orthonormal rows from a seeded Gaussian matrix."""
    rng = np.random.default_rng(seed + 7)
    q, _ = np.linalg.qr(rng.normal(size=(dim, dim)))
    return q[:n_rows].astype(np.float32)


def generate_scene(spec: SceneSpec, seed: Optional[int] = None, out_dir=None) -> SceneDataset:
    """Render every (view, time) frame of ``spec``; optionally write it to ``out_dir``."""
    if seed is not None:
        spec = SceneSpec.from_dict({**spec.to_dict(), "seed": int(seed)})
    spec.validate()
    names = spec.class_names()
    lookup = {n: k for k, n in enumerate(names)}
    cams, test_views = make_cameras(spec)
    times = np.linspace(0.0, 1.0, spec.n_times) if spec.n_times > 1 else np.zeros(1)
    frames, train, test = [], [], []
    for v, cam in enumerate(cams):
        for t in times:
            image, fg, cls = cast(spec, cam, float(t))
            image = np.round(np.clip(image, 0, 1) * 255).astype(np.uint8).astype(np.float32) / 255.0
            ids = {lvl: np.vectorize(lookup.__getitem__, otypes=[np.int64])(cls[lvl]).astype(np.uint16)
                   for lvl in LEVELS}
            k = len(frames)
            frames.append(Frame(image, cam.at_time(float(t)), float(t), fg, ids, v, k))
            (test if v in test_views else train).append(k)
    ds = SceneDataset(spec, frames, make_codebook(len(names), spec.codebook_dim, spec.seed), names, train, test)
    if out_dir is not None:
        save_scene(ds, out_dir)
    return ds


def _write_png(path: Path, arr, mode=None):
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(arr, mode=mode).save(path, optimize=False)


def save_scene(ds: SceneDataset, out_dir):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for f in ds.frames:
        name = f"{f.index:04d}.png"
        _write_png(out / "frames" / name, np.round(f.image * 255).astype(np.uint8))
        _write_png(out / "masks" / name, (f.mask.astype(np.uint8) * 255))
        for lvl in LEVELS:
            _write_png(out / "classes" / lvl / name, f.classes[lvl].astype(np.uint16))
    ds.codebook.astype("<f4").tofile(out / "codebook.bin")
    (out / "codebook.json").write_text(json.dumps(
        {"rows": int(ds.codebook.shape[0]), "dim": int(ds.codebook.shape[1]), "names": ds.class_names}, indent=1))
    manifest = {
        "format": 1,
        "spec": ds.spec.to_dict(),
        "split": {"train": ds.train, "test": ds.test},
        "frames": [{"index": f.index, "view": f.view, "time": f.time, "camera": f.camera.to_dict()}
                   for f in ds.frames],
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=1))


def load_scene(scene_dir) -> SceneDataset:
    root = Path(scene_dir)
    manifest_path = root / "manifest.json"
    if not manifest_path.is_file():
        raise FileNotFoundError(f"no manifest.json in {root}")
    manifest = json.loads(manifest_path.read_text())
    meta = json.loads((root / "codebook.json").read_text())
    codebook = np.fromfile(root / "codebook.bin", dtype="<f4").reshape(meta["rows"], meta["dim"])
    frames = []
    for fm in manifest["frames"]:
        name = f"{fm['index']:04d}.png"
        image = np.asarray(Image.open(root / "frames" / name).convert("RGB"), dtype=np.float32) / 255.0
        mask = np.asarray(Image.open(root / "masks" / name)) > 127
        classes = {lvl: np.asarray(Image.open(root / "classes" / lvl / name)).astype(np.uint16) for lvl in LEVELS}
        frames.append(Frame(image, Camera.from_dict(fm["camera"]), float(fm["time"]), mask, classes,
                            int(fm["view"]), int(fm["index"])))
    return SceneDataset(SceneSpec.from_dict(manifest["spec"]), frames, codebook.astype(np.float32),
                        list(meta["names"]), list(manifest["split"]["train"]), list(manifest["split"]["test"]))


# --- bundled scenes ----------------------------------------------------------

def _moving_box(**kw):
    d = dict(shape="box", name="box", size=0.6, center=(0.0, 0.0, 0.0), trajectory="circular", radius=0.5,
             color=(0.82, 0.30, 0.22), pattern=0.08)
    d.update(kw)
    return ObjectSpec(**d)


def bundled_spec(name: str, **overrides) -> SceneSpec:
    """Named scene presets.

    ``static-textured`` accepts ``background="flat"`` for the flat-wall
    variant used when comparing texture densities.
    """
    if name == "static-textured":
        spec = SceneSpec(name=name, n_times=1, background="textured", objects=[
            ObjectSpec(shape="sphere", name="ball", size=0.55, center=(-0.55, 0.1, 0.0), color=(0.25, 0.45, 0.80),
                       pattern=0.10),
            ObjectSpec(shape="box", name="crate", size=0.45, center=(0.7, 0.15, 0.3), color=(0.75, 0.60, 0.25),
                       pattern=0.07),
        ])
    elif name == "dynamic-clean":
        spec = SceneSpec(name=name, background="textured", objects=[_moving_box()])
    elif name == "dynamic-noisy":
        spec = SceneSpec(name=name, background="noise", noise_amplitude=0.6, objects=[_moving_box()])
    elif name == "dynamic-multiscale":
        spec = SceneSpec(name=name, background="textured", objects=[
            _moving_box(part_names={"lid": "lid", "body": "body", "label": "label"})])
    else:
        raise KeyError(f"unknown bundled scene {name!r}; choose from {BUNDLED}")
    return SceneSpec.from_dict({**spec.to_dict(), **overrides})


BUNDLED = ("static-textured", "dynamic-clean", "dynamic-noisy", "dynamic-multiscale")


# --- initialization from known primitives ---------------------------------------

def sample_primitive_points(spec: SceneSpec, n: int, rng: np.random.Generator, object_share: float = 0.35):
    """Colored points on the wall (inside the union of camera footprints) and on
    each object's surface at its time-averaged centre."""
    cams, _ = make_cameras(spec)
    corners = np.array([[0, 0], [spec.width, 0], [0, spec.height], [spec.width, spec.height]], dtype=np.float64)
    foot = []
    for cam in cams:
        dc = np.stack([(corners[:, 0] - cam.cx) / cam.fx, (corners[:, 1] - cam.cy) / cam.fy, np.ones(4)], -1)
        d = dc @ cam.R
        tt = (spec.wall_z - cam.center[2]) / d[:, 2]
        foot.append(cam.center[None, :2] + tt[:, None] * d[:, :2])
    foot = np.concatenate(foot)
    lo, hi = foot.min(0), foot.max(0)
    n_obj = int(round(n * object_share)) if spec.objects else 0
    n_wall = n - n_obj
    wall_xy = rng.uniform(lo, hi, size=(n_wall, 2))
    pts = [np.column_stack([wall_xy, np.full(n_wall, spec.wall_z)])]
    cols = [wall_color(spec, wall_xy[:, 0], wall_xy[:, 1])]
    owner = [np.full(n_wall, -1)]
    per_obj = np.array_split(np.arange(n_obj), max(len(spec.objects), 1))
    for k, obj in enumerate(spec.objects):
        m = len(per_obj[k])
        times = np.linspace(0, 1, max(spec.n_times, 1))
        center = np.mean([obj.center_at(t) for t in times], axis=0)
        if obj.shape == "box":
            face = rng.integers(0, 6, size=m)
            local = rng.uniform(-obj.size, obj.size, size=(m, 3))
            axis = face // 2
            local[np.arange(m), axis] = np.where(face % 2 == 0, -obj.size, obj.size)
        else:
            v = rng.normal(size=(m, 3))
            local = obj.size * v / np.linalg.norm(v, axis=1, keepdims=True)
            face = np.zeros(m, dtype=np.int64)
        pts.append(center + local)
        cols.append(object_color(obj, local, face))
        owner.append(np.full(m, k))
    return np.concatenate(pts), np.concatenate(cols), np.concatenate(owner)
