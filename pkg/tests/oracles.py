"""Independent reference implementations shared by unit and acceptance tests."""
import numpy as np

from semsplat.codec import FeatureCodec
from semsplat.core import BehindCamera, Camera, GaussianCloud, look_at, project_gaussian, random_cloud, sigmoid
from semsplat.raster import RenderSettings
from semsplat.semantics import SceneModel


def small_camera(size=16, eye=(0.2, -0.3, -3.0)):
    R, t = look_at(eye, (0, 0, 0))
    return Camera(18.0, 18.0, size / 2, size / 2, size, size, R, t)


def brute_force_composite(cloud, cam, background, t_stop=1e-4, cull_sigma=3.0):
    """Per-pixel loop over Gaussians sorted by depth, one Gaussian at a time."""
    entries = []
    for i in range(len(cloud)):
        try:
            mean, cov, depth = project_gaussian(cloud.gaussian(i), cam)
        except BehindCamera:
            continue
        entries.append((depth, i, mean, cov))
    entries.sort(key=lambda e: (e[0], e[1]))
    H, W, nf = cam.height, cam.width, cloud.feature_dim
    color = np.zeros((H, W, 3))
    feat = np.zeros((H, W, nf))
    alpha = np.zeros((H, W))
    trans = np.ones((H, W))
    for y in range(H):
        for x in range(W):
            p = np.array([x + 0.5, y + 0.5])
            T = 1.0
            for _, i, mean, cov in entries:
                d = p - mean
                if abs(d[0]) > cull_sigma * np.sqrt(cov[0, 0]) or abs(d[1]) > cull_sigma * np.sqrt(cov[1, 1]):
                    continue
                a = sigmoid(cloud.opacity_logit[i]) * np.exp(-0.5 * d @ np.linalg.solve(cov, d))
                color[y, x] += T * a * cloud.color[i]
                feat[y, x] += T * a * cloud.feature[i]
                alpha[y, x] += T * a
                T *= 1.0 - a
                if T < t_stop:
                    break
            color[y, x] += T * np.asarray(background)
            trans[y, x] = T
    return color, feat, alpha, trans


def scene(seed, n=12, nf=2):
    rng = np.random.default_rng(seed)
    cloud = random_cloud(n, rng, nf, bbox=((-0.8, -0.8, -0.5), (0.8, 0.8, 0.5)), log_scale_range=(-2.5, -1.2),
                         dtype=np.float64)
    cloud.opacity_logit = rng.uniform(-1, 3, n)
    cloud.feature = rng.normal(size=(n, nf))
    return cloud, rng.uniform(0, 1, 3)


def brute_force_sobel_density(img, threshold=0.25):
    gray = img[..., 0] * 0.299 + img[..., 1] * 0.587 + img[..., 2] * 0.114
    H, W = gray.shape
    kx = [[-1, 0, 1], [-2, 0, 2], [-1, 0, 1]]
    ky = [[-1, -2, -1], [0, 0, 0], [1, 2, 1]]
    mag = np.zeros((H, W))
    for y in range(H):
        for x in range(W):
            gx = gy = 0.0
            for dy in range(-1, 2):
                for dx in range(-1, 2):
                    v = gray[min(max(y + dy, 0), H - 1), min(max(x + dx, 0), W - 1)]
                    gx += kx[dy + 1][dx + 1] * v
                    gy += ky[dy + 1][dx + 1] * v
            mag[y, x] = np.hypot(gx, gy)
    peak = mag.max()
    if peak == 0:
        return 0.0
    return sum(1 for y in range(H) for x in range(W) if mag[y, x] >= threshold * peak) / (H * W)


def layered_scene():
    """A wall of background Gaussians with foreground Gaussians in front."""
    rng = np.random.default_rng(3)
    n_bg, n_fg = 40, 15
    bg_pos = np.column_stack([rng.uniform(-1.5, 1.5, n_bg), rng.uniform(-1.5, 1.5, n_bg), np.full(n_bg, 1.0)])
    fg_pos = np.column_stack([rng.uniform(-0.5, 0.5, n_fg), rng.uniform(-0.5, 0.5, n_fg), np.full(n_fg, -0.5)])
    pos = np.vstack([bg_pos, fg_pos])
    n = n_bg + n_fg
    feats = np.vstack([np.tile([1.0, 0, 0], (n_bg, 1)), np.tile([0, 1.0, 0], (n_fg, 1))])
    cloud = GaussianCloud(pos, np.full((n, 3), -1.6), np.tile([1.0, 0, 0, 0], (n, 1)), rng.uniform(-1, 2, n),
                         rng.uniform(0, 1, (n, 3)), feats, dtype=np.float64)
    model = SceneModel(cloud, None, FeatureCodec(6, 3, hidden=(4,)), RenderSettings(f64=True))
    bg_only = GaussianCloud(bg_pos, np.full((n_bg, 3), -1.6), np.tile([1.0, 0, 0, 0], (n_bg, 1)),
                            cloud.opacity_logit[:n_bg], cloud.color[:n_bg], feats[:n_bg], dtype=np.float64)
    return model, bg_only, n_bg
