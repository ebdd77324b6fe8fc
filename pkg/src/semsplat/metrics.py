"""Image and segmentation metrics."""
import numpy as np
from scipy.ndimage import correlate1d

PSNR_CAP = 100.0
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
K1, K2 = 0.01, 0.03


class ShapeMismatch(ValueError):
    pass


class MetricUndefined(ValueError):
    pass


class EmptyList(MetricUndefined):
    pass


def _check(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeMismatch(f"{a.shape} vs {b.shape}")
    return a, b


def _psnr_from_mse(mse):
    if mse < 1e-10:
        return PSNR_CAP
    return float(min(PSNR_CAP, 10.0 * np.log10(1.0 / mse)))


def psnr(a, b) -> float:
    a, b = _check(a, b)
    return _psnr_from_mse(float(np.mean((a - b) ** 2)))


def gaussian_window(size=SSIM_WINDOW, sigma=SSIM_SIGMA):
    x = np.arange(size) - (size - 1) / 2.0
    w = np.exp(-x * x / (2 * sigma * sigma))
    return w / w.sum()


def _filter_valid(img, w):
    # separable Gaussian filter, keeping only windows fully inside the image
    half = len(w) // 2
    out = correlate1d(correlate1d(img, w, axis=0, mode="constant"), w, axis=1, mode="constant")
    return out[half:img.shape[0] - half, half:img.shape[1] - half]


def ssim_map(a, b):
    """Per-window SSIM (averaged over channels) for windows fully inside the image.

    Entry (i, j) belongs to the window centred on pixel (i + 5, j + 5).
    """
    a, b = _check(a, b)
    if a.ndim == 2:
        a, b = a[..., None], b[..., None]
    if min(a.shape[:2]) < SSIM_WINDOW:
        raise ShapeMismatch(f"images must be at least {SSIM_WINDOW}x{SSIM_WINDOW}")
    w = gaussian_window()
    c1, c2 = (K1 * 1.0) ** 2, (K2 * 1.0) ** 2
    maps = []
    for ch in range(a.shape[2]):
        x, y = a[..., ch], b[..., ch]
        mx, my = _filter_valid(x, w), _filter_valid(y, w)
        sxx = _filter_valid(x * x, w) - mx * mx
        syy = _filter_valid(y * y, w) - my * my
        sxy = _filter_valid(x * y, w) - mx * my
        maps.append(((2 * mx * my + c1) * (2 * sxy + c2)) / ((mx * mx + my * my + c1) * (sxx + syy + c2)))
    return np.mean(maps, axis=0)


def ssim(a, b) -> float:
    return float(np.mean(ssim_map(a, b)))


def dssim(a, b) -> float:
    return (1.0 - ssim(a, b)) / 2.0


def masked_psnr(rendered, target, mask) -> float:
    rendered, target = _check(rendered, target)
    mask = np.asarray(mask).astype(bool)
    if not mask.any():
        raise MetricUndefined("empty mask")
    return _psnr_from_mse(float(np.mean((rendered[mask] - target[mask]) ** 2)))


def masked_ssim(rendered, target, mask) -> float:
    mask = np.asarray(mask).astype(bool)
    smap = ssim_map(rendered, target)
    half = SSIM_WINDOW // 2
    centers = mask[half:mask.shape[0] - half, half:mask.shape[1] - half]
    if not centers.any():
        raise MetricUndefined("no SSIM window centre lies inside the mask")
    return float(np.mean(smap[centers]))


def masked_metrics(rendered, target, mask) -> dict:
    """Foreground-only PSNR (masked MSE) and SSIM (windows centred in the mask)."""
    return {"psnr": masked_psnr(rendered, target, mask), "ssim": masked_ssim(rendered, target, mask)}


def iou(pred, gt) -> float:
    pred = np.asarray(pred).astype(bool)
    gt = np.asarray(gt).astype(bool)
    if pred.shape != gt.shape:
        raise ShapeMismatch(f"{pred.shape} vs {gt.shape}")
    union = np.count_nonzero(pred | gt)
    if union == 0:
        return 1.0
    return np.count_nonzero(pred & gt) / union


def miou(preds, gts) -> float:
    """Mean over frames of intersection-over-union; empty-vs-empty counts as 1."""
    preds, gts = list(preds), list(gts)
    if not preds:
        raise EmptyList("empty mask list")
    if len(preds) != len(gts):
        raise ShapeMismatch(f"{len(preds)} predictions for {len(gts)} ground-truth masks")
    return float(np.mean([iou(p, g) for p, g in zip(preds, gts)]))
