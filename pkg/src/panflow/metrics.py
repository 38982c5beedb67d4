"""Reference (PSNR, SSIM, SAM, ERGAS) and no-reference (D_lambda, D_s, QNR) metrics.

All functions take channel-last images (H x W x C) with values in [0, 1].
"""
import csv
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .data import wald_degrade
from .errors import ShapeError

PSNR_CAP = 99.0
REFERENCE_METRICS = ("psnr", "ssim", "sam", "ergas")
NO_REFERENCE_METRICS = ("d_lambda", "d_s", "qnr")


def _pair(x, y):
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape:
        raise ShapeError(f"image shapes differ: {x.shape} vs {y.shape}")
    if x.ndim == 2:
        x, y = x[..., None], y[..., None]
    return x, y


def psnr(x, y, peak=1.0):
    """10 log10(peak^2 / MSE) in dB, capped at 99 dB (zero MSE reports the cap)."""
    x, y = _pair(x, y)
    mse = np.mean((x - y) ** 2)
    if mse == 0:
        return PSNR_CAP
    return min(10.0 * math.log10(peak * peak / mse), PSNR_CAP)


def gaussian_window(size=11, sigma=1.5):
    r = size // 2
    g = np.exp(-0.5 * (np.arange(-r, r + 1) / sigma) ** 2)
    return g / g.sum()


def _filter_valid(img, g):
    r = len(g) // 2
    out = ndimage.correlate1d(img, g, axis=0, mode="constant")
    out = ndimage.correlate1d(out, g, axis=1, mode="constant")
    return out[r:img.shape[0] - r, r:img.shape[1] - r]


def ssim(x, y, data_range=1.0, window=11, sigma=1.5, k1=0.01, k2=0.03):
    """Mean SSIM over valid 11x11 Gaussian windows, averaged over bands."""
    x, y = _pair(x, y)
    if x.shape[0] < window or x.shape[1] < window:
        raise ShapeError(f"image {x.shape[:2]} is smaller than the {window}x{window} window")
    g = gaussian_window(window, sigma)
    c1, c2 = (k1 * data_range) ** 2, (k2 * data_range) ** 2
    values = []
    for b in range(x.shape[2]):
        xb, yb = x[..., b], y[..., b]
        mx, my = _filter_valid(xb, g), _filter_valid(yb, g)
        sxx = _filter_valid(xb * xb, g) - mx * mx
        syy = _filter_valid(yb * yb, g) - my * my
        sxy = _filter_valid(xb * yb, g) - mx * my
        smap = ((2 * mx * my + c1) * (2 * sxy + c2)) / ((mx * mx + my * my + c1) * (sxx + syy + c2))
        values.append(smap.mean())
    return float(np.mean(values))


def sam(x, y, return_skipped=False):
    """Mean spectral angle (radians); pixels with a zero spectrum are skipped."""
    x, y = _pair(x, y)
    if x.shape[2] < 2:
        raise ShapeError("SAM needs at least two bands")
    nx = np.sqrt(np.sum(x * x, axis=2))
    ny = np.sqrt(np.sum(y * y, axis=2))
    ok = (nx > 0) & (ny > 0)
    skipped = int(ok.size - ok.sum())
    if not ok.any():
        raise ValueError("every pixel has a zero spectrum; SAM is undefined")
    # 2*atan2(|u-v|, |u+v|) on unit vectors equals arccos(<u,v>) but keeps
    # full precision for nearly parallel spectra
    u = x[ok] / nx[ok][:, None]
    v = y[ok] / ny[ok][:, None]
    angle = 2.0 * np.arctan2(np.linalg.norm(u - v, axis=1), np.linalg.norm(u + v, axis=1))
    value = float(np.mean(angle))
    return (value, skipped) if return_skipped else value


def ergas(x, y, ratio=0.25):
    """ERGAS of fused ``x`` against reference ``y`` (order matters)."""
    x, y = _pair(x, y)
    rmse = np.sqrt(np.mean((x - y) ** 2, axis=(0, 1)))
    mu = np.mean(y, axis=(0, 1))
    if np.any(mu == 0):
        raise ValueError(f"reference band(s) {np.flatnonzero(mu == 0).tolist()} have zero mean")
    return float(100.0 * ratio * math.sqrt(np.mean((rmse / mu) ** 2)))


# --- no-reference ------------------------------------------------------------

@dataclass(frozen=True)
class QnrConfig:
    block_size: int = 32
    alpha: float = 1.0
    beta: float = 1.0
    p: float = 1.0
    q: float = 1.0

    def __post_init__(self):
        if self.block_size < 2 or min(self.alpha, self.beta, self.p, self.q) <= 0:
            raise ValueError("QnrConfig values must be positive (block_size >= 2)")


def q_index(a, b, block_size=32):
    """Universal image quality index averaged over sliding block x block windows."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 2:
        raise ShapeError(f"q_index needs two equal 2-D bands, got {a.shape} and {b.shape}")
    s = min(block_size, *a.shape)
    lo, hi = s // 2, s - 1 - s // 2

    def box(v):
        out = ndimage.uniform_filter(v, size=s, mode="constant")
        return out[lo:v.shape[0] - hi, lo:v.shape[1] - hi]

    ma, mb = box(a), box(b)
    va = box(a * a) - ma * ma
    vb = box(b * b) - mb * mb
    cov = box(a * b) - ma * mb
    msum = ma * ma + mb * mb
    vsum = va + vb
    tiny = 1e-12
    q = np.ones_like(ma)
    only_mean = (vsum < tiny) & (msum >= tiny)
    q[only_mean] = 2 * ma[only_mean] * mb[only_mean] / msum[only_mean]
    only_var = (vsum >= tiny) & (msum < tiny)
    q[only_var] = 2 * cov[only_var] / vsum[only_var]
    both = (vsum >= tiny) & (msum >= tiny)
    q[both] = 4 * cov[both] * ma[both] * mb[both] / (vsum[both] * msum[both])
    return float(q.mean())


def band_pair_q(img, block_size=32):
    """Q between every unordered pair of bands, in (0,1), (0,2), ..., (1,2), ... order."""
    img = np.asarray(img)
    c = img.shape[2]
    return np.array([q_index(img[..., i], img[..., j], block_size)
                     for i in range(c) for j in range(i + 1, c)])


def d_lambda(fused, lrms, config=QnrConfig()):
    """Spectral distortion: change of inter-band Q from LRMS to fused."""
    fused, lrms = np.asarray(fused), np.asarray(lrms)
    if fused.ndim != 3 or lrms.ndim != 3 or fused.shape[2] != lrms.shape[2]:
        raise ShapeError(f"incompatible fused {fused.shape} and LRMS {lrms.shape}")
    diff = np.abs(band_pair_q(fused, config.block_size) - band_pair_q(lrms, config.block_size))
    return float(min(np.mean(diff ** config.p) ** (1.0 / config.p), 1.0))


def d_s(fused, lrms, pan, config=QnrConfig()):
    """Spatial distortion: change of band-to-PAN Q between full and reduced scale."""
    fused, lrms, pan = np.asarray(fused), np.asarray(lrms), np.asarray(pan)
    if pan.ndim == 2:
        pan = pan[..., None]
    if fused.shape[:2] != pan.shape[:2] or fused.shape[2] != lrms.shape[2]:
        raise ShapeError(f"incompatible fused {fused.shape}, LRMS {lrms.shape}, PAN {pan.shape}")
    scale = fused.shape[0] // lrms.shape[0]
    if scale * lrms.shape[0] != fused.shape[0] or scale * lrms.shape[1] != fused.shape[1]:
        raise ShapeError(f"fused {fused.shape[:2]} is not an integer multiple of LRMS {lrms.shape[:2]}")
    pan_low = wald_degrade(pan.astype(np.float64), scale)[..., 0]
    diffs = [abs(q_index(fused[..., b], pan[..., 0], config.block_size)
                 - q_index(lrms[..., b], pan_low, config.block_size)) for b in range(fused.shape[2])]
    return float(min(np.mean(np.asarray(diffs) ** config.q) ** (1.0 / config.q), 1.0))


def qnr(dl, ds, alpha=1.0, beta=1.0):
    if not (0 <= dl <= 1 and 0 <= ds <= 1):
        raise ValueError("distortion indices must lie in [0, 1]")
    return (1.0 - dl) ** alpha * (1.0 - ds) ** beta


def no_reference_metrics(fused, lrms, pan, config=QnrConfig()):
    dl = d_lambda(fused, lrms, config)
    ds = d_s(fused, lrms, pan, config)
    return {"d_lambda": dl, "d_s": ds, "qnr": qnr(dl, ds, config.alpha, config.beta)}


def reference_metrics(pred, ref, ratio=0.25):
    return {
        "psnr": psnr(pred, ref),
        "ssim": ssim(pred, ref),
        "sam": sam(pred, ref),
        "ergas": ergas(pred, ref, ratio),
    }


# --- reporting ---------------------------------------------------------------

@dataclass
class MetricReport:
    """Per-image metric rows plus their arithmetic means."""

    columns: tuple = REFERENCE_METRICS
    per_image: dict = field(default_factory=dict)
    sam_skipped: int = 0

    def add(self, image_id, values):
        if image_id in self.per_image:
            raise ValueError(f"duplicate image id {image_id!r}")
        self.per_image[image_id] = {k: float(values.get(k, float("nan"))) for k in self.columns}

    @property
    def count(self):
        return len(self.per_image)

    def aggregate(self):
        if not self.per_image:
            return {k: float("nan") for k in self.columns}
        return {k: float(np.mean([row[k] for row in self.per_image.values()])) for k in self.columns}

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(("id",) + tuple(self.columns))
            for image_id, row in self.per_image.items():
                w.writerow([image_id] + [repr(row[k]) for k in self.columns])
            agg = self.aggregate()
            w.writerow(["MEAN"] + [repr(agg[k]) for k in self.columns])


def read_metric_csv(path):
    """Return ``(rows, mean_row)`` from a CSV written by :meth:`MetricReport.to_csv`."""
    rows, mean_row = {}, None
    with open(path, newline="") as fh:
        for rec in csv.DictReader(fh):
            image_id = rec.pop("id")
            vals = {k: float(v) for k, v in rec.items()}
            if image_id == "MEAN":
                mean_row = vals
            else:
                rows[image_id] = vals
    return rows, mean_row
