"""Synthetic scenes, reduced-resolution (Wald) triples and dataset manifests.

Images here are channel-last float arrays (H x W x C) in [0, 1].
"""
import math
import os
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .errors import ConfigError, ShapeError
from .raster import read_raster, write_raster


@dataclass(frozen=True)
class SyntheticSceneConfig:
    bands: int = 4
    size: int = 128
    seed: int = 0
    rectangles: int = 12
    gradients: int = 2
    octaves: int = 4
    pan_weights: tuple = None

    def __post_init__(self):
        if self.bands < 1 or self.size < 1:
            raise ConfigError("bands and size must be positive")
        if min(self.rectangles, self.gradients, self.octaves) < 0:
            raise ConfigError("feature counts must be non-negative")
        if self.pan_weights is not None:
            w = np.asarray(self.pan_weights, dtype=np.float64)
            if w.shape != (self.bands,) or np.any(w <= 0) or not math.isclose(w.sum(), 1.0, abs_tol=1e-9):
                raise ConfigError("pan_weights must be one positive weight per band, summing to 1")

    def weights(self):
        if self.pan_weights is None:
            return np.full(self.bands, 1.0 / self.bands)
        return np.asarray(self.pan_weights, dtype=np.float64)


@dataclass
class SceneTriple:
    H: np.ndarray
    L: np.ndarray
    P: np.ndarray
    id: str = ""

    @property
    def geometry(self):
        return self.H.shape[0], self.L.shape[0], self.P.shape[0]


def _smooth_noise(rng, size, cells):
    coarse = rng.standard_normal((cells + 1, cells + 1))
    field_ = ndimage.zoom(coarse, size / (cells + 1), order=3, mode="reflect", grid_mode=True)
    return field_[:size, :size]


def synth_scene(config):
    """Deterministic multispectral scene: flat regions, ramps and shared texture."""
    rng = np.random.default_rng(config.seed)
    n, b = config.size, config.bands
    img = np.full((n, n, b), 0.5)
    yy, xx = np.mgrid[0:n, 0:n] / max(n - 1, 1)

    for _ in range(config.rectangles):
        y0, x0 = rng.integers(0, n, size=2)
        hh, ww = rng.integers(n // 8 + 1, n // 2 + 2, size=2)
        spectrum = np.clip(rng.uniform(0.15, 0.85) + 0.15 * rng.standard_normal(b), 0.05, 0.95)
        img[y0:y0 + hh, x0:x0 + ww] = spectrum

    for _ in range(config.gradients):
        angle = rng.uniform(0, 2 * math.pi)
        ramp = (xx - 0.5) * math.cos(angle) + (yy - 0.5) * math.sin(angle)
        amp = 0.25 * (1.0 + 0.3 * rng.standard_normal(b))
        img += ramp[..., None] * amp

    for octave in range(config.octaves):
        tex = _smooth_noise(rng, n, 2 ** (octave + 2))
        gain = 0.08 * 0.6 ** octave * (1.0 + 0.25 * rng.standard_normal(b))
        img += tex[..., None] * gain

    return np.clip(img, 0.0, 1.0).astype(np.float32)


def pan_from_hrms(H, weights):
    """Pixel-wise convex combination of the bands: P = sum_b w_b H_b."""
    H = np.asarray(H)
    w = np.asarray(weights, dtype=np.float64)
    if w.ndim != 1 or w.shape[0] != H.shape[-1]:
        raise ShapeError(f"{w.shape[0] if w.ndim else 0} weights for {H.shape[-1]} bands")
    if np.any(w < 0) or not math.isclose(w.sum(), 1.0, rel_tol=0, abs_tol=1e-9):
        raise ConfigError("PAN weights must be non-negative and sum to 1")
    return np.tensordot(H.astype(np.float64), w, axes=([-1], [0]))[..., None].astype(H.dtype)


def gaussian_kernel(sigma):
    radius = math.ceil(2 * sigma)
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-0.5 * (x / sigma) ** 2)
    return k / k.sum()


def wald_degrade(H, s, mode="reflect"):
    """Gaussian low-pass (sigma = s/2) followed by s x s block averaging."""
    H = np.asarray(H)
    if H.ndim == 2:
        H = H[:, :, None]
    h, w = H.shape[:2]
    if s < 1 or h % s or w % s:
        raise ShapeError(f"image {h}x{w} is not divisible by scale {s}")
    k = gaussian_kernel(s / 2.0)
    blurred = ndimage.correlate1d(H.astype(np.float64), k, axis=0, mode=mode)
    blurred = ndimage.correlate1d(blurred, k, axis=1, mode=mode)
    low = blurred.reshape(h // s, s, w // s, s, -1).mean(axis=(1, 3))
    return low.astype(H.dtype)


def make_triple(H_full, scale=4, weights=None, triple_id=""):
    """Reduced-resolution triple: H is the ground truth, P and L derive from it."""
    H_full = np.asarray(H_full, dtype=np.float32)
    b = H_full.shape[-1]
    if weights is None:
        weights = np.full(b, 1.0 / b)
    P = np.clip(pan_from_hrms(H_full, weights), 0.0, 1.0)
    L = np.clip(wald_degrade(H_full, scale), 0.0, 1.0)
    return SceneTriple(H=H_full, L=L, P=P, id=triple_id)


def bicubic_upsample(L, s):
    """Cubic-spline upsampling of a channel-last image by ``s`` (baseline)."""
    L = np.asarray(L, dtype=np.float64)
    # band by band: a zoom over the whole array would also spline-filter the band axis
    up = np.stack([ndimage.zoom(L[..., b], s, order=3, mode="reflect", grid_mode=True)
                   for b in range(L.shape[2])], axis=-1)
    return np.clip(up, 0.0, 1.0).astype(np.float32)


def scene_seed(seed, index):
    return int(np.random.SeedSequence([seed, index]).generate_state(1)[0])


def synth_triples(count, bands=4, size=128, seed=0, scale=4, **scene_kw):
    out = []
    for i in range(count):
        cfg = SyntheticSceneConfig(bands=bands, size=size, seed=scene_seed(seed, i), **scene_kw)
        out.append(make_triple(synth_scene(cfg), scale, cfg.weights(), f"scene{i:04d}"))
    return out


# --- manifests ---------------------------------------------------------------

@dataclass
class ManifestEntry:
    id: str
    h_path: str
    l_path: str
    p_path: str


@dataclass
class DatasetManifest:
    entries: list = field(default_factory=list)
    split: str = "train"
    seed: int = 0
    root: str = "."

    def resolve(self, path):
        if path == "-":
            return None
        return path if os.path.isabs(path) else os.path.join(self.root, path)

    @property
    def ids(self):
        return [e.id for e in self.entries]


def format_manifest(manifest):
    lines = [f"# split={manifest.split} seed={manifest.seed}"]
    lines += ["\t".join((e.id, e.h_path, e.l_path, e.p_path)) for e in manifest.entries]
    return "\n".join(lines) + "\n"


def write_manifest(manifest, path):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(format_manifest(manifest))


def read_manifest(path):
    """Parse ``id<TAB>h<TAB>l<TAB>p`` lines; paths are relative to the manifest."""
    m = DatasetManifest(root=os.path.dirname(os.path.abspath(path)))
    seen = set()
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.rstrip("\r\n")
            if line.startswith("#"):
                for tok in line[1:].split():
                    key, _, val = tok.partition("=")
                    if key == "split":
                        m.split = val
                    elif key == "seed" and val.lstrip("-").isdigit():
                        m.seed = int(val)
                continue
            if not line.strip():
                continue
            parts = line.split("\t")
            if len(parts) != 4:
                raise ConfigError(f"{path}:{lineno}: expected 4 tab-separated fields, got {len(parts)}")
            if parts[0] in seen:
                raise ConfigError(f"{path}:{lineno}: duplicate id {parts[0]!r}")
            seen.add(parts[0])
            m.entries.append(ManifestEntry(*parts))
    return m


def load_triples(manifest):
    """Read every triple in the manifest. A ``-`` HRMS path yields ``H=None``."""
    if isinstance(manifest, str):
        manifest = read_manifest(manifest)
    out = []
    for e in manifest.entries:
        h_path = manifest.resolve(e.h_path)
        H = read_raster(h_path) if h_path else None
        L = read_raster(manifest.resolve(e.l_path))
        P = read_raster(manifest.resolve(e.p_path))
        out.append(SceneTriple(H=H, L=L, P=P, id=e.id))
    return out


def write_dataset(out_dir, triples, split="train", seed=0):
    """Write triples as PFNR rasters plus ``manifest.tsv``; returns the manifest path."""
    os.makedirs(out_dir, exist_ok=True)
    m = DatasetManifest(split=split, seed=seed, root=out_dir)
    for t in triples:
        names = [f"{t.id}_{tag}.pfnr" for tag in ("hrms", "lrms", "pan")]
        for arr, name in zip((t.H, t.L, t.P), names):
            write_raster(arr, os.path.join(out_dir, name))
        m.entries.append(ManifestEntry(t.id, *names))
    path = os.path.join(out_dir, "manifest.tsv")
    write_manifest(m, path)
    return path
