"""Self-checks behind ``panflow verify``.

Each check returns a :class:`CheckResult` with the measured error and the
tolerance it was held to. The fast level covers identities and round trips;
the full level adds the brute-force Jacobian and finite-difference gradients.
"""
import math
import time
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .checkpoint import decode_checkpoint, encode_checkpoint
from .errors import ChecksumError, FormatError
from .flow import ModelConfig, PanFlowModel, gaussian_logpdf, randomize_parameters
from .metrics import ergas, psnr, qnr, sam, ssim, PSNR_CAP
from .raster import decode_raster, encode_raster
from .train import nll_graph

LEVELS = ("fast", "full")


@dataclass
class CheckResult:
    name: str
    passed: bool
    measured: float
    tolerance: float
    seconds: float = 0.0
    detail: str = ""

    def line(self):
        status = "PASS" if self.passed else "FAIL"
        extra = f"  ({self.detail})" if self.detail else ""
        return f"{status} {self.name}: measured {self.measured:.3e} tol {self.tolerance:.1e} [{self.seconds:.2f}s]{extra}"


def _random_triple(rng, bands, size, scale, batch=1):
    H = rng.uniform(0, 1, (batch, bands, size, size))
    L = rng.uniform(0, 1, (batch, bands, size // scale, size // scale))
    P = rng.uniform(0, 1, (batch, 1, size, size))
    return H, L, P


def _tiny_model(bands=2, scale=2, blocks=2, hidden=2, share=True, seed=0):
    cfg = ModelConfig(bands=bands, scale=scale, blocks=blocks, share_params=share, hidden_channels=hidden)
    return randomize_parameters(PanFlowModel(cfg, seed=seed, dtype=np.float64), seed + 1, 0.3)


# --- individual checks ------------------------------------------------------

def check_conv_against_loops(seed=0):
    """conv2d vs a direct nested-loop correlation."""
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((2, 3, 5, 6))
    w = rng.standard_normal((4, 3, 3, 3))
    b = rng.standard_normal(4)
    got = T.conv2d(T.Tensor(x), T.Tensor(w), T.Tensor(b)).data
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    ref = np.zeros_like(got)
    for i in range(5):
        for j in range(6):
            patch = xp[:, :, i:i + 3, j:j + 3]
            ref[:, :, i, j] = np.einsum("ncij,ocij->no", patch, w) + b
    return float(np.max(np.abs(got - ref))), 1e-12


def check_invertibility(trials=20, seed=0):
    cfg = ModelConfig(bands=4, scale=4, blocks=4, hidden_channels=8)
    worst = 0.0
    for t in range(trials):
        model = randomize_parameters(PanFlowModel(cfg, seed=seed + t, dtype=np.float64), seed + t, 0.1)
        H, L, P = _random_triple(np.random.default_rng(seed + t), 4, 8, 4)
        z, _ = model.forward(H, L, P)
        worst = max(worst, float(np.max(np.abs(model.inverse(z, L, P) - H))))
    return worst, 1e-8


def check_identity_init(seed=0):
    cfg = ModelConfig(bands=4, scale=4, blocks=4, hidden_channels=8)
    model = PanFlowModel(cfg, seed=seed, dtype=np.float64)
    H, L, P = _random_triple(np.random.default_rng(seed), 4, 8, 4, batch=2)
    z, logdet = model.forward(H, L, P)
    nll = -float(nll_graph(model, H, L, P)[0].data)
    closed = float(np.mean(gaussian_logpdf(H)))
    return max(float(np.max(np.abs(z - H))), float(np.max(np.abs(logdet))), abs(nll - closed)), 1e-9


def check_raster_roundtrip(seed=0):
    img = np.random.default_rng(seed).uniform(0, 1, (7, 5, 3)).astype(np.float32)
    back = decode_raster(encode_raster(img))
    return float(np.max(np.abs(back - img))), 0.0


def check_checkpoint_roundtrip(seed=0):
    cfg = ModelConfig(bands=2, scale=2, blocks=2, hidden_channels=4, share_params=False)
    model = randomize_parameters(PanFlowModel(cfg, seed=seed), seed)
    back = decode_checkpoint(encode_checkpoint(model))
    a, b = model.named_parameters(), back.named_parameters()
    if a.keys() != b.keys() or back.config != cfg:
        return math.inf, 0.0
    return max(float(np.max(np.abs(a[k].data - b[k].data))) for k in a), 0.0


def check_checkpoint_tamper(seed=0):
    """A flipped byte must be reported as a checksum failure."""
    cfg = ModelConfig(bands=2, scale=2, blocks=1, hidden_channels=2)
    buf = bytearray(encode_checkpoint(PanFlowModel(cfg, seed=seed)))
    buf[len(buf) // 2] ^= 0x01
    try:
        decode_checkpoint(bytes(buf))
    except ChecksumError:
        return 0.0, 0.0
    except FormatError:
        return 1.0, 0.0
    return 1.0, 0.0


def check_metric_identities(seed=0):
    img = np.random.default_rng(seed).uniform(0.1, 1, (16, 16, 3))
    errs = [
        abs(psnr(img, img) - PSNR_CAP),
        abs(ssim(img, img) - 1.0),
        sam(img, img),
        ergas(img, img),
        abs(qnr(0.0, 0.0) - 1.0),
        abs(psnr(np.zeros((4, 4)), np.full((4, 4), 0.1)) - 20.0),
    ]
    return float(max(errs)), 1e-10


def brute_force_logdet(model, H, L, P, step=1e-5):
    """log|det J| of the forward map from a central-difference Jacobian."""
    H = np.asarray(H, dtype=np.float64)
    d = H.size
    J = np.empty((d, d))
    flat = H.ravel()
    for i in range(d):
        e = np.zeros(d)
        e[i] = step
        zp, _ = model.forward((flat + e).reshape(H.shape), L, P)
        zm, _ = model.forward((flat - e).reshape(H.shape), L, P)
        J[:, i] = (zp - zm).ravel() / (2 * step)
    return float(np.linalg.slogdet(J)[1])


def check_logdet_jacobian(trials=3, seed=0):
    worst = 0.0
    for t in range(trials):
        model = _tiny_model(bands=2, scale=2, blocks=2, hidden=4, seed=seed + t)
        rng = np.random.default_rng(seed + 100 + t)
        H = rng.uniform(0, 1, (2, 4, 4))
        L = rng.uniform(0, 1, (2, 2, 2))
        P = rng.uniform(0, 1, (1, 4, 4))
        _, analytic = model.forward(H, L, P)
        brute = brute_force_logdet(model, H, L, P)
        worst = max(worst, abs(analytic - brute) / max(abs(brute), 1e-12))
    return worst, 1e-4


def fd_nll_gradient(model, H, L, P, step=1e-5):
    """Central finite-difference gradient of the batch NLL for every parameter."""
    out = {}
    for name, p in model.named_parameters().items():
        g = np.zeros(p.shape)
        flat = p.data.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            fp = float(nll_graph(model, H, L, P)[0].data)
            flat[i] = orig - step
            fm = float(nll_graph(model, H, L, P)[0].data)
            flat[i] = orig
            g.reshape(-1)[i] = (fp - fm) / (2 * step)
        out[name] = g
    return out


def grad_rel_error(analytic, numeric, floor=1e-4):
    """Largest elementwise |a - n| / max(|a|, |n|, floor) over all parameters.

    The floor keeps entries that are themselves at the finite-difference
    noise level (about 1e-9 absolute here) from dominating the maximum.
    """
    worst = 0.0
    for name, a in analytic.items():
        n = numeric[name]
        denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
        worst = max(worst, float(np.max(np.abs(a - n) / denom)))
    return worst


def analytic_nll_gradient(model, H, L, P):
    tape = T.GradTape()
    with tape:
        loss = nll_graph(model, H, L, P)[0]
    model.zero_grads()
    T.backward(loss, tape)
    return {name: p.grad.copy() for name, p in model.named_parameters().items()}


def check_nll_gradient(seed=0, share=True):
    model = _tiny_model(bands=2, scale=2, blocks=2, hidden=2, share=share, seed=seed)
    H, L, P = _random_triple(np.random.default_rng(seed), 2, 4, 2, batch=2)
    a = analytic_nll_gradient(model, H, L, P)
    n = fd_nll_gradient(model, H, L, P)
    return grad_rel_error(a, n), 1e-4


# --- suite ------------------------------------------------------------------

FAST_CHECKS = (
    ("conv2d_vs_loops", check_conv_against_loops),
    ("invertibility", check_invertibility),
    ("identity_init", check_identity_init),
    ("raster_roundtrip", check_raster_roundtrip),
    ("checkpoint_roundtrip", check_checkpoint_roundtrip),
    ("checkpoint_tamper_detected", check_checkpoint_tamper),
    ("metric_identities", check_metric_identities),
)

FULL_CHECKS = FAST_CHECKS + (
    ("logdet_vs_jacobian", check_logdet_jacobian),
    ("nll_gradient_shared", lambda: check_nll_gradient(share=True)),
    ("nll_gradient_unshared", lambda: check_nll_gradient(share=False)),
)


def run_checks(level="fast", on_result=None):
    if level not in LEVELS:
        raise ValueError(f"level must be one of {LEVELS}")
    results = []
    for name, fn in (FAST_CHECKS if level == "fast" else FULL_CHECKS):
        t0 = time.perf_counter()
        try:
            measured, tol = fn()
            passed = bool(measured <= tol)
            detail = ""
        except Exception as exc:  # a crashing check is a failed check
            measured, tol, passed, detail = math.inf, 0.0, False, f"{type(exc).__name__}: {exc}"
        res = CheckResult(name, passed, measured, tol, time.perf_counter() - t0, detail)
        results.append(res)
        if on_result is not None:
            on_result(res)
    return results


def check_checkpoint_file(path):
    """Integrity check of an existing checkpoint file."""
    t0 = time.perf_counter()
    try:
        with open(path, "rb") as fh:
            decode_checkpoint(fh.read())
        return CheckResult(f"checkpoint_integrity[{path}]", True, 0.0, 0.0, time.perf_counter() - t0)
    except (OSError, FormatError) as exc:
        return CheckResult(f"checkpoint_integrity[{path}]", False, 1.0, 0.0, time.perf_counter() - t0,
                           f"{type(exc).__name__}: {exc}")
