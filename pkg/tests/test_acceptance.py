"""Acceptance suite: one PASS/FAIL line per criterion.

Run with ``pytest tests/test_acceptance.py -v`` (lines are printed even
when output capture is on) or directly with ``python3 tests/test_acceptance.py``.
The desk-learning criteria train real models and take several minutes.
"""
import math
import os
import sys
import time

import numpy as np
import pytest

sys.path.insert(0, os.path.dirname(__file__))

from panflow.checkpoint import decode_checkpoint, encode_checkpoint
from panflow.data import bicubic_upsample, synth_triples
from panflow.errors import (BadMagicError, ChecksumError, DimensionError, FormatError,
                            TruncatedFileError, UnsupportedVersionError)
from panflow.experiments import predict, run_ablation, sample_candidates
from panflow.flow import ModelConfig, PanFlowModel, randomize_parameters, select_max_probability
from panflow.metrics import PSNR_CAP, ergas, psnr, q_index, qnr, sam, ssim
from panflow.raster import decode_raster, encode_raster
from panflow.train import TrainConfig, evaluate_bpd, nll_graph, train
from panflow.verify import analytic_nll_gradient, brute_force_logdet, fd_nll_gradient, grad_rel_error

from oracles import ergas_direct, psnr_direct, q_sliding, sam_pixels, ssim_windows

# desk-scale settings shared by criteria 5 to 8
DESK_MODEL = dict(bands=4, scale=4, blocks=4, hidden_channels=8)
DESK_TRAIN = TrainConfig(lr0=3e-3, batch_size=1, pretrain_epochs=100, nll_epochs=50,
                         lr_decay_every=200, seed=0)
DESK_COUNT, DESK_SIZE, TEST_COUNT = 64, 128, 8
ABLATION_COUNT, ABLATION_SIZE = 32, 32


def report(number, passed, text, seconds=None):
    took = f" [{seconds:.1f}s]" if seconds is not None else ""
    line = f"CRITERION {number:>2} {'PASS' if passed else 'FAIL'}: {text}{took}"
    capman = _capture_manager()
    if capman is not None:
        with capman.global_and_fixture_disabled():
            print(line, flush=True)
    else:
        print(line, flush=True)
    assert passed, line


_PYTEST_CONFIG = None


def _capture_manager():
    if _PYTEST_CONFIG is None:
        return None
    return _PYTEST_CONFIG.pluginmanager.getplugin("capturemanager")


@pytest.fixture(autouse=True, scope="session")
def _remember_config(pytestconfig):
    global _PYTEST_CONFIG
    _PYTEST_CONFIG = pytestconfig
    yield


def _random_inputs(rng, bands, size, scale, batch=1):
    return (rng.uniform(0, 1, (batch, bands, size, size)),
            rng.uniform(0, 1, (batch, bands, size // scale, size // scale)),
            rng.uniform(0, 1, (batch, 1, size, size)))


# --- criteria 1 to 4, parameterized by sharing so criterion 9 can reuse them ---

def invertibility(share, trials=100):
    cfg = ModelConfig(bands=4, scale=4, blocks=4, hidden_channels=8, share_params=share)
    models = [randomize_parameters(PanFlowModel(cfg, seed=t, dtype=np.float64), t, 0.1) for t in range(trials)]
    inputs = [_random_inputs(np.random.default_rng(1000 + t), 4, 8, 4, batch=4) for t in range(trials)]
    t0 = time.perf_counter()
    worst = 0.0
    for model, (H, L, P) in zip(models, inputs):
        z, _ = model.forward(H, L, P)
        worst = max(worst, float(np.max(np.abs(model.inverse(z, L, P) - H))))
    return worst, time.perf_counter() - t0


def logdet_error(share, trials=10):
    t0 = time.perf_counter()
    worst = 0.0
    for t in range(trials):
        cfg = ModelConfig(bands=2, scale=2, blocks=2, hidden_channels=4, share_params=share)
        model = randomize_parameters(PanFlowModel(cfg, seed=t, dtype=np.float64), 50 + t, 0.3)
        H, L, P = _random_inputs(np.random.default_rng(t), 2, 4, 2)
        H, L, P = H[0], L[0], P[0]
        _, analytic = model.forward(H, L, P)
        brute = brute_force_logdet(model, H, L, P, step=1e-5)
        worst = max(worst, abs(analytic - brute) / abs(brute))
    return worst, time.perf_counter() - t0


def gradient_error(share):
    cfg = ModelConfig(bands=2, scale=2, blocks=2, hidden_channels=2, share_params=share)
    model = randomize_parameters(PanFlowModel(cfg, seed=3, dtype=np.float64), 4, 0.3)
    H, L, P = _random_inputs(np.random.default_rng(5), 2, 4, 2, batch=2)
    t0 = time.perf_counter()
    err = grad_rel_error(analytic_nll_gradient(model, H, L, P), fd_nll_gradient(model, H, L, P, step=1e-5))
    return err, model.param_count(), time.perf_counter() - t0


def identity_errors(share):
    worst_z = worst_ld = worst_nll = 0.0
    for blocks in (1, 2, 3, 4):
        cfg = ModelConfig(bands=4, scale=4, blocks=blocks, hidden_channels=8, share_params=share)
        model = PanFlowModel(cfg, seed=blocks, dtype=np.float64)
        H, L, P = _random_inputs(np.random.default_rng(blocks), 4, 8, 4, batch=3)
        z, logdet = model.forward(H, L, P)
        nll = float(nll_graph(model, H, L, P)[0].data)
        closed = float(np.mean(0.5 * np.sum(H.reshape(3, -1) ** 2, axis=1) + 0.5 * H[0].size * math.log(2 * math.pi)))
        worst_z = max(worst_z, float(np.max(np.abs(z - H))))
        worst_ld = max(worst_ld, float(np.max(np.abs(logdet))))
        worst_nll = max(worst_nll, abs(nll - closed))
    return worst_z, worst_ld, worst_nll


def test_criterion_01_invertibility():
    worst, took = invertibility(share=True)
    report(1, worst < 1e-8 and took < 2.0, f"max |f^-1(f(H)) - H| = {worst:.2e} over 100 trials (< 1e-8)", took)


def test_criterion_02_logdet():
    worst, took = logdet_error(share=True)
    report(2, worst < 1e-4 and took < 30, f"logdet vs brute-force Jacobian rel err {worst:.2e} (< 1e-4)", took)


def test_criterion_03_gradient():
    err, count, took = gradient_error(share=True)
    report(3, err < 1e-4 and count <= 2000 and took < 60,
           f"NLL gradient vs finite differences rel err {err:.2e} (< 1e-4), {count} params", took)


def test_criterion_04_identity_init():
    z, ld, nll = identity_errors(share=True)
    report(4, z < 1e-12 and ld == 0.0 and nll < 1e-9,
           f"|z - H| = {z:.1e}, |logdet| = {ld:.1e}, |NLL - Gaussian NLL| = {nll:.1e}")


# --- desk-scale learning --------------------------------------------------------------

def _mean_psnr(preds, triples):
    return float(np.mean([psnr(p, t.H) for p, t in zip(preds, triples)]))


@pytest.fixture(scope="module")
def desk():
    train_set = synth_triples(DESK_COUNT, size=DESK_SIZE, seed=0)
    test_set = synth_triples(TEST_COUNT, size=DESK_SIZE, seed=1)
    model = PanFlowModel(ModelConfig(**DESK_MODEL), seed=DESK_TRAIN.seed)
    bpd0 = evaluate_bpd(model, train_set)
    t0 = time.perf_counter()
    train(model, train_set, DESK_TRAIN)
    took = time.perf_counter() - t0
    return {"model": model, "train": train_set, "test": test_set, "bpd0": bpd0,
            "bpd1": evaluate_bpd(model, train_set), "seconds": took}


@pytest.mark.slow
def test_criterion_05_desk_learning(desk):
    test_set = desk["test"]
    bicubic = _mean_psnr([bicubic_upsample(t.L, 4) for t in test_set], test_set)
    flow = _mean_psnr(predict(desk["model"], test_set), test_set)
    drop = desk["bpd0"] - desk["bpd1"]
    report(5, drop >= 0.5 and flow >= bicubic + 1.0 and desk["seconds"] < 1800,
           f"bpd {desk['bpd0']:.3f} -> {desk['bpd1']:.3f} (drop {drop:.3f} >= 0.5); "
           f"tau=0 PSNR {flow:.2f} dB vs bicubic {bicubic:.2f} dB (need +1.0)", desk["seconds"])


@pytest.mark.slow
def test_criterion_06_diversity_and_selection(desk):
    model, t = desk["model"], desk["test"][0]
    cands, logps, _ = sample_candidates(model, t.L, t.P, 6, 0.8, seed=0)
    distinct = all(np.max(np.abs(a - b)) > 0 for i, a in enumerate(cands) for b in cands[i + 1:])
    scores = [psnr(c, t.H) for c in cands]
    spread = max(scores) - min(scores)
    L, P = t.L.transpose(2, 0, 1), t.P.transpose(2, 0, 1)
    idx, _, _ = select_max_probability(model, [c.transpose(2, 0, 1) for c in cands], L, P)
    verified = [float(model.log_prob(c.transpose(2, 0, 1), L, P)) for c in cands]
    report(6, distinct and spread < 0.5 and idx == int(np.argmax(verified)),
           f"6 samples at tau=0.8 distinct={distinct}, PSNR spread {spread:.3f} dB (< 0.5), "
           f"selected {idx} == argmax {int(np.argmax(verified))}")


def _ablation_data():
    return (synth_triples(ABLATION_COUNT, size=ABLATION_SIZE, seed=0),
            synth_triples(TEST_COUNT, size=ABLATION_SIZE, seed=1))


@pytest.mark.slow
def test_criterion_07_more_stages_help():
    tr, te = _ablation_data()
    t0 = time.perf_counter()
    rows = run_ablation("stages", tr, te, ModelConfig(**DESK_MODEL), DESK_TRAIN, ks=(1, 4))
    k1, k4 = rows[0]["psnr"], rows[1]["psnr"]
    report(7, k4 >= k1 + 0.5, f"PSNR K=4 {k4:.2f} dB vs K=1 {k1:.2f} dB (need +0.5)", time.perf_counter() - t0)


@pytest.mark.slow
def test_criterion_08_both_conditions_best():
    tr, te = _ablation_data()
    t0 = time.perf_counter()
    rows = run_ablation("conditions", tr, te, ModelConfig(**DESK_MODEL), DESK_TRAIN)
    scores = {r["variant"]: r["psnr"] for r in rows}
    best = max(scores, key=scores.get)
    text = ", ".join(f"{k} {v:.2f}" for k, v in scores.items())
    report(8, best == "both", f"best mask is {best!r} ({text} dB)", time.perf_counter() - t0)


# --- sharing, metrics, serialization ----------------------------------------------------

def test_criterion_09_parameter_sharing():
    counts = {share: [PanFlowModel(ModelConfig(bands=4, blocks=k, hidden_channels=8, share_params=share)).param_count()
                      for k in (1, 2, 3, 4)] for share in (True, False)}
    constant = len(set(counts[True])) == 1
    increasing = all(a < b for a, b in zip(counts[False], counts[False][1:]))
    ok = {}
    for share in (True, False):
        inv, inv_t = invertibility(share)
        ld, ld_t = logdet_error(share)
        gr, n, gr_t = gradient_error(share)
        z, lg, nll = identity_errors(share)
        ok[share] = (inv < 1e-8 and inv_t < 2 and ld < 1e-4 and ld_t < 30 and gr < 1e-4 and n <= 2000
                     and gr_t < 60 and z < 1e-12 and lg == 0 and nll < 1e-9)
    report(9, constant and increasing and ok[True] and ok[False],
           f"shared counts {counts[True]}, unshared {counts[False]}; "
           f"criteria 1-4 shared={ok[True]} unshared={ok[False]}")


def test_criterion_10_metrics():
    rng = np.random.default_rng(0)
    x = rng.uniform(0.05, 1, (16, 16, 3))
    y = np.clip(x + 0.05 * rng.standard_normal(x.shape), 0.01, 1)
    ideal = (psnr(x, x) == PSNR_CAP and abs(ssim(x, x) - 1) < 1e-12 and sam(x, x) == 0.0
             and ergas(x, x) == 0.0 and qnr(0.0, 0.0) == 1.0)
    oracle_err = max(abs(psnr(x, y) - psnr_direct(x, y)), abs(ssim(x, y) - ssim_windows(x, y)),
                     abs(sam(x, y) - sam_pixels(x, y)), abs(ergas(x, y, 0.25) - ergas_direct(x, y, 0.25)))
    a, b = x[..., 0], y[..., 0]
    oracle_err = max(oracle_err, abs(q_index(a, b, 8) - q_sliding(a, b, 8)))
    e1, e2 = np.zeros((3, 3, 2)), np.zeros((3, 3, 2))
    e1[..., 0] = e2[..., 1] = 1
    flat = np.full((4, 4, 1), 0.5)
    checker = np.zeros((4, 4, 1))
    checker[::2] = 1
    exact = (psnr(np.zeros((4, 4, 1)), np.ones((4, 4, 1)), peak=10.0) == 20.0
             and abs(psnr(np.zeros((4, 4, 1)), np.full((4, 4, 1), 0.1)) - 20.0) < 1e-12
             and sam(e1, e2) == math.pi / 2 and ergas(checker, flat, 0.25) == 25.0)
    report(10, ideal and oracle_err < 1e-10 and exact,
           f"ideal values {ideal}, max oracle gap {oracle_err:.1e} (< 1e-10), 20 dB / pi/2 / 25.0 exact {exact}")


def _raises(fn, error):
    try:
        fn()
    except error:
        return True
    except Exception:
        return False
    return False


def test_criterion_11_serialization():
    cfg = ModelConfig(bands=4, blocks=3, hidden_channels=8, share_params=False)
    model = randomize_parameters(PanFlowModel(cfg, seed=1), 2, 0.1)
    blob = encode_checkpoint(model)
    back = decode_checkpoint(blob)
    ckpt_exact = encode_checkpoint(back) == blob and all(
        p.data.tobytes() == q.data.tobytes() for p, q in zip(model.parameters(), back.parameters()))
    img = np.random.default_rng(3).uniform(0, 1, (9, 7, 4)).astype(np.float32)
    raster_exact = decode_raster(encode_raster(img)).tobytes() == img.tobytes()

    flipped = bytearray(blob)
    flipped[len(blob) // 3] ^= 0x10
    rbuf = encode_raster(img)
    structured = all([
        _raises(lambda: decode_checkpoint(bytes(flipped)), ChecksumError),
        _raises(lambda: decode_checkpoint(b"JUNK" + blob[4:]), BadMagicError),
        _raises(lambda: decode_checkpoint(blob[:7]), TruncatedFileError),
        _raises(lambda: decode_raster(rbuf[:-1]), TruncatedFileError),
        _raises(lambda: decode_raster(b"PFNX" + rbuf[4:]), BadMagicError),
        _raises(lambda: decode_raster(rbuf[:4] + b"\x07\x00" + rbuf[6:]), UnsupportedVersionError),
        _raises(lambda: decode_raster(rbuf[:6] + b"\0\0\0\0" + rbuf[10:]), DimensionError),
    ])
    crashes = 0
    rng = np.random.default_rng(4)
    for _ in range(200):
        buf = bytearray(rng.choice([blob, rbuf]))
        pos = rng.integers(0, len(buf))
        buf[pos] = rng.integers(0, 256)
        cut = bytes(buf[:rng.integers(0, len(buf) + 1)])
        for data in (bytes(buf), cut):
            for decode in (decode_checkpoint, decode_raster):
                try:
                    decode(data)
                except FormatError:
                    pass
                except Exception:
                    crashes += 1
    report(11, ckpt_exact and raster_exact and structured and crashes == 0,
           f"checkpoint bit-exact {ckpt_exact}, raster bit-exact {raster_exact}, "
           f"structured errors {structured}, crashes on 800 corrupted inputs {crashes}")


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-q", "-p", "no:cacheprovider"]))
