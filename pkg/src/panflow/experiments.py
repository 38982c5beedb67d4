"""Prediction, evaluation and ablation drivers built on the library pieces."""
import logging
from dataclasses import replace

import numpy as np

from .data import bicubic_upsample
from .flow import ModelConfig, PanFlowModel, sample_latent, select_index
from .metrics import (NO_REFERENCE_METRICS, REFERENCE_METRICS, MetricReport, QnrConfig,
                      no_reference_metrics, reference_metrics)
from .train import train

logger = logging.getLogger(__name__)


def _chw(img):
    return np.asarray(img).transpose(2, 0, 1)


def _hwc(img):
    return np.asarray(img).transpose(1, 2, 0)


def predict(model, triples, tau=0.0, seed=0, batch_size=8):
    """One sample per triple (channel-last); tau=0 gives the deterministic output."""
    out = []
    for i in range(0, len(triples), batch_size):
        chunk = triples[i:i + batch_size]
        L = np.stack([_chw(t.L) for t in chunk]).astype(model.dtype)
        P = np.stack([_chw(t.P) for t in chunk]).astype(model.dtype)
        s = model.config.scale
        shape = (len(chunk), model.config.bands, L.shape[2] * s, L.shape[3] * s)
        z = sample_latent(shape, tau, seed + i, model.dtype)
        out.extend(_hwc(h) for h in model.inverse(z, L, P))
    return out


def sample_candidates(model, L, P, num, tau, seed):
    """``num`` candidates for one (L, P) pair using seeds seed, seed+1, ...

    Returns ``(candidates, log_probs, seeds)``; images are channel-last.
    """
    Lc, Pc = _chw(L), _chw(P)
    s = model.config.scale
    shape = (model.config.bands, Lc.shape[1] * s, Lc.shape[2] * s)
    cands, logps, seeds = [], [], []
    for i in range(num):
        z = sample_latent(shape, tau, seed + i, model.dtype)
        h = model.inverse(z, Lc, Pc)
        cands.append(_hwc(h))
        logps.append(float(model.log_prob(h, Lc, Pc)))
        seeds.append(seed + i)
    return cands, logps, seeds


def sample_and_select(model, L, P, num, tau, seed):
    cands, logps, seeds = sample_candidates(model, L, P, num, tau, seed)
    idx = select_index(logps)
    return idx, cands, logps, seeds


def evaluate(preds, triples, full_res=False, scale=None, qnr_config=QnrConfig()):
    """MetricReport of predictions against the triples they were made from."""
    cols = REFERENCE_METRICS + (NO_REFERENCE_METRICS if full_res else ())
    report = MetricReport(columns=cols)
    for pred, t in zip(preds, triples):
        s = scale or pred.shape[0] // t.L.shape[0]
        values = {}
        if t.H is not None:
            values.update(reference_metrics(pred, t.H, ratio=1.0 / s))
        if full_res:
            values.update(no_reference_metrics(pred, t.L, t.P, qnr_config))
        report.add(t.id, values)
    return report


def bicubic_baseline(triples, scale):
    return [bicubic_upsample(t.L, scale) for t in triples]


def mean_bpd_and_psnr(model, triples):
    from .train import evaluate_bpd
    preds = predict(model, triples)
    return evaluate_bpd(model, triples), evaluate(preds, triples).aggregate()["psnr"]


def train_variant(model_config, train_triples, train_config, init_seed=None):
    dtype = np.dtype(train_config.dtype)
    model = PanFlowModel(model_config, seed=train_config.seed if init_seed is None else init_seed, dtype=dtype)
    train(model, train_triples, train_config)
    return model


ABLATIONS = ("stages", "conditions", "sharing")
CONDITION_MASKS = (
    ("none", False, False),
    ("lrms_only", True, False),
    ("pan_only", False, True),
    ("both", True, True),
)


def run_ablation(what, train_triples, test_triples, base_config, train_config, ks=(1, 2, 3, 4)):
    """Train the variants of one ablation under identical seeds and budgets.

    Returns a list of row dicts (variant, blocks, use_lrms, use_pan,
    share_params, params, psnr, ssim, sam, ergas).
    """
    if what not in ABLATIONS:
        raise ValueError(f"unknown ablation {what!r}; choose from {ABLATIONS}")
    variants = []
    if what == "stages":
        variants = [(f"K={k}", replace(base_config, blocks=k), True) for k in ks]
    elif what == "conditions":
        variants = [(name, replace(base_config, use_lrms=lr, use_pan=pan), True)
                    for name, lr, pan in CONDITION_MASKS]
    else:
        for share in (True, False):
            tag = "shared" if share else "unshared"
            for k in ks:
                cfg = replace(base_config, blocks=k, share_params=share)
                variants.append((f"{tag} K={k}", cfg, k == base_config.blocks))

    rows = []
    for name, cfg, trained in variants:
        row = {"variant": name, "blocks": cfg.blocks, "use_lrms": cfg.use_lrms, "use_pan": cfg.use_pan,
               "share_params": cfg.share_params,
               "params": PanFlowModel(cfg).param_count()}
        if trained:
            logger.info("ablation %s: training %s", what, name)
            model = train_variant(cfg, train_triples, train_config)
            row.update(evaluate(predict(model, test_triples), test_triples).aggregate())
        else:
            row.update({k: float("nan") for k in REFERENCE_METRICS})
        rows.append(row)
    return rows


ABLATION_COLUMNS = ("variant", "blocks", "use_lrms", "use_pan", "share_params", "params") + REFERENCE_METRICS


def model_config_for(triples, **overrides):
    """ModelConfig whose bands and scale match the data geometry."""
    t = triples[0]
    bands = t.H.shape[2] if t.H is not None else t.L.shape[2]
    scale = t.P.shape[0] // t.L.shape[0]
    return ModelConfig(**{"bands": bands, "scale": scale, **overrides})
