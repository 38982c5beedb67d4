"""Two-stage likelihood training: L1 pretraining, then exact NLL with Adam."""
import csv
import logging
import math
import os
import time
from dataclasses import dataclass, fields, replace

import numpy as np

from . import tensor as T
from .errors import ConfigError, NumericOverflowError, TrainingDivergedError
from .flow import gaussian_logpdf_graph

logger = logging.getLogger(__name__)

LOSS_CSV_HEADER = ["epoch", "nll_bpd", "l1", "lr", "seconds"]


@dataclass(frozen=True)
class TrainConfig:
    lr0: float = 5e-5
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    batch_size: int = 4
    pretrain_epochs: int = 100
    nll_epochs: int = 50
    lr_decay_every: int = 200
    lr_decay_factor: float = 0.5
    grad_clip: float = 10.0
    seed: int = 0
    dtype: str = "float32"
    checkpoint_every: int = 0

    def __post_init__(self):
        for name in ("lr0", "eps", "batch_size", "lr_decay_every"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be positive")
        if not 0 < self.lr_decay_factor < 1:
            raise ConfigError("lr_decay_factor must lie in (0, 1)")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ConfigError("Adam betas must lie in [0, 1)")
        if self.pretrain_epochs < 0 or self.nll_epochs < 0 or self.checkpoint_every < 0:
            raise ConfigError("epoch counts must be non-negative")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError(f"dtype must be float32 or float64, got {self.dtype!r}")


def _coerce(field_type, raw):
    if field_type in (bool, "bool"):
        low = raw.strip().lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"not a boolean: {raw!r}")
    if field_type in (int, "int"):
        return int(raw)
    if field_type in (float, "float"):
        return float(raw)
    return raw.strip()


def parse_kv(text):
    """Parse flat ``key = value`` lines; ``#`` starts a comment."""
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key=value, got {line!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if key in out:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        out[key] = value
    return out


def coerce_fields(cls, raw):
    """Build dataclass kwargs from string values; unknown keys are an error."""
    types = {f.name: f.type for f in fields(cls)}
    unknown = set(raw) - set(types)
    if unknown:
        raise ConfigError(f"unknown {cls.__name__} keys: {sorted(unknown)}")
    try:
        return {k: _coerce(types[k], v) for k, v in raw.items()}
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def load_train_config(path, **overrides):
    with open(path, encoding="utf-8") as fh:
        raw = parse_kv(fh.read())
    return replace(TrainConfig(**coerce_fields(TrainConfig, raw)), **overrides)


def lr_schedule(epoch, config):
    """Step decay: lr0 * factor ** floor(epoch / decay_every)."""
    if epoch < 0:
        raise ValueError("epoch must be >= 0")
    return config.lr0 * config.lr_decay_factor ** (epoch // config.lr_decay_every)


@dataclass
class LossReport:
    epoch: int
    mean_nll_bits_per_dim: float
    mean_l1: float
    lr: float
    wall_time: float

    def csv_row(self):
        return [self.epoch, repr(self.mean_nll_bits_per_dim), repr(self.mean_l1),
                repr(self.lr), f"{self.wall_time:.3f}"]


def write_loss_csv(reports, path, append=False):
    fresh = not append or not os.path.exists(path)
    with open(path, "a" if append else "w", newline="") as fh:
        w = csv.writer(fh)
        if fresh:
            w.writerow(LOSS_CSV_HEADER)
        for r in reports:
            w.writerow(r.csv_row())


class AdamState:
    def __init__(self, params):
        self.m = [np.zeros_like(p.data) for p in params]
        self.v = [np.zeros_like(p.data) for p in params]
        self.t = 0


def adam_step(params, state, lr, beta1=0.9, beta2=0.999, eps=1e-8):
    """One bias-corrected Adam update using ``p.grad``."""
    state.t += 1
    c1 = 1.0 - beta1 ** state.t
    c2 = 1.0 - beta2 ** state.t
    for p, m, v in zip(params, state.m, state.v):
        g = p.grad
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        step = lr * (m / c1) / (np.sqrt(v / c2) + eps)
        p.data = (p.data - step).astype(p.data.dtype, copy=False)


def clip_grad_norm(params, max_norm):
    """Scale gradients in place so their global L2 norm is at most ``max_norm``."""
    total = math.sqrt(sum(float(np.vdot(p.grad, p.grad)) for p in params))
    if max_norm and total > max_norm:
        scale = max_norm / (total + 1e-12)
        for p in params:
            p.grad = p.grad * scale
    return total


def stack_batch(triples, dtype):
    """Stack SceneTriples (channel-last rasters) into N x C x H x W arrays."""
    H = np.stack([t.H.transpose(2, 0, 1) for t in triples]).astype(dtype)
    L = np.stack([t.L.transpose(2, 0, 1) for t in triples]).astype(dtype)
    P = np.stack([t.P.transpose(2, 0, 1) for t in triples]).astype(dtype)
    return H, L, P


def _check_batch(H, L, P):
    if not (H.shape[0] == L.shape[0] == P.shape[0]):
        raise ConfigError("batch members disagree on sample count")


def nll_graph(model, H, L, P):
    """Mean NLL over the batch as a scalar graph Tensor (nats per image)."""
    _check_batch(H, L, P)
    model._check_geometry(H, L, P)
    z, logdet = model.forward_graph(T.Tensor(H), model.condition(L, P))
    per_sample = gaussian_logpdf_graph(z) + logdet
    return T.mean(per_sample) * -1.0, per_sample


def l1_graph(model, H, L, P):
    """Mean absolute error of the tau=0 reconstruction f^{-1}(0; L, P) against H."""
    _check_batch(H, L, P)
    model._check_geometry(H, L, P)
    zero = T.Tensor(np.zeros(H.shape, dtype=model.dtype))
    rec = model.inverse_graph(zero, model.condition(L, P))
    return T.mean(T.absolute(rec - T.Tensor(H)))


def _per_sample_overflow(model, H, L, P, fn):
    """Find the first sample whose loss is non-finite (for error reporting)."""
    for i in range(H.shape[0]):
        try:
            fn(model, H[i:i + 1], L[i:i + 1], P[i:i + 1])
        except NumericOverflowError:
            return i
    return None


def nll_loss(model, H, L, P, tape=None):
    """Mean negative log-likelihood over a batch.

    Arrays are N x C x H x W. Inside ``tape`` the result is differentiable
    with respect to every model parameter.
    """
    try:
        if tape is None:
            return nll_graph(model, H, L, P)[0]
        with tape:
            return nll_graph(model, H, L, P)[0]
    except NumericOverflowError as exc:
        idx = _per_sample_overflow(model, H, L, P, nll_graph)
        raise NumericOverflowError(f"nll_loss sample {idx}", str(exc)) from exc


def l1_pretrain_loss(model, H, L, P, tape=None):
    if tape is None:
        return l1_graph(model, H, L, P)
    with tape:
        return l1_graph(model, H, L, P)


def bits_per_dim(nll_nats, d):
    return nll_nats / (d * math.log(2.0))


def evaluate_bpd(model, triples, batch_size=8):
    """Mean bits-per-dimension of ``triples`` under ``model``."""
    total, count = 0.0, 0
    for i in range(0, len(triples), batch_size):
        H, L, P = stack_batch(triples[i:i + batch_size], model.dtype)
        _, per = nll_graph(model, H, L, P)
        total -= float(np.sum(per.data, dtype=np.float64))
        count += H.shape[0]
    d = int(np.prod(triples[0].H.shape))
    return bits_per_dim(total / count, d)


def _snapshot(params):
    return [p.data.copy() for p in params]


def _restore(params, snap):
    for p, v in zip(params, snap):
        p.data = v.copy()


def train(model, dataset, config, on_epoch=None, checkpoint_path=None):
    """Run ``pretrain_epochs`` of L1 then ``nll_epochs`` of NLL on ``dataset``.

    The model is updated in place and returned together with one LossReport
    per epoch. Batch order comes from a generator seeded with ``config.seed``.
    On a non-finite loss the parameters of the last finished epoch are
    restored (and written to ``checkpoint_path`` if given) before
    :class:`TrainingDivergedError` is raised.
    """
    from .checkpoint import save_checkpoint

    if not dataset:
        raise ConfigError("dataset is empty")
    shapes = {(t.H.shape, t.L.shape, t.P.shape) for t in dataset}
    if len(shapes) != 1:
        raise ConfigError(f"dataset geometry is not uniform: {sorted(shapes)}")

    params = model.parameters()
    state = AdamState(params)
    rng = np.random.default_rng(config.seed)
    d = int(np.prod(dataset[0].H.shape))
    reports = []
    good = _snapshot(params)
    n_total = config.pretrain_epochs + config.nll_epochs

    for epoch in range(n_total):
        stage = "l1" if epoch < config.pretrain_epochs else "nll"
        if epoch == config.pretrain_epochs and epoch:
            # moments from the L1 stage are far smaller than NLL gradients
            state = AdamState(params)
        lr = lr_schedule(epoch, config)
        order = rng.permutation(len(dataset))
        t0 = time.perf_counter()
        loss_sum, seen = 0.0, 0
        for start in range(0, len(order), config.batch_size):
            batch = [dataset[i] for i in order[start:start + config.batch_size]]
            H, L, P = stack_batch(batch, model.dtype)
            tape = T.GradTape()
            try:
                # overflow surfaces through the engine's finiteness check instead
                with np.errstate(over="ignore", invalid="ignore"):
                    if stage == "l1":
                        loss = l1_pretrain_loss(model, H, L, P, tape)
                    else:
                        loss = nll_loss(model, H, L, P, tape)
                    model.zero_grads()
                    T.backward(loss, tape)
                    if stage == "nll":
                        clip_grad_norm(params, config.grad_clip)
                    adam_step(params, state, lr, config.beta1, config.beta2, config.eps)
                for p in params:
                    if not np.isfinite(p.data).all():
                        raise NumericOverflowError(f"adam update of {p.name}")
            except NumericOverflowError as exc:
                _restore(params, good)
                if checkpoint_path:
                    save_checkpoint(model, checkpoint_path)
                raise TrainingDivergedError(f"{stage} epoch {epoch}", epoch, str(exc)) from exc
            loss_sum += loss.item() * len(batch)
            seen += len(batch)
        mean_loss = loss_sum / seen
        report = LossReport(
            epoch=epoch,
            mean_nll_bits_per_dim=bits_per_dim(mean_loss, d) if stage == "nll" else float("nan"),
            mean_l1=mean_loss if stage == "l1" else float("nan"),
            lr=lr,
            wall_time=time.perf_counter() - t0,
        )
        reports.append(report)
        good = _snapshot(params)
        logger.info("epoch %d [%s] loss=%.6g lr=%.3g %.1fs", epoch, stage, mean_loss, lr, report.wall_time)
        if on_epoch is not None:
            on_epoch(report)
        if checkpoint_path and config.checkpoint_every and (epoch + 1) % config.checkpoint_every == 0:
            save_checkpoint(model, checkpoint_path)
    return model, reports
