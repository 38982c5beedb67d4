"""Conditional affine-coupling flow mapping an HRMS image to a Gaussian latent.

The flow is a stack of conditional affine coupling blocks (CACBs). Each block
splits its B-channel input into halves ``h1, h2`` and applies::

    y1 = h1 * exp(s1(h2, c)) + t1(h2, c)
    y2 = h2 * exp(s2(y1, c)) + t2(y1, c)

where ``c`` is the condition map (LRMS upsampled to PAN size, concatenated
with PAN) and every ``s``/``t`` is a small half-instance-norm conv net.
Consecutive blocks are separated by a channel-order reversal.
"""
import math
from dataclasses import asdict, dataclass

import numpy as np

from . import tensor as T
from .errors import ConfigError, NumericOverflowError, ShapeError
from .tensor import Parameter, Tensor

LOG_2PI = math.log(2.0 * math.pi)


@dataclass(frozen=True)
class ModelConfig:
    bands: int
    scale: int = 4
    blocks: int = 4
    share_params: bool = True
    hidden_channels: int = 64
    clamp_alpha: float = 1.9
    # condition masks for the ablation study; a masked condition is fed as zeros
    use_lrms: bool = True
    use_pan: bool = True

    def __post_init__(self):
        if self.bands < 2 or self.bands % 2:
            raise ConfigError(f"bands must be even and >= 2, got {self.bands}")
        if self.scale < 1:
            raise ConfigError(f"scale must be >= 1, got {self.scale}")
        if self.blocks < 1:
            raise ConfigError(f"blocks must be >= 1, got {self.blocks}")
        if self.hidden_channels < max(self.bands, 2):
            raise ConfigError(
                f"hidden_channels ({self.hidden_channels}) must be >= bands ({self.bands})")
        if not self.clamp_alpha > 0:
            raise ConfigError("clamp_alpha must be positive")

    @property
    def cond_channels(self):
        return self.bands + 1

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


class CouplingSubnet:
    """conv3x3 -> half instance norm -> leaky ReLU -> conv3x3 (zero initialised).

    The first conv sees ``[h_half, cond]``. Its weight is stored as one tensor
    but applied in two parts so the condition part can be computed once per
    pass and reused by every block that shares this subnet.
    """

    def __init__(self, in_channels, cond_channels, hidden, out_channels, name, rng, dtype):
        self.in_channels = in_channels
        self.hidden = hidden
        fan_in = (in_channels + cond_channels) * 9
        w_in = rng.standard_normal((hidden, in_channels + cond_channels, 3, 3)) * math.sqrt(2.0 / fan_in)
        self.conv_in_w = Parameter(w_in.astype(dtype), f"{name}/conv_in/weight")
        self.conv_in_b = Parameter(np.zeros(hidden, dtype), f"{name}/conv_in/bias")
        self.conv_out_w = Parameter(np.zeros((out_channels, hidden, 3, 3), dtype), f"{name}/conv_out/weight")
        self.conv_out_b = Parameter(np.zeros(out_channels, dtype), f"{name}/conv_out/bias")

    def parameters(self):
        return [self.conv_in_w, self.conv_in_b, self.conv_out_w, self.conv_out_b]

    def cond_features(self, cond):
        _, w_cond = T.channel_split(self.conv_in_w, self.in_channels)
        return T.conv2d(cond, w_cond)

    def __call__(self, h, cond_feat):
        w_h, _ = T.channel_split(self.conv_in_w, self.in_channels)
        a = T.conv2d(h, w_h, self.conv_in_b) + cond_feat
        normed, rest = T.channel_split(a, self.hidden // 2)
        a = T.leaky_relu(T.channel_concat(T.instance_norm(normed), rest), 0.2)
        return T.conv2d(a, self.conv_out_w, self.conv_out_b)


class CACB:
    """Conditional affine coupling block with subnets s1, t1, s2, t2."""

    def __init__(self, config, name, rng, dtype):
        half = config.bands // 2
        self.half = half
        self.alpha = config.clamp_alpha
        make = lambda tag: CouplingSubnet(  # noqa: E731
            half, config.cond_channels, config.hidden_channels, half, f"{name}/{tag}", rng, dtype)
        self.s1, self.t1, self.s2, self.t2 = make("s1"), make("t1"), make("s2"), make("t2")

    @property
    def subnets(self):
        return (self.s1, self.t1, self.s2, self.t2)

    def parameters(self):
        return [p for net in self.subnets for p in net.parameters()]

    def cond_features(self, cond):
        return {id(net): net.cond_features(cond) for net in self.subnets}

    def _scale(self, net, h, feats):
        return T.soft_clamp(net(h, feats[id(net)]), self.alpha)

    def forward(self, h, cond, feats=None):
        """Return ``(h_next, logdet)`` with logdet of shape (N,)."""
        feats = feats or self.cond_features(cond)
        h1, h2 = T.channel_split(h, self.half)
        s1 = self._scale(self.s1, h2, feats)
        y1 = h1 * T.exp(s1) + self.t1(h2, feats[id(self.t1)])
        s2 = self._scale(self.s2, y1, feats)
        y2 = h2 * T.exp(s2) + self.t2(y1, feats[id(self.t2)])
        logdet = T.sum(s1, axis=(1, 2, 3)) + T.sum(s2, axis=(1, 2, 3))
        return T.channel_concat(y1, y2), logdet

    def inverse(self, y, cond, feats=None):
        feats = feats or self.cond_features(cond)
        y1, y2 = T.channel_split(y, self.half)
        s2 = self._scale(self.s2, y1, feats)
        h2 = (y2 - self.t2(y1, feats[id(self.t2)])) * T.exp(-s2)
        s1 = self._scale(self.s1, h2, feats)
        h1 = (y1 - self.t1(h2, feats[id(self.t1)])) * T.exp(-s1)
        return T.channel_concat(h1, h2)


def _batched(x, dtype, what):
    arr = np.asarray(x.data if isinstance(x, Tensor) else x, dtype=dtype)
    if arr.ndim == 3:
        return arr[None], True
    if arr.ndim != 4:
        raise ShapeError(f"{what} must be C x H x W or N x C x H x W, got shape {arr.shape}")
    return arr, False


class PanFlowModel:
    """Stack of K CACBs (one shared block, or K independent ones)."""

    def __init__(self, config, seed=0, dtype=np.float32):
        self.config = config
        self.dtype = np.dtype(dtype)
        rng = np.random.default_rng(seed)
        if config.share_params:
            block = CACB(config, "cacb", rng, self.dtype)
            self.blocks = [block] * config.blocks
        else:
            self.blocks = [CACB(config, f"cacb{k}", rng, self.dtype) for k in range(config.blocks)]

    @property
    def unique_blocks(self):
        seen, out = set(), []
        for b in self.blocks:
            if id(b) not in seen:
                seen.add(id(b))
                out.append(b)
        return out

    def parameters(self):
        """All parameters in canonical (name-sorted) order."""
        params = [p for b in self.unique_blocks for p in b.parameters()]
        return sorted(params, key=lambda p: p.name)

    def named_parameters(self):
        return {p.name: p for p in self.parameters()}

    def param_count(self):
        return int(np.sum([p.data.size for p in self.parameters()]))

    def zero_grads(self):
        T.zero_grads(self.parameters())

    # -- graph-level API (Tensors, batched) ---------------------------------

    def condition(self, L, P):
        """(N, B+1, H, W) condition map: nearest-upsampled LRMS then PAN."""
        cfg = self.config
        L, P = T.as_tensor(L), T.as_tensor(P)
        if not cfg.use_lrms:
            L = Tensor(np.zeros_like(L.data))
        if not cfg.use_pan:
            P = Tensor(np.zeros_like(P.data))
        return T.channel_concat(T.upsample_nearest(L, cfg.scale), P)

    def _features(self, cond):
        return {id(b): b.cond_features(cond) for b in self.unique_blocks}

    def forward_graph(self, h, cond):
        feats = self._features(cond)
        logdet = None
        for k, block in enumerate(self.blocks):
            if k:
                h = T.reverse_channels(h)
            try:
                h, ld = block.forward(h, cond, feats[id(block)])
            except NumericOverflowError as exc:
                raise NumericOverflowError(f"block {k} forward", str(exc)) from exc
            logdet = ld if logdet is None else logdet + ld
        if len(self.blocks) % 2 == 0:
            # undo the odd number of reversals so z keeps the channel order of H
            h = T.reverse_channels(h)
        return h, logdet

    def inverse_graph(self, z, cond):
        feats = self._features(cond)
        h = T.reverse_channels(z) if len(self.blocks) % 2 == 0 else z
        for k in reversed(range(len(self.blocks))):
            block = self.blocks[k]
            try:
                h = block.inverse(h, cond, feats[id(block)])
            except NumericOverflowError as exc:
                raise NumericOverflowError(f"block {k} inverse", str(exc)) from exc
            if k:
                h = T.reverse_channels(h)
        return h

    # -- array-level API ----------------------------------------------------

    def _check_geometry(self, H, L, P):
        cfg = self.config
        n, b, h, w = H.shape
        if b != cfg.bands:
            raise ShapeError(f"HRMS has {b} bands, model expects {cfg.bands}")
        if h % cfg.scale or w % cfg.scale:
            raise ShapeError(f"HRMS size {h}x{w} not divisible by scale {cfg.scale}")
        if L.shape != (n, b, h // cfg.scale, w // cfg.scale):
            raise ShapeError(f"LRMS shape {L.shape} inconsistent with HRMS {H.shape} at scale {cfg.scale}")
        if P.shape != (n, 1, h, w):
            raise ShapeError(f"PAN shape {P.shape} inconsistent with HRMS {H.shape}")

    def _prepare(self, H, L, P):
        H, single = _batched(H, self.dtype, "HRMS")
        L, _ = _batched(L, self.dtype, "LRMS")
        P, _ = _batched(P, self.dtype, "PAN")
        self._check_geometry(H, L, P)
        return H, L, P, single

    def forward(self, H, L, P):
        """Map HRMS to ``(z, total_logdet)``; unbatched input gives a float logdet."""
        H, L, P, single = self._prepare(H, L, P)
        z, logdet = self.forward_graph(Tensor(H), self.condition(L, P))
        if single:
            return z.data[0], float(logdet.data[0])
        return z.data, logdet.data

    def inverse(self, z, L, P):
        z, single = _batched(z, self.dtype, "latent")
        L, _ = _batched(L, self.dtype, "LRMS")
        P, _ = _batched(P, self.dtype, "PAN")
        self._check_geometry(z, L, P)
        h = self.inverse_graph(Tensor(z), self.condition(L, P)).data
        return h[0] if single else h

    def log_prob(self, H, L, P):
        """Exact conditional log-density log p(H | L, P) in nats."""
        z, logdet = self.forward(H, L, P)
        return gaussian_logpdf(z) + logdet

    def copy(self, dtype=None):
        """Deep copy, optionally cast to another dtype."""
        dup = PanFlowModel(self.config, seed=0, dtype=dtype or self.dtype)
        src = self.named_parameters()
        for name, p in dup.named_parameters().items():
            p.assign(src[name].data.astype(dup.dtype))
        return dup


def gaussian_logpdf(z):
    """log N(z | 0, I); a 4-D batch gives one value per sample."""
    z = np.asarray(z.data if isinstance(z, Tensor) else z, dtype=np.float64)
    if z.ndim == 4:
        d = z[0].size
        return -0.5 * d * LOG_2PI - 0.5 * np.einsum("nchw,nchw->n", z, z)
    return float(-0.5 * z.size * LOG_2PI - 0.5 * np.dot(z.ravel(), z.ravel()))


def gaussian_logpdf_graph(z):
    """Differentiable per-sample standard-normal log density, shape (N,)."""
    d = int(np.prod(z.shape[1:]))
    return T.sum(T.square(z), axis=(1, 2, 3)) * -0.5 + (-0.5 * d * LOG_2PI)


def sample_latent(shape, tau, seed, dtype=np.float32):
    if tau < 0:
        raise ValueError("temperature must be >= 0")
    if tau == 0:
        return np.zeros(shape, dtype)
    rng = np.random.default_rng(seed)
    return (tau * rng.standard_normal(shape)).astype(dtype)


def sample_hrms(model, L, P, tau, seed):
    """Draw H = f^{-1}(z; L, P) with z ~ tau * N(0, I), reproducible from ``seed``."""
    L = np.asarray(L, dtype=model.dtype)
    s = model.config.scale
    lead = L.shape[:-3]
    shape = lead + (model.config.bands, L.shape[-2] * s, L.shape[-1] * s)
    z = sample_latent(shape, tau, seed, model.dtype)
    return model.inverse(z, L, P)


def select_index(log_probs):
    """Index of the largest log-probability; ties go to the lowest index."""
    values = np.asarray(log_probs, dtype=np.float64)
    if values.size == 0:
        raise ValueError("no candidates to select from")
    return int(np.argmax(values))


def select_max_probability(model, candidates, L, P):
    """Maximum probability criterion over candidate HRMS images.

    Returns ``(index, candidate, log_probs)``.
    """
    if len(candidates) == 0:
        raise ValueError("no candidates to select from")
    log_probs = [float(model.log_prob(c, L, P)) for c in candidates]
    idx = select_index(log_probs)
    return idx, candidates[idx], log_probs


def randomize_parameters(model, seed, scale=0.1):
    """Overwrite every parameter with seeded Gaussian noise (for verification)."""
    rng = np.random.default_rng(seed)
    for p in model.parameters():
        p.assign(scale * rng.standard_normal(p.shape))
    return model
