"""Network topology: clinical encoder, 3D dense feature extractor,
endpoint head, domain head, fusion, and the gradient-reversal connector.

The imaging path is a compact dense convolutional network: a stem
(conv, batchnorm, leaky ReLU, max pool) followed by two dense blocks
joined by a transition layer. Each head is a single dense block with a
leaky ReLU / global average pool / linear tail.
"""

from __future__ import annotations

from dataclasses import dataclass, asdict

import numpy as np

from .errors import ConfigError, DimensionError
from . import tensor as T
from .tensor import Tensor


@dataclass
class NetworkConfig:
    volume_dims: tuple = (32, 32, 32)
    in_channels: int = 1
    clin_width: int = 18
    clin_hidden: int = 32
    growth_rate: int = 4
    stem_channels: int = 8
    stem_kernel: int = 3
    stem_stride: int = 1
    block_sizes: tuple = (6, 12)
    head_layers: int = 16
    num_endpoints: int = 3
    num_domains: int = 2
    fusion: str = "broadcast"
    leaky_slope: float = 0.01
    use_imaging: bool = True
    use_clinical: bool = True
    use_domain_head: bool = True

    def validate(self):
        sizes = [self.clin_width, self.clin_hidden, self.growth_rate,
                 self.stem_channels, self.stem_kernel, self.num_endpoints,
                 self.head_layers, *self.volume_dims, *self.block_sizes]
        if any(s < 1 for s in sizes):
            raise ConfigError(f"all sizes must be positive: {asdict(self)}")
        if any(n < 1 for n in self.block_sizes):
            raise ConfigError("zero-layer dense blocks are not allowed")
        if self.fusion not in ("broadcast", "pooled"):
            raise ConfigError(f"unknown fusion mode {self.fusion!r}")
        if not (self.use_imaging or self.use_clinical):
            raise ConfigError("at least one modality must be enabled")
        if self.use_domain_head and self.use_imaging and self.num_domains < 2:
            raise ConfigError(
                "domain head needs num_domains >= 2 (no adversary is possible "
                "against a single domain)")
        if not (0.0 < self.leaky_slope < 1.0):
            raise ConfigError(f"leaky_slope must be in (0,1): {self.leaky_slope}")
        return self


def paper_scale_config(num_domains=7):
    """Full-size topology: constructs (and reports shapes) without training."""
    return NetworkConfig(
        volume_dims=(150, 185, 155), growth_rate=32, stem_channels=64,
        stem_kernel=7, stem_stride=2, clin_hidden=128,
        num_domains=num_domains).validate()


def feature_channels(cfg):
    """Output channel count of the feature extractor, by the concat rule."""
    c = cfg.stem_channels + cfg.block_sizes[0] * cfg.growth_rate
    c = c // 2  # transition halves channels
    return c + cfg.block_sizes[1] * cfg.growth_rate


def embedding_width(cfg):
    """Width of the clinical embedding; matches f's output channels when
    the imaging branch is present."""
    return feature_channels(cfg) if cfg.use_imaging else cfg.clin_hidden


class ModelParams:
    """Named parameters in four disjoint partitions (a, f, g, h), plus
    non-trainable buffers (batchnorm running statistics)."""

    def __init__(self):
        self.partitions = {}
        self.buffers = {}

    def add(self, partition, name, data):
        part = self.partitions.setdefault(partition, {})
        full = f"{partition}.{name}"
        if name in part:
            raise ConfigError(f"duplicate parameter {full}")
        t = Tensor(data, requires_grad=True)
        part[name] = t
        return t

    def add_buffer(self, partition, name, data):
        self.buffers[f"{partition}.{name}"] = np.asarray(data, dtype=np.float64)

    def get(self, partition, name):
        return self.partitions[partition][name]

    def buf(self, partition, name):
        return self.buffers[f"{partition}.{name}"]

    def named(self, partitions=None):
        keys = partitions if partitions is not None else sorted(self.partitions)
        for p in keys:
            for name in sorted(self.partitions.get(p, {})):
                yield f"{p}.{name}", self.partitions[p][name]

    def tensors(self, partitions=None):
        return [t for _, t in self.named(partitions)]

    def zero_grad(self):
        for t in self.tensors():
            t.zero_grad()

    def count(self):
        return sum(t.size for t in self.tensors())


def _kaiming(rng, shape, fan_in):
    return rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)


def _init_bn(params, partition, prefix, channels):
    params.add(partition, f"{prefix}.gamma", np.ones(channels))
    params.add(partition, f"{prefix}.beta", np.zeros(channels))
    params.add_buffer(partition, f"{prefix}.rm", np.zeros(channels))
    params.add_buffer(partition, f"{prefix}.rv", np.ones(channels))


def _init_dense_layer(params, rng, partition, prefix, cin, growth):
    mid = 4 * growth  # bottleneck width, standard dense-layer convention
    _init_bn(params, partition, f"{prefix}.bn1", cin)
    params.add(partition, f"{prefix}.conv1.k",
               _kaiming(rng, (mid, cin, 1, 1, 1), cin))
    _init_bn(params, partition, f"{prefix}.bn2", mid)
    params.add(partition, f"{prefix}.conv2.k",
               _kaiming(rng, (growth, mid, 3, 3, 3), mid * 27))


def _init_dense_block(params, rng, partition, prefix, cin, layers, growth):
    c = cin
    for i in range(layers):
        _init_dense_layer(params, rng, partition, f"{prefix}.l{i}", c, growth)
        c += growth
    return c


def _init_head(params, rng, partition, cin, layers, growth, out_width):
    c = _init_dense_block(params, rng, partition, "blk", cin, layers, growth)
    params.add(partition, "out.w", _kaiming(rng, (c, out_width), c))
    params.add(partition, "out.b", np.zeros(out_width))
    return c


def init_params(cfg, seed=0):
    """Seeded parameter construction for the enabled branches."""
    cfg.validate()
    rng = np.random.default_rng(seed)
    params = ModelParams()
    emb = embedding_width(cfg)
    if cfg.use_imaging:
        k, s = cfg.stem_kernel, cfg.stem_channels
        stem = _kaiming(rng, (s, cfg.in_channels, k, k, k),
                        cfg.in_channels * k ** 3)
        params.add("f", "stem.conv.k", stem)
        # Per-filter DC coefficient, stored as its own coordinate (see
        # _stem_kernel). Initialized to the sampled kernel's sum so the
        # effective filter at init equals the plain kaiming draw.
        params.add("f", "stem.conv.dc",
                   stem.sum(axis=(1, 2, 3, 4), keepdims=True))
        _init_bn(params, "f", "stem.bn", s)
        c = _init_dense_block(params, rng, "f", "b1", s,
                              cfg.block_sizes[0], cfg.growth_rate)
        _init_bn(params, "f", "tr.bn", c)
        params.add("f", "tr.conv.k", _kaiming(rng, (c // 2, c, 1, 1, 1), c))
        _init_dense_block(params, rng, "f", "b2", c // 2,
                          cfg.block_sizes[1], cfg.growth_rate)
    if cfg.use_clinical:
        params.add("a", "fc1.w",
                   _kaiming(rng, (cfg.clin_width, cfg.clin_hidden),
                            cfg.clin_width))
        params.add("a", "fc1.b", np.zeros(cfg.clin_hidden))
        params.add("a", "fc2.w", _kaiming(rng, (cfg.clin_hidden, emb),
                                          cfg.clin_hidden))
        params.add("a", "fc2.b", np.zeros(emb))
    _init_head(params, rng, "g", emb, cfg.head_layers, cfg.growth_rate,
               cfg.num_endpoints)
    if cfg.use_domain_head and cfg.use_imaging:
        _init_head(params, rng, "h", feature_channels(cfg), cfg.head_layers,
                   cfg.growth_rate, cfg.num_domains)
    return params


def init_pretrain_head(params, cfg, seed=0):
    """Temporary regression head (partition "p") used only for pretraining
    the imaging backbone on per-visit current scores."""
    rng = np.random.default_rng(seed + 101)
    c = feature_channels(cfg)
    params.add("p", "out.w", _kaiming(rng, (c, cfg.num_endpoints), c))
    params.add("p", "out.b", np.zeros(cfg.num_endpoints))
    return params


# ---------------------------------------------------------------------------
# forwards


def _bn(x, params, partition, prefix, mode):
    return T.batchnorm3d(x, params.get(partition, f"{prefix}.gamma"),
                         params.get(partition, f"{prefix}.beta"),
                         params.buf(partition, f"{prefix}.rm"),
                         params.buf(partition, f"{prefix}.rv"), mode)


def dense_layer_forward(x, params, partition, prefix, cfg, mode):
    h = _bn(x, params, partition, f"{prefix}.bn1", mode)
    h = T.leaky_relu(h, cfg.leaky_slope)
    h = T.conv3d(h, params.get(partition, f"{prefix}.conv1.k"))
    h = _bn(h, params, partition, f"{prefix}.bn2", mode)
    h = T.leaky_relu(h, cfg.leaky_slope)
    return T.conv3d(h, params.get(partition, f"{prefix}.conv2.k"), padding=1)


def dense_block_forward(x, params, partition, prefix, layers, cfg, mode):
    feat = x
    for i in range(layers):
        new = dense_layer_forward(feat, params, partition, f"{prefix}.l{i}",
                                  cfg, mode)
        feat = T.concat([feat, new], axis=1)
    return feat


def transition_forward(x, params, partition, prefix, cfg, mode):
    if min(x.shape[2:]) < 2:
        raise DimensionError(
            f"transition needs spatial dims >= 2 for pooling, got "
            f"{x.shape[2:]}; use a larger input volume")
    h = _bn(x, params, partition, f"{prefix}.bn", mode)
    h = T.leaky_relu(h, cfg.leaky_slope)
    h = T.conv3d(h, params.get(partition, f"{prefix}.conv.k"))
    return T.pool3d(h, "avg", 2, 2)


def _stem_kernel(params):
    """Effective stem filter: zero-mean shape plus an explicit DC coordinate.

    A constant intensity offset (scanner shift) excites only the filter's DC
    component, but that component is a sum over all taps, so its gradient is
    diluted across every coordinate and per-coordinate adaptive optimizers
    barely move it. Storing the per-filter mean as its own parameter
    (stem.conv.dc = per-filter tap sum) keeps the same function class while
    letting the optimizer adapt the offset-sensitivity directly.
    """
    k = params.get("f", "stem.conv.k")
    dc = params.get("f", "stem.conv.dc")
    taps = int(np.prod(k.shape[1:]))
    m = T.reshape(T.mean_axes(k, (1, 2, 3, 4)), dc.shape)
    zero_mean = T.add(k, T.mul(m, Tensor(np.asarray(-1.0))))
    return T.add(zero_mean, T.mul(dc, Tensor(np.asarray(1.0 / taps))))


def feature_extractor_forward(mri, params, cfg, mode):
    if mri.shape[1:] != (cfg.in_channels, *cfg.volume_dims):
        raise DimensionError(
            f"volume shape {mri.shape[1:]} != configured "
            f"({cfg.in_channels}, {cfg.volume_dims})")
    # The stem is a valid (unpadded) convolution: zero-padding would make the
    # response to a constant intensity offset depend on boundary truncation,
    # so no filter could null a scanner offset at the rim. Without padding a
    # zero-mean stem filter removes a constant offset exactly, everywhere.
    h = T.conv3d(mri, _stem_kernel(params), stride=cfg.stem_stride)
    h = _bn(h, params, "f", "stem.bn", mode)
    h = T.leaky_relu(h, cfg.leaky_slope)
    h = T.pool3d(h, "max", 2, 2)
    h = dense_block_forward(h, params, "f", "b1", cfg.block_sizes[0], cfg, mode)
    h = transition_forward(h, params, "f", "tr", cfg, mode)
    return dense_block_forward(h, params, "f", "b2", cfg.block_sizes[1], cfg,
                               mode)


def clinical_encoder_forward(clin, params, cfg):
    if clin.shape[1] != cfg.clin_width:
        raise DimensionError(
            f"clinical width {clin.shape[1]} != configured {cfg.clin_width}")
    h = T.affine(clin, params.get("a", "fc1.w"), params.get("a", "fc1.b"))
    h = T.leaky_relu(h, cfg.leaky_slope)
    return T.affine(h, params.get("a", "fc2.w"), params.get("a", "fc2.b"))


def fuse(img_feat, clin_emb, mode="broadcast"):
    """Add the clinical embedding to the image feature map channelwise."""
    if clin_emb.shape[1] != img_feat.shape[1]:
        raise DimensionError(
            f"embedding width {clin_emb.shape[1]} != feature channels "
            f"{img_feat.shape[1]}")
    b, c = clin_emb.shape
    emb5 = T.reshape(clin_emb, (b, c, 1, 1, 1))
    if mode == "broadcast":
        return T.add(img_feat, emb5)
    if mode == "pooled":
        pooled = T.mean_axes(img_feat, (2, 3, 4))
        return T.reshape(T.add(pooled, clin_emb), (b, c, 1, 1, 1))
    raise ConfigError(f"unknown fusion mode {mode!r}")


def _head_tail(x, params, partition, cfg, mode):
    h = dense_block_forward(x, params, partition, "blk", cfg.head_layers,
                            cfg, mode)
    h = T.leaky_relu(h, cfg.leaky_slope)
    h = T.mean_axes(h, (2, 3, 4))
    return T.affine(h, params.get(partition, "out.w"),
                    params.get(partition, "out.b"))


def endpoint_head_forward(fused, params, cfg, mode):
    return _head_tail(fused, params, "g", cfg, mode)


def domain_head_forward(img_feat, params, cfg, mode):
    return _head_tail(img_feat, params, "h", cfg, mode)


def pretrain_head_forward(img_feat, params):
    pooled = T.mean_axes(img_feat, (2, 3, 4))
    return T.affine(pooled, params.get("p", "out.w"), params.get("p", "out.b"))


def gradient_reversal(x, mu):
    """Identity forward; scales the upstream gradient by -mu on the way back."""
    if mu < 0:
        raise ConfigError(f"reversal coefficient must be >= 0, got {mu}")
    return T.custom_op("grad_reverse", (x,), x.data.copy(),
                       lambda go: (-mu * go,))


def extractor_output_shape(cfg):
    """Spatial/channel shape of f's output, by composing the shape rules."""
    d, h, w = cfg.volume_dims
    k, s = cfg.stem_kernel, cfg.stem_stride

    def conv(n):
        return (n - k) // s + 1

    def pool(n):
        return (n - 2) // 2 + 1

    dims = tuple(pool(conv(n)) for n in (d, h, w))      # stem
    dims = tuple(pool(n) for n in dims)                 # transition
    return (feature_channels(cfg), *dims)
