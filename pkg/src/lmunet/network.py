"""Full network assembly: configuration, weight schema, forward pass, and the
binary weight-file format.

The architecture: a depthwise-separable stem to ``base_channels`` maps, three
encoder blocks (each doubles channels and halves every spatial extent), a
four-layer bottleneck at constant shape, three decoder blocks consuming the
encoder outputs as additive skips in reverse order, and a pointwise head
producing one logit map per class at input resolution.
"""

from __future__ import annotations

import dataclasses
import struct
from dataclasses import dataclass
from math import prod

import numpy as np

from . import blocks, ops, ssm
from .errors import ConfigError, LoadError, ShapeError
from .tensor import Tensor

DOWNSAMPLE_FACTOR = 8  # three halvings
WEIGHT_MAGIC = b"LMUW"
WEIGHT_VERSION = 1
_DTYPE_TAGS = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_TAG_FOR = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}

ABLATION_VARIANTS = ("none", "conv3", "attention", "no-adjust", "no-residual")


@dataclass(frozen=True)
class NetworkConfig:
    rank: int = 3
    in_channels: int = 1
    num_classes: int = 3
    base_channels: int = 32
    encoder_rvm_counts: tuple = (1, 2, 2)
    bottleneck_rvm_count: int = 4
    expansion: int = 1          # mixer channel expansion factor
    d_state: int = 16
    dt_rank: int | None = None  # None: ceil(channels / 16)
    attn_heads: int = 8
    vssm_replacement: str = "none"   # none | conv3 | attention
    use_adjustment_factors: bool = True
    use_residual_connections: bool = True

    def validate(self):
        if self.rank not in (2, 3):
            raise ConfigError(f"rank must be 2 or 3, got {self.rank}")
        if self.in_channels < 1:
            raise ConfigError(f"in_channels must be >= 1, got {self.in_channels}")
        if self.num_classes < 2:
            raise ConfigError(f"num_classes must be >= 2, got {self.num_classes}")
        if self.base_channels < 1:
            raise ConfigError(f"base_channels must be >= 1, got {self.base_channels}")
        if len(self.encoder_rvm_counts) != 3 or any(n < 1 for n in self.encoder_rvm_counts):
            raise ConfigError(f"encoder_rvm_counts needs three positive entries, "
                              f"got {self.encoder_rvm_counts}")
        if self.bottleneck_rvm_count < 1:
            raise ConfigError(f"bottleneck_rvm_count must be >= 1, "
                              f"got {self.bottleneck_rvm_count}")
        if self.expansion < 1:
            raise ConfigError(f"expansion must be >= 1, got {self.expansion}")
        if self.d_state < 1:
            raise ConfigError(f"d_state must be >= 1, got {self.d_state}")
        if self.dt_rank is not None and self.dt_rank < 1:
            raise ConfigError(f"dt_rank must be >= 1 or None, got {self.dt_rank}")
        if self.vssm_replacement not in ("none", "conv3", "attention"):
            raise ConfigError(f"vssm_replacement must be none, conv3 or attention, "
                              f"got {self.vssm_replacement!r}")
        if self.vssm_replacement == "attention":
            if self.bottleneck_width % self.attn_heads != 0:
                raise ConfigError(f"bottleneck width {self.bottleneck_width} not "
                                  f"divisible by attn_heads {self.attn_heads}")
        return self

    @property
    def encoder_widths(self):
        return tuple(self.base_channels * 2 ** l for l in range(3))

    @property
    def bottleneck_width(self):
        return self.base_channels * 8

    @property
    def decoder_widths(self):
        return tuple(self.base_channels * 2 ** l for l in (3, 2, 1))

    def dt_rank_for(self, channels):
        return self.dt_rank if self.dt_rank is not None else ssm.default_dt_rank(channels)

    @property
    def has_adjustment(self):
        return self.use_adjustment_factors and self.use_residual_connections


def default_config(rank):
    """Default full-scale configuration per dimensionality."""
    if rank == 3:
        return NetworkConfig(rank=3, num_classes=3)
    if rank == 2:
        return NetworkConfig(rank=2, num_classes=2)
    raise ConfigError(f"rank must be 2 or 3, got {rank}")


def apply_ablation(config, variant):
    """One architecture variant at a time; factor/residual flags only toggle
    behavior (and drop the per-layer scale vectors from the schema)."""
    if variant not in ABLATION_VARIANTS:
        raise ConfigError(f"unknown ablation {variant!r}, expected one of "
                          f"{ABLATION_VARIANTS}")
    if variant == "none":
        return config
    if variant in ("conv3", "attention"):
        if config.vssm_replacement != "none":
            raise ConfigError(f"config already replaces the mixer with "
                              f"{config.vssm_replacement!r}; one replacement at a time")
        return dataclasses.replace(config, vssm_replacement=variant)
    if variant == "no-adjust":
        return dataclasses.replace(config, use_adjustment_factors=False)
    return dataclasses.replace(config, use_residual_connections=False)


# ---------------------------------------------------------------------------
# weight schema


def _mixer_specs(prefix, width, config, in_bottleneck):
    ks = 3 ** config.rank
    if config.vssm_replacement == "conv3" or (
            config.vssm_replacement == "attention" and in_bottleneck):
        if config.vssm_replacement == "conv3":
            yield f"{prefix}.conv3.kernel", (width, width) + (3,) * config.rank, \
                ("kaiming", width * ks)
            yield f"{prefix}.conv3.bias", (width,), ("zeros",)
        else:
            for part in ("w_q", "w_k", "w_v", "w_o"):
                yield f"{prefix}.attn.{part}", (width, width), ("kaiming", width)
        return
    e = config.expansion * width
    n = config.d_state
    r = config.dt_rank_for(e)
    yield f"{prefix}.vss.w_in1.weight", (e, width), ("kaiming", width)
    yield f"{prefix}.vss.w_in1.bias", (e,), ("zeros",)
    yield f"{prefix}.vss.conv.kernel", (e, blocks.SEQ_CONV_WIDTH), \
        ("kaiming", blocks.SEQ_CONV_WIDTH)
    yield f"{prefix}.vss.conv.bias", (e,), ("zeros",)
    yield f"{prefix}.vss.ssm.a_log", (e, n), ("a_log",)
    yield f"{prefix}.vss.ssm.d_skip", (e,), ("ones",)
    yield f"{prefix}.vss.ssm.w_bc", (2 * n, e), ("kaiming", e)
    yield f"{prefix}.vss.ssm.w_dt_down", (r, e), ("kaiming", e)
    yield f"{prefix}.vss.ssm.w_dt_up", (e, r), ("kaiming", r)
    yield f"{prefix}.vss.ssm.dt_bias", (e,), ("dt_bias",)
    yield f"{prefix}.vss.norm.gamma", (e,), ("ones",)
    yield f"{prefix}.vss.norm.beta", (e,), ("zeros",)
    yield f"{prefix}.vss.w_in2.weight", (e, width), ("kaiming", width)
    yield f"{prefix}.vss.w_in2.bias", (e,), ("zeros",)
    yield f"{prefix}.vss.w_out.weight", (width, e), ("kaiming", e)
    yield f"{prefix}.vss.w_out.bias", (width,), ("zeros",)


def _rvm_specs(prefix, width, out_width, config, in_bottleneck=False):
    yield f"{prefix}.norm1.gamma", (width,), ("ones",)
    yield f"{prefix}.norm1.beta", (width,), ("zeros",)
    yield from _mixer_specs(prefix, width, config, in_bottleneck)
    if config.has_adjustment:
        yield f"{prefix}.s", (width,), ("ones",)
    yield f"{prefix}.norm2.gamma", (width,), ("ones",)
    yield f"{prefix}.norm2.beta", (width,), ("zeros",)
    yield f"{prefix}.proj.weight", (out_width, width), ("kaiming", width)


def iter_weight_specs(config):
    """Yield (name, shape, init) for every learnable tensor, in build order.

    The name set and shapes are a pure function of the configuration.
    """
    config.validate()
    ks = 3 ** config.rank
    yield "stem.dw.kernel", (config.in_channels,) + (3,) * config.rank, ("kaiming", ks)
    yield "stem.dw.bias", (config.in_channels,), ("zeros",)
    # the stem pointwise feeds the first block's layernorm, so it carries no bias
    yield "stem.pw.weight", (config.base_channels, config.in_channels), \
        ("kaiming", config.in_channels)
    for l, count in enumerate(config.encoder_rvm_counts, start=1):
        width = config.encoder_widths[l - 1]
        for i in range(count):
            out = 2 * width if i == count - 1 else width
            yield from _rvm_specs(f"encoder.{l}.rvm.{i}", width, out, config)
    wb = config.bottleneck_width
    for i in range(config.bottleneck_rvm_count):
        yield from _rvm_specs(f"bottleneck.rvm.{i}", wb, wb, config, in_bottleneck=True)
    for idx, width in enumerate(config.decoder_widths, start=1):
        yield f"decoder.{idx}.dw.kernel", (width,) + (3,) * config.rank, ("kaiming", ks)
        yield f"decoder.{idx}.dw.bias", (width,), ("zeros",)
        yield f"decoder.{idx}.s_prime", (width,), ("ones",)
        yield f"decoder.{idx}.halve.weight", (width // 2, width), ("kaiming", width)
        yield f"decoder.{idx}.halve.bias", (width // 2,), ("zeros",)
    yield "head.pw.weight", (config.num_classes, config.base_channels), \
        ("kaiming", config.base_channels)
    yield "head.pw.bias", (config.num_classes,), ("zeros",)


def build(config, seed, dtype=np.float32):
    """Materialize the weight schema deterministically from ``seed``."""
    rng = np.random.default_rng(seed)
    weights = {}
    for name, shape, init in iter_weight_specs(config):
        kind = init[0]
        if kind == "kaiming":
            bound = np.sqrt(6.0 / init[1])
            arr = rng.uniform(-bound, bound, size=shape).astype(dtype)
        elif kind == "zeros":
            arr = np.zeros(shape, dtype=dtype)
        elif kind == "ones":
            arr = np.ones(shape, dtype=dtype)
        elif kind == "a_log":
            arr = ssm.a_log_init(shape[0], shape[1], dtype)
        elif kind == "dt_bias":
            arr = ssm.dt_bias_init(shape[0], rng, dtype)
        else:
            raise ConfigError(f"unknown init kind {kind!r} for {name}")
        weights[name] = Tensor(arr, requires_grad=True)
    return weights


# ---------------------------------------------------------------------------
# forward


def _mixer_view(weights, prefix, config, in_bottleneck):
    if config.vssm_replacement == "conv3":
        return blocks.Conv3Weights(kernel=weights[f"{prefix}.conv3.kernel"],
                                   bias=weights[f"{prefix}.conv3.bias"])
    if config.vssm_replacement == "attention" and in_bottleneck:
        return blocks.AttentionWeights(
            w_q=weights[f"{prefix}.attn.w_q"], w_k=weights[f"{prefix}.attn.w_k"],
            w_v=weights[f"{prefix}.attn.w_v"], w_o=weights[f"{prefix}.attn.w_o"],
            heads=config.attn_heads)
    return blocks.VssWeights(
        w_in1=weights[f"{prefix}.vss.w_in1.weight"],
        b_in1=weights[f"{prefix}.vss.w_in1.bias"],
        conv_k=weights[f"{prefix}.vss.conv.kernel"],
        conv_b=weights[f"{prefix}.vss.conv.bias"],
        ssm=ssm.SsmParams(
            a_log=weights[f"{prefix}.vss.ssm.a_log"],
            d_skip=weights[f"{prefix}.vss.ssm.d_skip"],
            w_bc=weights[f"{prefix}.vss.ssm.w_bc"],
            w_dt_down=weights[f"{prefix}.vss.ssm.w_dt_down"],
            w_dt_up=weights[f"{prefix}.vss.ssm.w_dt_up"],
            dt_bias=weights[f"{prefix}.vss.ssm.dt_bias"],
        ),
        norm_g=weights[f"{prefix}.vss.norm.gamma"],
        norm_b=weights[f"{prefix}.vss.norm.beta"],
        w_in2=weights[f"{prefix}.vss.w_in2.weight"],
        b_in2=weights[f"{prefix}.vss.w_in2.bias"],
        w_out=weights[f"{prefix}.vss.w_out.weight"],
        b_out=weights[f"{prefix}.vss.w_out.bias"],
    )


def _rvm_view(weights, prefix, config, in_bottleneck=False):
    return blocks.RvmWeights(
        norm1_g=weights[f"{prefix}.norm1.gamma"],
        norm1_b=weights[f"{prefix}.norm1.beta"],
        mixer=_mixer_view(weights, prefix, config, in_bottleneck),
        s=weights.get(f"{prefix}.s"),
        norm2_g=weights[f"{prefix}.norm2.gamma"],
        norm2_b=weights[f"{prefix}.norm2.beta"],
        w_proj=weights[f"{prefix}.proj.weight"],
    )


def forward(weights, config, image, trace=None):
    """Image (in_channels, spatial...) -> logits (num_classes, spatial...)."""
    config.validate()
    if image.ndim - 1 != config.rank:
        raise ShapeError(f"expected a rank-{config.rank} image, got shape {image.shape}")
    if image.shape[0] != config.in_channels:
        raise ShapeError(f"expected {config.in_channels} input channels, "
                         f"got shape {image.shape}")
    for n in image.shape[1:]:
        if n % DOWNSAMPLE_FACTOR != 0:
            raise ShapeError(f"spatial extents must be divisible by "
                             f"{DOWNSAMPLE_FACTOR}, got {image.shape}")

    x = ops.dwconv(image, weights["stem.dw.kernel"], weights["stem.dw.bias"],
                   stride=1, padding=1)
    x = ops.pointwise_conv(x, weights["stem.pw.weight"])
    if trace is not None:
        trace["stem"] = x.shape

    skips = []
    for l, count in enumerate(config.encoder_rvm_counts, start=1):
        layers = [_rvm_view(weights, f"encoder.{l}.rvm.{i}", config)
                  for i in range(count)]
        x = blocks.encoder_block_forward(x, layers)
        skips.append(x)
        if trace is not None:
            trace[f"encoder.{l}"] = x.shape

    layers = [_rvm_view(weights, f"bottleneck.rvm.{i}", config, in_bottleneck=True)
              for i in range(config.bottleneck_rvm_count)]
    x = blocks.bottleneck_forward(x, layers)
    if trace is not None:
        trace["bottleneck"] = x.shape

    for idx, skip in enumerate(reversed(skips), start=1):
        dec = blocks.DecoderWeights(
            dw_k=weights[f"decoder.{idx}.dw.kernel"],
            dw_b=weights[f"decoder.{idx}.dw.bias"],
            s_prime=weights[f"decoder.{idx}.s_prime"],
            w_half=weights[f"decoder.{idx}.halve.weight"],
            b_half=weights[f"decoder.{idx}.halve.bias"],
        )
        x = blocks.decoder_block_forward(x, skip, dec)
        if trace is not None:
            trace[f"decoder.{idx}"] = x.shape

    logits = ops.pointwise_conv(x, weights["head.pw.weight"], weights["head.pw.bias"])
    if trace is not None:
        trace["head"] = logits.shape
    return logits


# ---------------------------------------------------------------------------
# weight file format


def save_weights(weights, path):
    """Write the named-tensor table to ``path`` (little-endian throughout)."""
    with open(path, "wb") as f:
        f.write(WEIGHT_MAGIC)
        f.write(struct.pack("<II", WEIGHT_VERSION, len(weights)))
        for name, tensor in weights.items():
            raw = name.encode("utf-8")
            arr = tensor.data
            tag = _TAG_FOR[arr.dtype]
            f.write(struct.pack("<I", len(raw)))
            f.write(raw)
            f.write(struct.pack("<B", arr.ndim))
            f.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
            f.write(struct.pack("<B", tag))
            f.write(arr.astype(_DTYPE_TAGS[tag], copy=False).tobytes())


def _read_exact(f, n, what):
    buf = f.read(n)
    if len(buf) != n:
        raise LoadError(f"weight file truncated while reading {what}")
    return buf


def load_weights(path, config=None):
    """Read a weight table; with ``config`` the name set and shapes must match
    the config-derived schema exactly."""
    with open(path, "rb") as f:
        if _read_exact(f, 4, "magic") != WEIGHT_MAGIC:
            raise LoadError(f"{path} is not a weight file (bad magic)")
        version, count = struct.unpack("<II", _read_exact(f, 8, "header"))
        if version != WEIGHT_VERSION:
            raise LoadError(f"unsupported weight file version {version}")
        weights = {}
        for _ in range(count):
            (name_len,) = struct.unpack("<I", _read_exact(f, 4, "name length"))
            name = _read_exact(f, name_len, "name").decode("utf-8")
            (rank,) = struct.unpack("<B", _read_exact(f, 1, "rank"))
            shape = struct.unpack(f"<{rank}Q", _read_exact(f, 8 * rank, "extents"))
            (tag,) = struct.unpack("<B", _read_exact(f, 1, "dtype tag"))
            if tag not in _DTYPE_TAGS:
                raise LoadError(f"unknown dtype tag {tag} for tensor {name!r}")
            dt = _DTYPE_TAGS[tag]
            nbytes = prod(shape) * dt.itemsize
            payload = _read_exact(f, nbytes, f"payload of {name!r}")
            arr = np.frombuffer(payload, dtype=dt).reshape(shape)
            weights[name] = Tensor(arr.copy(), requires_grad=True)

    if config is not None:
        expected = {name: shape for name, shape, _ in iter_weight_specs(config)}
        missing = sorted(set(expected) - set(weights))
        extra = sorted(set(weights) - set(expected))
        if missing or extra:
            raise LoadError(f"weight names do not match the configuration; "
                            f"missing={missing}, extra={extra}")
        for name, shape in expected.items():
            if tuple(weights[name].shape) != tuple(shape):
                raise LoadError(f"tensor {name!r} has shape {weights[name].shape}, "
                                f"expected {shape}")
    return weights


def count_learnable_elements(weights):
    return sum(t.size for t in weights.values())
