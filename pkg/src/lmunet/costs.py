"""Analytic parameter and FLOP accounting.

The walk below enumerates the exact op schedule of :func:`lmunet.network.forward`
using the shared cost conventions from :mod:`lmunet.counting`, so its totals
equal an instrumented forward pass bit for bit.  No tensors are allocated.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from math import prod

from . import counting
from .blocks import SEQ_CONV_WIDTH
from .errors import ConfigError
from .network import DOWNSAMPLE_FACTOR, iter_weight_specs

_MEMBER_NAMES = {
    "weight", "bias", "gamma", "beta", "kernel",
    "a_log", "d_skip", "w_bc", "w_dt_down", "w_dt_up", "dt_bias",
    "w_q", "w_k", "w_v", "w_o",
}


@dataclass
class CostRow:
    name: str
    params: int = 0
    macs: int = 0
    flops: int = 0


@dataclass
class CostReport:
    rows: list = field(default_factory=list)
    convention: str = counting.CONVENTION

    @property
    def total_params(self):
        return sum(r.params for r in self.rows)

    @property
    def total_macs(self):
        return sum(r.macs for r in self.rows)

    @property
    def total_flops(self):
        return sum(r.flops for r in self.rows)

    def to_csv(self):
        lines = ["name,params,flops"]
        for r in self.rows:
            lines.append(f"{r.name},{r.params},{r.flops}")
        lines.append(f"TOTAL,{self.total_params},{self.total_flops}")
        return "\n".join(lines) + "\n"

    def summary(self):
        return (f"params={self.total_params} flops={self.total_flops} "
                f"macs={self.total_macs}")


def _row_name(weight_name):
    parts = weight_name.split(".")
    if parts[-1] in _MEMBER_NAMES:
        return ".".join(parts[:-1])
    return weight_name


def _params_by_row(config):
    table = {}
    for name, shape, _ in iter_weight_specs(config):
        row = _row_name(name)
        table[row] = table.get(row, 0) + prod(shape)
    return table


class _Walk:
    def __init__(self, config, spatial):
        self.config = config
        self.spatial = spatial
        self.params = _params_by_row(config)
        self.rows = {}

    def row(self, name, cost=(0, 0)):
        r = self.rows.get(name)
        if r is None:
            r = CostRow(name, params=self.params.pop(name, 0))
            self.rows[name] = r
        r.macs += cost[0]
        r.flops += cost[1]

    def finish(self):
        for name, params in self.params.items():
            self.rows[name] = CostRow(name, params=params)
        return list(self.rows.values())


def _mixer_flops(walk, prefix, length, width, in_bottleneck):
    cfg = walk.config
    if cfg.vssm_replacement == "conv3":
        walk.row(f"{prefix}.conv3",
                 counting.conv_cost(length, width, width, 3 ** cfg.rank))
        return
    if cfg.vssm_replacement == "attention" and in_bottleneck:
        walk.row(f"{prefix}.attn",
                 counting.attention_cost(length, width, cfg.attn_heads))
        return
    e = cfg.expansion * width
    n = cfg.d_state
    r = cfg.dt_rank_for(e)
    walk.row(f"{prefix}.vss.w_in1", counting.linear_cost(length, width, e))
    walk.row(f"{prefix}.vss.conv", counting.dwconv_cost(e, length, SEQ_CONV_WIDTH))
    walk.row(f"{prefix}.vss.conv", counting.act_cost(length * e))      # silu
    walk.row(f"{prefix}.vss.ssm", counting.linear_cost(length, e, 2 * n))
    walk.row(f"{prefix}.vss.ssm", counting.linear_cost(length, e, r))
    walk.row(f"{prefix}.vss.ssm", counting.linear_cost(length, r, e))
    walk.row(f"{prefix}.vss.ssm", counting.act_cost(length * e))       # softplus
    walk.row(f"{prefix}.vss.ssm", counting.scan_cost(length, e, n))
    walk.row(f"{prefix}.vss.norm", counting.norm_cost(length * e))
    walk.row(f"{prefix}.vss.w_in2", counting.linear_cost(length, width, e))
    walk.row(f"{prefix}.vss.w_in2", counting.act_cost(length * e))     # silu
    walk.row(f"{prefix}.vss.w_out", counting.elemwise_cost(length * e))  # gate
    walk.row(f"{prefix}.vss.w_out", counting.linear_cost(length, e, width))


def _rvm_flops(walk, prefix, length, width, out_width, in_bottleneck=False):
    cfg = walk.config
    walk.row(f"{prefix}.norm1", counting.norm_cost(length * width))
    _mixer_flops(walk, prefix, length, width, in_bottleneck)
    if cfg.has_adjustment:
        walk.row(f"{prefix}.s", counting.elemwise_cost(length * width))  # scale
        walk.row(f"{prefix}.s", counting.elemwise_cost(length * width))  # add
    walk.row(f"{prefix}.norm2", counting.norm_cost(length * width))
    walk.row(f"{prefix}.proj", counting.linear_cost(length, width, out_width))


def _walk_rows(config, input_spatial):
    config.validate()
    walk = _Walk(config, input_spatial)
    if input_spatial is None:
        return walk.finish()

    spatial = tuple(int(n) for n in input_spatial)
    if len(spatial) != config.rank:
        raise ConfigError(f"input extents {spatial} do not match rank {config.rank}")
    for n in spatial:
        if n < DOWNSAMPLE_FACTOR or n % DOWNSAMPLE_FACTOR != 0:
            raise ConfigError(f"input extents must be positive multiples of "
                              f"{DOWNSAMPLE_FACTOR}, got {spatial}")

    ks = 3 ** config.rank
    sites = prod(spatial)
    walk.row("stem.dw", counting.dwconv_cost(config.in_channels, sites, ks))
    walk.row("stem.pw", counting.pointwise_cost(sites, config.in_channels,
                                                config.base_channels))

    for l, count in enumerate(config.encoder_rvm_counts, start=1):
        width = config.encoder_widths[l - 1]
        block_sp = tuple(n // 2 ** (l - 1) for n in spatial)
        length = prod(block_sp)
        for i in range(count):
            out = 2 * width if i == count - 1 else width
            _rvm_flops(walk, f"encoder.{l}.rvm.{i}", length, width, out)
        pooled = 2 * width * prod(n // 2 for n in block_sp)
        walk.row(f"encoder.{l}.pool", counting.maxpool_cost(pooled, 2 ** config.rank))

    wb = config.bottleneck_width
    length = prod(n // DOWNSAMPLE_FACTOR for n in spatial)
    for i in range(config.bottleneck_rvm_count):
        _rvm_flops(walk, f"bottleneck.rvm.{i}", length, wb, wb, in_bottleneck=True)

    for idx, width in enumerate(config.decoder_widths, start=1):
        dec_sp = tuple(n // 2 ** (4 - idx) for n in spatial)
        dec_sites = prod(dec_sp)
        elems = width * dec_sites
        walk.row(f"decoder.{idx}.fuse", counting.elemwise_cost(elems))
        walk.row(f"decoder.{idx}.dw", counting.dwconv_cost(width, dec_sites, ks))
        walk.row(f"decoder.{idx}.s_prime", counting.elemwise_cost(elems))  # scale
        walk.row(f"decoder.{idx}.s_prime", counting.elemwise_cost(elems))  # add
        walk.row(f"decoder.{idx}.dw", counting.act_cost(elems))            # relu
        walk.row(f"decoder.{idx}.halve",
                 counting.pointwise_cost(dec_sites, width, width // 2))
        walk.row(f"decoder.{idx}.upsample",
                 counting.upsample_cost((width // 2,) + dec_sp))

    walk.row("head.pw", counting.pointwise_cost(sites, config.base_channels,
                                                config.num_classes))
    return walk.finish()


def count_params(config):
    """Exact learnable-parameter budget per named layer."""
    return CostReport(rows=_walk_rows(config, None))


def count_flops(config, input_spatial):
    """Parameter plus FLOP budget for one forward pass at the given extents."""
    return CostReport(rows=_walk_rows(config, tuple(input_spatial)))
