"""Composite layers: composition oracles, shape contracts, ablation
equivalences, stand-in mixers, and miniature-config gradient checks."""

import numpy as np
import pytest

from conftest import gradcheck, reduce_to_scalar
from lmunet import blocks, ops
from lmunet.blocks import (AttentionWeights, Conv3Weights, DecoderWeights,
                           RvmWeights, VssWeights, bottleneck_forward,
                           conv3_forward, decoder_block_forward,
                           encoder_block_forward, rvm_forward,
                           self_attention_forward, vss_forward)
from lmunet.errors import ConfigError, ShapeError
from lmunet.ssm import make_ssm_params, selective_scan_par
from lmunet.tensor import Tensor


def t(arr, dtype=np.float64, grad=False):
    return Tensor(np.asarray(arr), requires_grad=grad, dtype=dtype)


def make_vss(rng, width, lam=2, n_state=4, dtype=np.float64, grad=False):
    e = lam * width

    def w(shape):
        return Tensor(0.3 * rng.standard_normal(shape), requires_grad=grad,
                      dtype=dtype)

    return VssWeights(
        w_in1=w((e, width)), b_in1=w((e,)),
        conv_k=w((e, blocks.SEQ_CONV_WIDTH)), conv_b=w((e,)),
        ssm=make_ssm_params(e, n_state=n_state, rng=rng, dtype=dtype,
                            requires_grad=grad),
        norm_g=Tensor(np.ones(e), requires_grad=grad, dtype=dtype),
        norm_b=Tensor(np.zeros(e), requires_grad=grad, dtype=dtype),
        w_in2=w((e, width)), b_in2=w((e,)),
        w_out=w((width, e)), b_out=w((width,)),
    )


def make_rvm(rng, width, out_width=None, lam=2, n_state=4, dtype=np.float64,
             grad=False, with_s=True, mixer=None):
    out_width = out_width or width

    def w(shape):
        return Tensor(0.3 * rng.standard_normal(shape), requires_grad=grad,
                      dtype=dtype)

    return RvmWeights(
        norm1_g=Tensor(np.ones(width), requires_grad=grad, dtype=dtype),
        norm1_b=Tensor(np.zeros(width), requires_grad=grad, dtype=dtype),
        mixer=mixer if mixer is not None else
        make_vss(rng, width, lam, n_state, dtype, grad),
        s=Tensor(np.ones(width), requires_grad=grad, dtype=dtype) if with_s else None,
        norm2_g=Tensor(np.ones(width), requires_grad=grad, dtype=dtype),
        norm2_b=Tensor(np.zeros(width), requires_grad=grad, dtype=dtype),
        w_proj=w((out_width, width)),
    )


def vss_tensors(w):
    return [w.w_in1, w.b_in1, w.conv_k, w.conv_b, *w.ssm.tensors(),
            w.norm_g, w.norm_b, w.w_in2, w.b_in2, w.w_out, w.b_out]


class TestVss:
    def test_shape_contract(self, rng):
        w = make_vss(rng, 3)
        x = t(rng.standard_normal((7, 3)))
        assert vss_forward(x, w).shape == (7, 3)

    def test_zero_gate_closes_output(self, rng):
        w = make_vss(rng, 3)
        w.w_in2.data[:] = 0.0
        w.b_in2.data[:] = 0.0
        w.b_out.data[:] = 0.0
        y = vss_forward(t(rng.standard_normal((5, 3))), w)
        assert np.allclose(y.data, 0.0)

    def test_composition_oracle(self, rng):
        w = make_vss(rng, 2, lam=2, n_state=3)
        x = t(rng.standard_normal((6, 2)))
        got = vss_forward(x, w)
        a = ops.linear(x, w.w_in1, w.b_in1)
        a = ops.transpose_lc(a)
        a = ops.dwconv(a, w.conv_k, w.conv_b, padding=((3, 0),))
        a = ops.transpose_lc(a)
        a = ops.silu(a)
        a = selective_scan_par(a, w.ssm)
        a = ops.layernorm(a, w.norm_g, w.norm_b)
        gate = ops.silu(ops.linear(x, w.w_in2, w.b_in2))
        want = ops.linear(ops.hadamard(a, gate), w.w_out, w.b_out)
        assert np.allclose(got.data, want.data, rtol=1e-5)


class TestRvm:
    def test_degenerate_mixer_reduces_to_projection(self, rng):
        w = make_rvm(rng, 3)
        for tensor in vss_tensors(w.mixer):
            tensor.data[:] = 0.0
        w.mixer.norm_g.data[:] = 0.0   # forces mixer output to exactly zero
        m = t(rng.standard_normal((5, 3)))
        got = rvm_forward(m, w)
        want = ops.linear(ops.layernorm(m, w.norm2_g, w.norm2_b), w.w_proj)
        assert np.allclose(got.data, want.data, rtol=1e-9)

    def test_zero_s_equals_no_adjustment_path(self, rng):
        seed = rng.integers(2 ** 32)
        w_s = make_rvm(np.random.default_rng(seed), 3, with_s=True)
        w_no = make_rvm(np.random.default_rng(seed), 3, with_s=False)
        w_s.s.data[:] = 0.0
        m = t(np.random.default_rng(7).standard_normal((6, 3)))
        a = rvm_forward(m, w_s)
        b = rvm_forward(m, w_no)
        assert np.array_equal(a.data, b.data)

    def test_equation_oracle(self, rng):
        w = make_rvm(rng, 3, out_width=5)
        m = t(rng.standard_normal((4, 3)))
        got = rvm_forward(m, w)
        mixed = vss_forward(ops.layernorm(m, w.norm1_g, w.norm1_b), w.mixer)
        resid = ops.add(mixed, ops.scale_channels(m, w.s, axis=-1))
        want = ops.linear(ops.layernorm(resid, w.norm2_g, w.norm2_b), w.w_proj)
        assert np.allclose(got.data, want.data, rtol=1e-6)
        assert got.shape == (4, 5)


class TestEncoderBottleneckDecoder:
    @pytest.mark.parametrize("spatial", [(8, 8), (4, 8), (8, 8, 8), (4, 4, 8)])
    def test_encoder_shape_contract(self, rng, spatial):
        width = 4
        layers = [make_rvm(rng, width, out_width=2 * width)]
        f = t(rng.standard_normal((width,) + spatial))
        out = encoder_block_forward(f, layers)
        assert out.shape == (2 * width,) + tuple(n // 2 for n in spatial)

    def test_encoder_multi_layer_doubles_only_last(self, rng):
        width = 3
        layers = [make_rvm(rng, width), make_rvm(rng, width, out_width=2 * width)]
        f = t(rng.standard_normal((width, 4, 4)))
        assert encoder_block_forward(f, layers).shape == (6, 2, 2)

    def test_encoder_rejects_odd_extents(self, rng):
        layers = [make_rvm(rng, 2, out_width=4)]
        with pytest.raises(ShapeError):
            encoder_block_forward(t(np.ones((2, 3, 4))), layers)

    @pytest.mark.parametrize("shape", [(4, 4, 4, 4), (4, 6, 6)])
    def test_bottleneck_preserves_shape(self, rng, shape):
        layers = [make_rvm(rng, shape[0]) for _ in range(4)]
        f = t(rng.standard_normal(shape))
        assert bottleneck_forward(f, layers).shape == shape

    def test_bottleneck_requires_four_layers(self, rng):
        layers = [make_rvm(rng, 2) for _ in range(3)]
        with pytest.raises(ConfigError):
            bottleneck_forward(t(np.ones((2, 4, 4))), layers)

    def test_bottleneck_equals_chained_rvm(self, rng):
        layers = [make_rvm(rng, 3) for _ in range(4)]
        f = t(rng.standard_normal((3, 2, 4)))
        got = bottleneck_forward(f, layers)
        x = ops.flatten_spatial(f)
        for lw in layers:
            x = rvm_forward(x, lw, (2, 4))
        want = ops.unflatten_spatial(x, (2, 4))
        assert np.allclose(got.data, want.data, rtol=1e-5)

    def make_decoder(self, rng, width, rank, dtype=np.float64, grad=False):
        def w(shape):
            return Tensor(0.3 * rng.standard_normal(shape), requires_grad=grad,
                          dtype=dtype)
        return DecoderWeights(
            dw_k=w((width,) + (3,) * rank), dw_b=w((width,)),
            s_prime=Tensor(np.ones(width), requires_grad=grad, dtype=dtype),
            w_half=w((width // 2, width)), b_half=w((width // 2,)))

    @pytest.mark.parametrize("spatial", [(4, 4), (2, 4, 4)])
    def test_decoder_shape_contract(self, rng, spatial):
        width = 4
        w = self.make_decoder(rng, width, len(spatial))
        p = t(rng.standard_normal((width,) + spatial))
        skip = t(rng.standard_normal((width,) + spatial))
        out = decoder_block_forward(p, skip, w)
        assert out.shape == (width // 2,) + tuple(2 * n for n in spatial)

    def test_decoder_zero_skip_is_plain_decode(self, rng):
        w = self.make_decoder(rng, 4, 2)
        p = t(rng.standard_normal((4, 4, 4)))
        zero = t(np.zeros((4, 4, 4)))
        a = decoder_block_forward(p, zero, w)
        b = decoder_block_forward(zero, p, w)
        assert np.array_equal(a.data, b.data)

    def test_decoder_dirac_conv_identity_path(self, rng):
        width, rank = 4, 2
        w = self.make_decoder(rng, width, rank)
        w.s_prime.data[:] = 0.0
        w.dw_b.data[:] = 0.0
        kernel = np.zeros((width, 3, 3))
        kernel[:, 1, 1] = 1.0
        w.dw_k.data[:] = kernel
        q = t(np.abs(rng.standard_normal((width, 4, 4))))  # non-negative
        zero = t(np.zeros((width, 4, 4)))
        got = decoder_block_forward(q, zero, w)
        want = ops.upsample2x(ops.pointwise_conv(q, w.w_half, w.b_half))
        assert np.allclose(got.data, want.data, rtol=1e-12)

    def test_decoder_shape_errors(self, rng):
        w = self.make_decoder(rng, 4, 2)
        with pytest.raises(ShapeError):
            decoder_block_forward(t(np.ones((4, 4, 4))), t(np.ones((4, 2, 4))), w)
        w3 = self.make_decoder(rng, 3, 2)
        with pytest.raises(ConfigError):
            decoder_block_forward(t(np.ones((3, 4, 4))), t(np.ones((3, 4, 4))), w3)


class TestStandIns:
    def test_conv3_shape_and_dirac(self, rng):
        width = 3
        kernel = np.zeros((width, width, 3, 3))
        for c in range(width):
            kernel[c, c, 1, 1] = 1.0
        w = Conv3Weights(kernel=t(kernel), bias=t(np.zeros(width)))
        x = t(rng.standard_normal((16, width)))
        y = conv3_forward(x, w, (4, 4))
        assert y.shape == (16, width)
        assert np.allclose(y.data, x.data, rtol=1e-12)

    def test_conv3_random_vs_sliding_window(self, rng):
        width = 2
        w = Conv3Weights(kernel=t(rng.standard_normal((width, width, 3, 3))),
                         bias=t(rng.standard_normal(width)))
        x_sp = rng.standard_normal((width, 4, 6))
        got = conv3_forward(ops.flatten_spatial(t(x_sp)), w, (4, 6))
        want = ops.flatten_spatial(ops.conv(t(x_sp), w.kernel, w.bias, padding=1))
        assert np.allclose(got.data, want.data, rtol=1e-12)

    def attention_oracle(self, x, w):
        length, channels = x.shape
        dim = channels // w.heads
        q = x @ w.w_q.data.T
        k = x @ w.w_k.data.T
        v = x @ w.w_v.data.T
        out = np.zeros_like(x)
        for h in range(w.heads):
            cols = slice(h * dim, (h + 1) * dim)
            for i in range(length):
                scores = np.array([q[i, cols] @ k[j, cols] for j in range(length)])
                scores /= np.sqrt(dim)
                weights = np.exp(scores - scores.max())
                weights /= weights.sum()
                out[i, cols] = sum(weights[j] * v[j, cols] for j in range(length))
        return out @ w.w_o.data.T

    def make_attention(self, rng, channels, heads, grad=False):
        def w(shape):
            return Tensor(0.5 * rng.standard_normal(shape), requires_grad=grad,
                          dtype=np.float64)
        return AttentionWeights(w_q=w((channels, channels)),
                                w_k=w((channels, channels)),
                                w_v=w((channels, channels)),
                                w_o=w((channels, channels)), heads=heads)

    def test_attention_single_token(self, rng):
        w = self.make_attention(rng, 4, 2)
        x = t(rng.standard_normal((1, 4)))
        got = self_attention_forward(x, w)
        want = (x.data @ w.w_v.data.T) @ w.w_o.data.T
        assert np.allclose(got.data, want, rtol=1e-9)

    def test_attention_identical_tokens(self, rng):
        w = self.make_attention(rng, 4, 2)
        row = rng.standard_normal(4)
        x = t(np.tile(row, (6, 1)))
        y = self_attention_forward(x, w).data
        assert np.allclose(y, y[0], rtol=1e-9)

    def test_attention_formula_oracle(self, rng):
        w = self.make_attention(rng, 4, 2)
        x = t(rng.standard_normal((5, 4)))
        got = self_attention_forward(x, w)
        assert np.allclose(got.data, self.attention_oracle(x.data, w), rtol=1e-6)

    def test_attention_head_divisibility(self, rng):
        w = self.make_attention(rng, 4, 2)
        w.heads = 3
        with pytest.raises(ConfigError):
            self_attention_forward(t(np.ones((2, 4))), w)

    def test_stand_ins_preserve_rvm_contract(self, rng):
        width = 4
        conv_mixer = Conv3Weights(
            kernel=t(rng.standard_normal((width, width, 3, 3))),
            bias=t(np.zeros(width)))
        attn_mixer = self.make_attention(rng, width, 2)
        for mixer in (conv_mixer, attn_mixer):
            w = make_rvm(rng, width, out_width=width, mixer=mixer)
            x = t(rng.standard_normal((16, width)))
            assert rvm_forward(x, w, (4, 4)).shape == (16, width)


class TestBlockGradients:
    def test_vss_gradients(self, rng):
        w = make_vss(rng, 2, lam=2, n_state=2, grad=True)
        x = Tensor(rng.standard_normal((4, 2)), requires_grad=True,
                   dtype=np.float64)
        mix = rng.standard_normal((4, 2))
        gradcheck(lambda: reduce_to_scalar(vss_forward(x, w), mix),
                  [x] + vss_tensors(w))

    def test_rvm_gradients(self, rng):
        w = make_rvm(rng, 2, out_width=3, lam=2, n_state=2, grad=True)
        x = Tensor(rng.standard_normal((4, 2)), requires_grad=True,
                   dtype=np.float64)
        mix = rng.standard_normal((4, 3))
        tensors = [x, w.norm1_g, w.norm1_b, w.s, w.norm2_g, w.norm2_b, w.w_proj]
        gradcheck(lambda: reduce_to_scalar(rvm_forward(x, w), mix), tensors)

    def test_decoder_gradients(self, rng):
        width, rank = 4, 2
        deco = TestEncoderBottleneckDecoder()
        w = deco.make_decoder(rng, width, rank, grad=True)
        p = Tensor(rng.standard_normal((width, 2, 2)), requires_grad=True,
                   dtype=np.float64)
        skip = Tensor(rng.standard_normal((width, 2, 2)), requires_grad=True,
                      dtype=np.float64)
        mix = rng.standard_normal((width // 2, 4, 4))
        gradcheck(lambda: reduce_to_scalar(decoder_block_forward(p, skip, w), mix),
                  [p, skip, w.dw_k, w.dw_b, w.s_prime, w.w_half, w.b_half])

    def test_attention_gradients(self, rng):
        standins = TestStandIns()
        w = standins.make_attention(rng, 4, 2, grad=True)
        x = Tensor(rng.standard_normal((3, 4)), requires_grad=True,
                   dtype=np.float64)
        mix = rng.standard_normal((3, 4))
        gradcheck(lambda: reduce_to_scalar(self_attention_forward(x, w), mix),
                  [x, w.w_q, w.w_k, w.w_v, w.w_o])
