import math

import numpy as np
import pytest

from tatrack import tensor as T
from tatrack.backbone import TokenSequence
from tatrack.errors import ConfigError, DimensionError
from tatrack.mcp import BOTTLENECK, Mcp, McpLayer, PromptState, fovea, inject, mcp_forward
from tatrack.sti import StiBlock, StiConfig, apply_sti_at_layer, sti_forward
from tatrack.tensor import Tensor

from oracles import brute_attention


def _ln(x, g, b, eps=1e-6):
    mu = x.mean(-1, keepdims=True)
    var = ((x - mu) ** 2).mean(-1, keepdims=True)
    return (x - mu) / np.sqrt(var + eps) * g + b


def _gelu(x):
    return 0.5 * x * (1 + np.tanh(math.sqrt(2 / math.pi) * (x + 0.044715 * x ** 3)))


def _lin(x, layer):
    return x @ layer.weight.data + layer.bias.data


@pytest.mark.parametrize("n", [1, 3, 8])
def test_sti_matches_loop_oracle(n):
    rng = np.random.default_rng(n)
    with T.default_dtype(np.float64):
        blk = StiBlock(rng, 8, heads=1)
        zi, zo = rng.standard_normal((n, 8)), rng.standard_normal((n, 8))
        a, b = sti_forward(Tensor(zi), Tensor(zo), blk)
    z = np.concatenate([zi, zo])
    att = brute_attention(_lin(z, blk.wq), _lin(z, blk.wk), _lin(z, blk.wv), 1)
    f = _lin(att, blk.wo)
    f_t = _ln(f + z, blk.ln1.gamma.data, blk.ln1.beta.data)
    out = _ln(f_t + _lin(_gelu(_lin(f_t, blk.fc1)), blk.fc2), blk.ln2.gamma.data, blk.ln2.beta.data)
    np.testing.assert_allclose(a.data, out[:n], atol=1e-6)
    np.testing.assert_allclose(b.data, out[n:], atol=1e-6)


def test_sti_touches_only_templates_at_insertion_layers():
    rng = np.random.default_rng(0)
    si = TokenSequence(Tensor(rng.standard_normal((6, 8))), 2)
    so = TokenSequence(Tensor(rng.standard_normal((6, 8))), 2)
    cfg = StiConfig(frozenset({2}), depth=3)
    blocks = {"2": StiBlock(rng, 8)}
    same_i, same_o = apply_sti_at_layer(si, so, 1, cfg, blocks)
    assert same_i is si and same_o is so
    ni, no = apply_sti_at_layer(si, so, 2, cfg, blocks)
    np.testing.assert_array_equal(ni.search.data, si.search.data)
    np.testing.assert_array_equal(no.search.data, so.search.data)
    assert not np.allclose(ni.template.data, si.template.data)


def test_sti_config_rejects_out_of_range_layers():
    with pytest.raises(ConfigError):
        StiConfig(frozenset({0}), depth=6)
    with pytest.raises(ConfigError):
        StiConfig(frozenset({7}), depth=6)
    with pytest.raises(DimensionError):
        sti_forward(Tensor(np.ones((2, 8))), Tensor(np.ones((3, 8))), StiBlock(np.random.default_rng(0), 8))


def test_fovea_fixes_constant_maps():
    m = np.full((1, 3, 2, 2), 4.0)
    np.testing.assert_allclose(fovea(Tensor(m)).data, m)


def test_fovea_emphasizes_peaks():
    m = np.zeros((1, 1, 2, 2))
    m[0, 0, 0, 0] = 2.0
    out = fovea(Tensor(m, dtype=np.float64)).data
    w = math.exp(2) / (math.exp(2) + 3)
    assert out[0, 0, 0, 0] == pytest.approx(2.0 * 4 * w)
    assert out[0, 0, 1, 1] == 0.0


def _streams(rng, dim=16, tg=2, sg=4):
    n = tg * tg + sg * sg
    x = TokenSequence(Tensor(rng.standard_normal((n, dim))), tg * tg)
    p = PromptState(Tensor(rng.standard_normal((n, dim))), tg * tg)
    return x, p


def test_mcp_layer_shapes_and_bottleneck():
    rng = np.random.default_rng(0)
    layer = McpLayer(rng, 16, 2, 4)
    assert layer.conv_down_prompt.weight.shape == (BOTTLENECK, 16)
    assert layer.conv_up.weight.shape == (16, BOTTLENECK)
    x, p = _streams(rng)
    out = mcp_forward(p, x, layer)
    assert out.tokens.shape == x.tokens.shape and out.boundary == x.boundary


def test_mcp_segments_do_not_mix():
    rng = np.random.default_rng(1)
    layer = McpLayer(rng, 16, 2, 4)
    x, p = _streams(rng)
    base = mcp_forward(p, x, layer).tokens.data
    bumped = x.tokens.data.copy()
    bumped[x.boundary:] += 1.0
    out = mcp_forward(p, TokenSequence(Tensor(bumped), x.boundary), layer).tokens.data
    np.testing.assert_array_equal(out[:x.boundary], base[:x.boundary])


def test_zeroed_mcp_injects_nothing():
    rng = np.random.default_rng(2)
    mcp = Mcp(rng, 16, 2, 4, 16)
    mcp.zero_()
    x, p = _streams(rng)
    out = inject(x, mcp_forward(p, x, mcp.layers[0]))
    np.testing.assert_array_equal(out.tokens.data, x.tokens.data)


def test_mcp_rejects_mismatched_streams():
    rng = np.random.default_rng(3)
    layer = McpLayer(rng, 16, 2, 4)
    x, p = _streams(rng)
    with pytest.raises(DimensionError):
        mcp_forward(PromptState(p.tokens, 3), x, layer)
    with pytest.raises(ConfigError):
        Mcp(rng, 16, 1, 3, 16)
