import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from hear.errors import ConfigError, NumericError
from hear.numerics import grad_check
from hear.transformer import Encoder, EncoderConfig, make_config, relative_index

from helpers import condition_, split_structural_zeros


def test_table_configs():
    a = make_config("acoustic")
    assert (a.hidden, a.intermediate, a.heads, a.layers) == (384, 1536, 4, 6)
    assert make_config("task").layers == 1
    d = make_config("decoder")
    assert (d.layers, d.hidden) == (2, 128)
    assert make_config("tokenizer") == EncoderConfig(128, 512, 4, 6)
    with pytest.raises(ConfigError):
        make_config("vocoder")
    with pytest.raises(ConfigError):
        EncoderConfig(130, 512, 4, 1)


def test_relative_index_examples():
    assert relative_index(5, 5, 64) == 64
    assert relative_index(0, 200, 64) == 128
    assert relative_index(7, 3, 64) == 60
    assert relative_index(200, 0, 64) == 0


def _enc(hidden=8, inter=16, heads=2, layers=1, k=64, width=5, seed=0, dtype=torch.float64):
    torch.manual_seed(seed)
    return Encoder(EncoderConfig(hidden, inter, heads, layers, k, width)).to(dtype)


def test_single_token_is_ffn_of_embedding():
    enc = _enc()
    x = torch.randn(1, 5, dtype=torch.float64)
    layer = enc.layers[0]
    with torch.no_grad():
        h = enc.embed(x)
        # softmax over one key is 1, so attention returns out(v(norm1(h)))
        h = h + layer.attn.out(layer.attn.v(layer.norm1(h)))
        h = h + layer.ff2(torch.nn.functional.gelu(layer.ff1(layer.norm2(h))))
        expected = enc.norm(h)
    torch.testing.assert_close(enc(x), expected, rtol=0, atol=1e-12)


def test_relative_only_logits():
    enc = _enc(k=4)
    x = torch.randn(1, 5, dtype=torch.float64).repeat(20, 1)
    _, trace = enc(x, return_attention=True)
    logits = trace[0][0][0]  # (heads, n, n)
    d = 3
    torch.testing.assert_close(logits[:, 5, 5 + d], logits[:, 11, 11 + d], rtol=0, atol=1e-12)
    torch.testing.assert_close(logits[:, 9, 9 - d], logits[:, 14, 14 - d], rtol=0, atol=1e-12)


def _layer_norm(x, w, b, eps=1e-5):
    mu = x.mean(-1, keepdims=True)
    var = ((x - mu) ** 2).mean(-1, keepdims=True)
    return (x - mu) / np.sqrt(var + eps) * w + b


def test_three_token_hand_computation():
    enc = _enc(hidden=4, inter=6, heads=1, layers=1, k=2, width=3, seed=5)
    with torch.no_grad():
        for p in enc.parameters():
            p.copy_(torch.randn_like(p) * 0.5)
    P = {k: v.detach().numpy() for k, v in enc.state_dict().items()}
    x = np.array([[0.3, -1.2, 0.5], [1.0, 0.0, -0.7], [-0.4, 0.9, 0.2]])

    h = x @ P["embed.weight"].T + P["embed.bias"]
    a = _layer_norm(h, P["layers.0.norm1.weight"], P["layers.0.norm1.bias"])
    q = a @ P["layers.0.attn.q.weight"].T + P["layers.0.attn.q.bias"]
    k = a @ P["layers.0.attn.k_proj.weight"].T + P["layers.0.attn.k_proj.bias"]
    v = a @ P["layers.0.attn.v.weight"].T + P["layers.0.attn.v.bias"]
    table = P["layers.0.attn.rel_bias"][0]
    logits = np.zeros((3, 3))
    for i in range(3):
        for j in range(3):
            logits[i, j] = q[i] @ k[j] / 2.0 + table[max(-2, min(2, j - i)) + 2]
    attn = np.exp(logits - logits.max(1, keepdims=True))
    attn /= attn.sum(1, keepdims=True)
    h = h + (attn @ v) @ P["layers.0.attn.out.weight"].T + P["layers.0.attn.out.bias"]
    f = _layer_norm(h, P["layers.0.norm2.weight"], P["layers.0.norm2.bias"]) @ P["layers.0.ff1.weight"].T + P["layers.0.ff1.bias"]
    f = 0.5 * f * (1 + np.vectorize(math.erf)(f / math.sqrt(2)))
    h = h + f @ P["layers.0.ff2.weight"].T + P["layers.0.ff2.bias"]
    expected = _layer_norm(h, P["norm.weight"], P["norm.bias"])

    np.testing.assert_allclose(enc(torch.from_numpy(x)).detach().numpy(), expected, atol=1e-12)


@settings(max_examples=20, deadline=None)
@given(st.permutations(list(range(7))))
def test_permutation_equivariance_without_table(perm):
    enc = _enc(layers=2)
    with torch.no_grad():
        for layer in enc.layers:
            layer.attn.rel_bias.zero_()
    x = torch.randn(7, 5, dtype=torch.float64, generator=torch.Generator().manual_seed(1))
    p = torch.tensor(perm)
    torch.testing.assert_close(enc(x[p]), enc(x)[p], rtol=0, atol=1e-12)


def test_attention_rows_sum_to_one_and_padding_ignored():
    enc = _enc(layers=2)
    x = torch.randn(2, 6, 5, dtype=torch.float64)
    pad = torch.tensor([[False] * 6, [False] * 4 + [True] * 2])
    out, trace = enc(x, pad, return_attention=True)
    for _, attn in trace:
        torch.testing.assert_close(attn.sum(-1), torch.ones_like(attn.sum(-1)), atol=1e-6, rtol=0)
        assert torch.all(attn[1, :, :, 4:] == 0)
    torch.testing.assert_close(out[1, :4], enc(x[1, :4]), atol=1e-12, rtol=0)


def test_scalar_readout_grad_check():
    enc = _enc(hidden=4, inter=8, heads=2, layers=2, k=2, width=3)
    x = torch.randn(4, 3, dtype=torch.float64)
    condition_(enc)
    w = torch.randn(4, 4, dtype=torch.float64)
    params, _ = split_structural_zeros(enc)
    assert grad_check(lambda: (enc(x) * w).sum(), params) < 1e-4


def test_acoustic_parameter_count():
    d, f, h, k = 384, 1536, 4, 64
    cfg = make_config("acoustic")
    enc = Encoder(cfg)
    per_layer = 4 * d * d + 2 * d * f + (4 * d + f + d) + 2 * 2 * d + h * (2 * k + 1)
    layer_count = sum(p.numel() for p in enc.layers[0].parameters())
    assert layer_count == per_layer
    total = sum(p.numel() for p in enc.parameters())
    assert total == 6 * per_layer + (256 * d + d) + 2 * d
    assert 10.5e6 <= total <= 13.5e6


def test_width_mismatch_and_nonfinite():
    enc = _enc()
    with pytest.raises(ConfigError):
        enc(torch.zeros(3, 4, dtype=torch.float64))
    with torch.no_grad():
        enc.layers[0].ff2.bias.fill_(float("inf"))
    with pytest.raises(NumericError, match="layer 0"):
        enc(torch.zeros(3, 5, dtype=torch.float64))
