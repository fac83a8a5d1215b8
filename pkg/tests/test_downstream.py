import logging
import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from hear.downstream import (
    PRESETS,
    ClipFeatures,
    FeatureGate,
    FineTuneMode,
    HEARClassifier,
    classification_loss,
    crossfade_merge,
    fade_in_weights,
    forward_full,
    gate_fuse,
    get_preset,
    pool_stats,
    train_classifier,
)
from hear.errors import ConfigError, DataError, NumericError
from hear.frontend import ChunkLayout, FrontendConfig, Waveform, layout_chunks
from hear.numerics import grad_check
from hear.transformer import EncoderConfig

from helpers import condition_, split_structural_zeros

F64 = torch.float64

# a frontend whose layout arithmetic gives 2 tokens/s: 12-token chunks with a 2-token overlap
TOY_FE = FrontendConfig(win_ms=250, hop_ms=250, n_fft=8, n_mels=2)


def toy_model(mode="base", classes=2, dtype=F64, seed=0):
    torch.manual_seed(seed)
    return HEARClassifier(
        classes, mode, TOY_FE,
        acoustic_cfg=EncoderConfig(4, 8, 2, 1, 4, TOY_FE.patch_width),
        task_cfg=EncoderConfig(4, 8, 2, 1, 4, 4),
        gate_dim=2, head_hidden=4,
    ).to(dtype)


def toy_clip(n, seed=0, dtype=F64):
    g = torch.Generator().manual_seed(seed)
    return ClipFeatures(torch.randn(n, TOY_FE.patch_width, generator=g, dtype=dtype),
                        torch.randn(n, TOY_FE.n_bins, generator=g, dtype=dtype))


# -- cross-fade ------------------------------------------------------------


def test_toy_layout_has_two_chunks():
    assert TOY_FE.token_rate == 2.0
    assert layout_chunks(20, "inference", TOY_FE).bounds == [(0, 12), (10, 20)]


def test_weights_midpoint_and_partition_of_unity():
    for L in (1, 2, 10, 11, 50):
        w = fade_in_weights(L)
        assert torch.all((w + w.flip(0) - 1).abs() < 1e-9)
        assert torch.all((w > 0) & (w < 1))
    assert fade_in_weights(11)[5].item() == 0.5


def test_constant_overlap_passthrough_bit_exact():
    lay = layout_chunks(500, "inference")
    v = torch.randn(1, 7)
    a = torch.randn(300, 7)
    b = torch.randn(250, 7)
    a[250:] = v
    b[:50] = v
    merged = crossfade_merge([a, b], lay)
    assert torch.equal(merged[250:300], v.expand(50, 7))
    assert torch.equal(merged[:250], a[:250]) and torch.equal(merged[300:], b[50:])


def test_identical_overlap_continuity():
    lay = layout_chunks(700, "inference")
    full = torch.randn(700, 5)
    chunks = [full[s:e].clone() for s, e in lay.bounds]
    assert torch.equal(crossfade_merge(chunks, lay), full)


def test_ramp_matches_closed_form():
    lay = ChunkLayout([(0, 15), (5, 20)], 20, 15, 10, 1.0)
    merged = crossfade_merge([torch.zeros(15, 1, dtype=F64), torch.ones(15, 1, dtype=F64)], lay)
    ramp = [(1 - math.cos(math.pi * (t + 0.5) / 10)) / 2 for t in range(10)]
    np.testing.assert_allclose(merged[5:15, 0].numpy(), ramp, atol=1e-15)


def test_merge_mismatch_errors():
    lay = layout_chunks(500, "inference")
    with pytest.raises(ConfigError):
        crossfade_merge([torch.zeros(300, 2)], lay)
    with pytest.raises(ConfigError):
        crossfade_merge([torch.zeros(300, 2), torch.zeros(249, 2)], lay)


# -- gating ----------------------------------------------------------------


def test_zero_gate_halves_projection():
    h, S = torch.randn(6, 384, dtype=F64), torch.randn(6, 257, dtype=F64)
    W_s, b_s = torch.randn(128, 257, dtype=F64), torch.randn(128, dtype=F64)
    c, g = gate_fuse(h, S, W_s, b_s, torch.zeros(128, 384, dtype=F64), torch.zeros(128, dtype=F64))
    assert torch.all(g == 0.5)
    assert (c[:, 384:] - 0.5 * (S @ W_s.T + b_s)).abs().max() < 1e-12
    assert torch.equal(c[:, :384], h)


def test_saturated_gate_passes_through():
    h, S = torch.randn(3, 4, dtype=F64), torch.randn(3, 5, dtype=F64)
    W_s, b_s = torch.randn(2, 5, dtype=F64), torch.randn(2, dtype=F64)
    c, _ = gate_fuse(h, S, W_s, b_s, torch.zeros(2, 4, dtype=F64), torch.full((2,), 1e6, dtype=F64))
    torch.testing.assert_close(c[:, 4:], S @ W_s.T + b_s)


def test_gate_hand_arithmetic():
    h = torch.tensor([[1.0, -2.0]], dtype=F64)
    S = torch.tensor([[0.5, 1.0, -1.0]], dtype=F64)
    W_s = torch.tensor([[1.0, 0.0, 2.0], [0.0, -1.0, 1.0]], dtype=F64)
    b_s = torch.tensor([0.1, 0.2], dtype=F64)
    W_g = torch.tensor([[0.5, 0.0], [1.0, 1.0]], dtype=F64)
    b_g = torch.tensor([0.0, -1.0], dtype=F64)
    v = [0.5 * 1 + 1.0 * 0 + (-1.0) * 2 + 0.1, 0.5 * 0 + 1.0 * -1 + (-1.0) * 1 + 0.2]
    sig = lambda z: 1 / (1 + math.exp(-z))
    g = [sig(0.5 * 1.0 + 0.0 * -2.0 + 0.0), sig(1.0 * 1.0 + 1.0 * -2.0 - 1.0)]
    c, _ = gate_fuse(h, S, W_s, b_s, W_g, b_g)
    np.testing.assert_allclose(c[0].numpy(), [1.0, -2.0, g[0] * v[0], g[1] * v[1]], atol=1e-15)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31), st.floats(0.01, 3.0))
def test_gate_strictly_inside_unit_interval(seed, scale):
    gen = torch.Generator().manual_seed(seed)
    gate = FeatureGate(9, 6, 4).double()
    with torch.no_grad():
        gate.gate.weight.copy_(torch.randn(4, 6, generator=gen, dtype=F64) * scale)
    _, g = gate(torch.randn(5, 6, generator=gen, dtype=F64) * 3, torch.randn(5, 9, generator=gen, dtype=F64), return_gate=True)
    assert torch.all((g > 0) & (g < 1))


def test_gate_rejects_nonfinite():
    with pytest.raises(NumericError):
        FeatureGate(3, 2, 2)(torch.tensor([[float("inf"), 0.0]]), torch.zeros(1, 3))


# -- pooling ---------------------------------------------------------------


def test_pool_single_step():
    x = torch.randn(1, 5, dtype=F64)
    out = pool_stats(x)
    assert torch.equal(out[:5], x[0]) and torch.equal(out[10:], x[0]) and torch.all(out[5:10] == 0)


def test_pool_hand_3x2():
    x = torch.tensor([[1.0, 4.0], [2.0, -2.0], [6.0, 1.0]], dtype=F64)
    mean = [3.0, 1.0]
    std = [math.sqrt(((1 - 3) ** 2 + (2 - 3) ** 2 + (6 - 3) ** 2) / 3), math.sqrt((9 + 9 + 0) / 3)]
    out = pool_stats(x).tolist()
    assert out[:2] == mean and out[4:] == [6.0, 4.0]
    assert out[2:4] == pytest.approx(std, abs=1e-8)


@given(st.permutations(list(range(6))))
def test_pool_permutation_invariant(perm):
    x = torch.randn(6, 3, dtype=F64, generator=torch.Generator().manual_seed(0))
    a, b = pool_stats(x), pool_stats(x[list(perm)])
    torch.testing.assert_close(a, b, atol=1e-15, rtol=0)
    assert torch.all(a[3:6] >= 0)


def test_pool_std_zero_iff_constant():
    x = torch.randn(4, 3, dtype=F64)
    x[:, 1] = 2.5
    std = pool_stats(x)[3:6]
    assert std[1] == 0 and std[0] > 0 and std[2] > 0


def test_pool_respects_valid_mask():
    x = torch.randn(2, 5, 3, dtype=F64)
    valid = torch.tensor([[True] * 5, [True] * 3 + [False] * 2])
    out = pool_stats(x, valid)
    torch.testing.assert_close(out[1], pool_stats(x[1, :3]), atol=1e-15, rtol=0)


# -- full model --------------------------------------------------------------


def test_presets():
    assert get_preset("ESC-50") == PRESETS["ESC-50"]
    p = get_preset("ESC-50")
    assert (p.lr, p.batch_size, p.epochs) == (2e-4, 16, 80)
    assert (get_preset("GSCv2").batch_size, get_preset("VoxCeleb").lr) == (64, 1e-4)
    with pytest.raises(ConfigError):
        get_preset("AudioSet")


def test_six_seconds_single_chunk_identity():
    m = toy_model()
    clip = toy_clip(12)
    (chunks, layout), = m.encode_chunks([clip.patches])
    assert layout.bounds == [(0, 12)]
    torch.testing.assert_close(crossfade_merge(chunks, layout), m.acoustic(clip.patches), atol=1e-12, rtol=0)


def test_chunks_never_attend_across_boundaries():
    m = toy_model()
    clip = toy_clip(20)
    (chunks, layout), = m.encode_chunks([clip.patches])
    for f, (s, e) in zip(chunks, layout.bounds):
        torch.testing.assert_close(f, m.acoustic(clip.patches[s:e]), atol=1e-12, rtol=0)


def test_ten_seconds_two_chunks(caplog):
    model = HEARClassifier(3)
    w = Waveform(np.random.default_rng(0).normal(size=160000) * 0.1)
    with caplog.at_level(logging.INFO, logger="hear.downstream"):
        probs = forward_full(model, w)
    assert "10.00 s of audio in 2 chunk(s)" in caplog.text
    assert probs.shape == (3,) and abs(probs.sum().item() - 1) < 1e-5
    lay = layout_chunks(500, "inference")
    assert lay.seconds() == [(0, 6), (5, 10)] and lay.overlap_tokens == 50


def test_transfer_mode_freezes_acoustic():
    m = toy_model("transfer")
    loss = classification_loss(m([toy_clip(20), toy_clip(15, 1)]), torch.tensor([0, 1]))
    loss.backward()
    assert sum(0.0 if p.grad is None else p.grad.abs().sum().item() for p in m.acoustic.parameters()) == 0.0
    assert all(not n.startswith("acoustic.") for n, _ in m.trainable_parameters())
    assert m.head.fc2.weight.grad.abs().sum() > 0


def test_no_spectrum_ignores_spectrum():
    m = toy_model("no_spectrum")
    assert m.gate is None and m.task.cfg.input_width == 4
    clips = [toy_clip(20), toy_clip(9, 1)]
    other = [torch.randn_like(c.spectrum) * 100 for c in clips]
    assert torch.equal(m(clips), m(clips, spectrum_override=other))
    base = toy_model("base")
    assert not torch.equal(base(clips), base(clips, spectrum_override=other))


def test_scratch_ignores_pretrained_weights():
    m = toy_model("scratch")
    before = {k: v.clone() for k, v in m.acoustic.state_dict().items()}
    m.load_acoustic({k: torch.zeros_like(v) for k, v in before.items()})
    assert all(torch.equal(before[k], v) for k, v in m.acoustic.state_dict().items())


def test_label_out_of_range():
    with pytest.raises(DataError):
        classification_loss(torch.zeros(2, 3), torch.tensor([0, 3]))


def test_end_to_end_grad_check():
    m = toy_model()
    condition_(m)
    clips = [toy_clip(20, 0), toy_clip(14, 1)]
    labels = torch.tensor([0, 1])
    params, _ = split_structural_zeros(m)
    assert grad_check(lambda: classification_loss(m(clips), labels), params) < 1e-4


def test_train_classifier_learns_toy():
    torch.manual_seed(0)
    m = toy_model(dtype=torch.float32)
    clips = [toy_clip(8 + i % 5, i, torch.float32) for i in range(8)]
    labels = [i % 2 for i in range(8)]
    for c, y in zip(clips, labels):
        c.patches += 2.0 * y
    hist = train_classifier(m, clips, labels, epochs=30, batch_size=4, lr=3e-3, generator=torch.Generator().manual_seed(0))
    assert [r["epoch"] for r in hist] == list(range(1, 31))
    assert hist[-1]["accuracy"] == 1.0 and hist[-1]["loss"] < hist[0]["loss"]
