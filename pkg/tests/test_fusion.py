import math

import numpy as np
import pytest
import torch

from conftest import seed_all
from scdkit.errors import ConfigError, DataError, ShapeError
from scdkit.fusion import (
    CBAM,
    ChannelAttention,
    FusionBlock,
    abs_difference,
    fft_log_amplitude,
    load_trace,
    save_trace,
)


def naive_unitary_dft2(x: np.ndarray) -> np.ndarray:
    """O(N^4) direct transform, trusted by construction."""
    h, w = x.shape
    out = np.zeros((h, w), dtype=complex)
    for u in range(h):
        for v in range(w):
            acc = 0.0j
            for i in range(h):
                for j in range(w):
                    acc += x[i, j] * np.exp(-2j * np.pi * (u * i / h + v * j / w))
            out[u, v] = acc / math.sqrt(h * w)
    return out


class TestFftLogAmplitude:
    def test_zero_map_stays_zero(self):
        x = torch.zeros(2, 3, 4, 4)
        assert torch.equal(fft_log_amplitude(x), x)

    def test_constant_map_concentrates_in_dc(self):
        x = torch.full((1, 1, 4, 4), 2.0, dtype=torch.float64)
        out = fft_log_amplitude(x)
        assert abs(out[0, 0, 0, 0].item() - math.log(9.0)) < 1e-12
        rest = out.clone()
        rest[0, 0, 0, 0] = 0.0
        assert rest.abs().max() < 1e-9

    def test_matches_naive_dft(self):
        rng = seed_all(60)
        x = rng.standard_normal((5, 6))
        want = np.log1p(np.abs(naive_unitary_dft2(x)))
        got = fft_log_amplitude(torch.tensor(x, dtype=torch.float64).view(1, 1, 5, 6))
        assert np.abs(got[0, 0].numpy() - want).max() < 1e-10

    def test_unitary_energy_preserved(self):
        rng = seed_all(61)
        for _ in range(5):
            x = torch.tensor(rng.standard_normal((1, 2, 8, 8)), dtype=torch.float64)
            mag = torch.expm1(fft_log_amplitude(x))
            rel = abs((mag**2).sum().item() - (x**2).sum().item()) / (x**2).sum().item()
            assert rel < 1e-6

    def test_global_offset_only_moves_dc(self):
        rng = seed_all(62)
        x = torch.tensor(rng.standard_normal((1, 1, 8, 8)), dtype=torch.float64)
        a = fft_log_amplitude(x)
        b = fft_log_amplitude(x + 0.7)
        diff = (a - b).abs()
        assert diff[0, 0, 0, 0] > 1e-3
        diff[0, 0, 0, 0] = 0.0
        assert diff.max() < 1e-9

    def test_rejects_wrong_rank(self):
        with pytest.raises(ShapeError):
            fft_log_amplitude(torch.zeros(4, 4))


class TestAbsDifference:
    def test_values_and_symmetry(self):
        rng = seed_all(63)
        a = torch.tensor(rng.standard_normal((2, 3, 4, 4)))
        b = torch.tensor(rng.standard_normal((2, 3, 4, 4)))
        d = abs_difference(a, b)
        assert torch.equal(d, abs_difference(b, a))
        assert (d >= 0).all()
        assert torch.equal(abs_difference(a, a), torch.zeros_like(a))

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            abs_difference(torch.zeros(1, 2, 4, 4), torch.zeros(1, 2, 4, 5))


class TestCbam:
    def test_zero_input_zero_output(self):
        seed_all(64)
        m = CBAM(16)
        x = torch.zeros(2, 16, 5, 5)
        assert torch.equal(m(x), x)

    def test_saturated_gates_pass_input_through(self):
        seed_all(65)
        m = CBAM(16)
        with torch.no_grad():
            m.channel.mlp[2].weight.zero_()
            m.channel.mlp[2].bias.fill_(30.0)
            m.spatial.conv.weight.zero_()
            m.spatial.conv.bias.fill_(30.0)
        x = torch.randn(2, 16, 6, 6)
        assert (m(x) - x).abs().max() < 1e-9 * x.abs().max()

    def test_never_amplifies(self):
        seed_all(66)
        m = CBAM(16)
        x = torch.randn(3, 16, 7, 7)
        assert (m(x).abs() <= x.abs() + 1e-7).all()

    def test_too_few_channels_is_config_error(self):
        with pytest.raises(ConfigError):
            ChannelAttention(4, reduction=8)
        with pytest.raises(ConfigError):
            CBAM(7, reduction=8)


class TestFusionBlock:
    @pytest.mark.parametrize(
        "fft,diff,width",
        [(True, True, 5), (False, True, 3), (True, False, 4), (False, False, 2)],
    )
    def test_concat_width_per_flags(self, fft, diff, width):
        seed_all(70)
        blk = FusionBlock(16, fft_branch=fft, diff_branch=diff)
        assert blk.width_multiplier == width
        assert blk.compress.weight.shape == (16, width * 16, 1, 1)
        x1, x2 = torch.randn(2, 16, 8, 8), torch.randn(2, 16, 8, 8)
        y = blk(x1, x2)
        assert y.shape == (2, 16, 8, 8)
        assert torch.isfinite(y).all()

    def test_trace_names_and_zero_diff_for_identical_inputs(self):
        seed_all(71)
        blk = FusionBlock(16)
        x = torch.randn(1, 16, 8, 8)
        y, trace = blk.forward_with_trace(x, x.clone())
        assert list(trace) == ["x_t1", "fft_t1", "x_t2", "fft_t2", "diff", "output"]
        assert torch.equal(trace["diff"], torch.zeros_like(x))
        assert torch.equal(trace["output"], y)
        assert torch.equal(trace["fft_t1"], trace["fft_t2"])

    def test_deterministic_forward(self):
        seed_all(72)
        blk = FusionBlock(16)
        x1, x2 = torch.randn(1, 16, 8, 8), torch.randn(1, 16, 8, 8)
        assert torch.equal(blk(x1, x2), blk(x1, x2))

    def test_gradients_reach_both_inputs(self):
        seed_all(73)
        blk = FusionBlock(16)
        x1 = torch.randn(1, 16, 8, 8, requires_grad=True)
        x2 = torch.randn(1, 16, 8, 8, requires_grad=True)
        blk(x1, x2).sum().backward()
        for g in (x1.grad, x2.grad):
            assert g is not None
            assert torch.isfinite(g).all()
            assert g.abs().sum() > 0

    def test_gradcheck(self):
        seed_all(74)
        blk = FusionBlock(8, reduction=8).double()
        x1 = torch.randn(1, 8, 4, 4, dtype=torch.float64, requires_grad=True)
        x2 = torch.randn(1, 8, 4, 4, dtype=torch.float64, requires_grad=True)
        assert torch.autograd.gradcheck(blk, (x1, x2), eps=1e-6, atol=1e-7)

    def test_input_validation(self):
        seed_all(75)
        blk = FusionBlock(16)
        with pytest.raises(ShapeError):
            blk(torch.zeros(1, 16, 4, 4), torch.zeros(1, 16, 4, 5))
        with pytest.raises(ShapeError):
            blk(torch.zeros(1, 8, 4, 4), torch.zeros(1, 8, 4, 4))


class TestTraceIO:
    def test_round_trip_and_deterministic_bytes(self, tmp_path):
        seed_all(76)
        blk = FusionBlock(16)
        x1, x2 = torch.randn(1, 16, 8, 8), torch.randn(1, 16, 8, 8)
        _, trace = blk.forward_with_trace(x1, x2)
        d1, d2 = tmp_path / "a", tmp_path / "b"
        save_trace(trace, d1)
        save_trace(trace, d2)
        loaded = load_trace(d1)
        assert set(loaded) == set(trace)
        for name, arr in loaded.items():
            assert np.array_equal(arr, trace[name].numpy())
        for f in sorted(p.name for p in d1.iterdir()):
            assert (d1 / f).read_bytes() == (d2 / f).read_bytes()

    def test_missing_manifest(self, tmp_path):
        with pytest.raises(DataError):
            load_trace(tmp_path)
