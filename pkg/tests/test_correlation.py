import numpy as np
import pytest
import torch

from siamtrack.correlation import (
    CorrConfig,
    benchmark,
    count_params,
    dw_xcorr,
    dw_xcorr_reference,
    estimate_flops,
    param_breakdown,
    up_xcorr,
    up_xcorr_reference,
    xcorr,
    xcorr_reference,
)
from siamtrack.errors import ConfigError, ShapeError
from siamtrack.rpn_head import RpnBlock, UpChannelBlock


def randn(gen, *shape):
    return torch.randn(*shape, generator=gen, dtype=torch.float64)


class TestXCorr:
    def test_zero_template_gives_bias(self):
        zf = torch.zeros(3, 2, 2)
        xf = torch.randn(3, 6, 6, generator=torch.Generator().manual_seed(0))
        out = xcorr(zf, xf, bias=1.25)
        assert out.shape == (1, 5, 5)
        assert torch.all(out == 1.25)

    def test_two_channel_example(self):
        zf = torch.tensor([[[1.0]], [[2.0]]])
        xf = torch.tensor([[[1.0, 2.0], [3.0, 4.0]], [[5.0, 6.0], [7.0, 8.0]]])
        out = xcorr(zf, xf, bias=0.0)
        expected = torch.tensor([[[11.0, 14.0], [17.0, 20.0]]])
        assert torch.equal(out, expected)

    def test_delta_template_crops_search(self):
        xf = torch.arange(25, dtype=torch.float32).reshape(1, 5, 5)
        zf = torch.zeros(1, 3, 3)
        zf[0, 0, 0] = 1.0  # delta at the window's top-left corner
        out = xcorr(zf, xf)
        assert torch.equal(out[0], xf[0, :3, :3])

    def test_channel_mismatch(self):
        with pytest.raises(ShapeError):
            xcorr(torch.zeros(2, 2, 2), torch.zeros(3, 5, 5))

    def test_template_larger_than_search(self):
        with pytest.raises(ShapeError):
            xcorr(torch.zeros(2, 6, 6), torch.zeros(2, 5, 5))

    def test_matches_reference(self):
        gen = torch.Generator().manual_seed(3)
        zf, xf = randn(gen, 4, 3, 3), randn(gen, 4, 9, 9)
        fast = xcorr(zf, xf, bias=0.5).numpy()
        ref = xcorr_reference(zf.numpy(), xf.numpy(), bias=0.5)
        np.testing.assert_allclose(fast, ref, rtol=1e-6)


class TestDwXCorr:
    def test_per_channel_example(self):
        zf = torch.tensor([[[1.0]], [[2.0]]])
        xf = torch.tensor([[[1.0, 2.0], [3.0, 4.0]], [[5.0, 6.0], [7.0, 8.0]]])
        out = dw_xcorr(zf, xf)
        expected = torch.tensor([[[1.0, 2.0], [3.0, 4.0]], [[10.0, 12.0], [14.0, 16.0]]])
        assert torch.equal(out, expected)

    def test_channel_sum_equals_xcorr(self):
        gen = torch.Generator().manual_seed(4)
        zf, xf = randn(gen, 5, 3, 3), randn(gen, 5, 8, 8)
        per_channel = dw_xcorr(zf, xf)
        np.testing.assert_allclose(per_channel.sum(dim=0).numpy(), xcorr(zf, xf)[0].numpy(),
                                   rtol=1e-10, atol=1e-12)

    def test_channel_orthogonality_bitwise(self):
        gen = torch.Generator().manual_seed(5)
        zf, xf = randn(gen, 6, 2, 2), randn(gen, 6, 7, 7)
        base = dw_xcorr(zf, xf)
        for c in (0, 3, 5):
            z2, x2 = zf.clone(), xf.clone()
            z2[c] = 0
            x2[c] = 0
            out = dw_xcorr(z2, x2)
            assert torch.all(out[c] == 0)
            others = [i for i in range(6) if i != c]
            assert torch.equal(out[others], base[others])

    def test_linearity_in_each_argument(self):
        gen = torch.Generator().manual_seed(6)
        z1, z2 = randn(gen, 3, 2, 2), randn(gen, 3, 2, 2)
        x1, x2 = randn(gen, 3, 6, 6), randn(gen, 3, 6, 6)
        lhs = dw_xcorr(2.0 * z1 + 3.0 * z2, x1)
        rhs = 2.0 * dw_xcorr(z1, x1) + 3.0 * dw_xcorr(z2, x1)
        np.testing.assert_allclose(lhs.numpy(), rhs.numpy(), rtol=1e-6)
        lhs = dw_xcorr(z1, 0.5 * x1 - 2.0 * x2)
        rhs = 0.5 * dw_xcorr(z1, x1) - 2.0 * dw_xcorr(z1, x2)
        np.testing.assert_allclose(lhs.numpy(), rhs.numpy(), rtol=1e-6)

    def test_translation_covariance_exact(self):
        gen = torch.Generator().manual_seed(7)
        zf = randn(gen, 2, 3, 3)
        xf = randn(gen, 2, 9, 9)
        shifted = xf[:, 1:, 1:]
        out = dw_xcorr(zf, xf)
        out_shifted = dw_xcorr(zf, shifted)
        assert torch.equal(out_shifted, out[:, 1:, 1:])

    def test_matches_reference(self):
        gen = torch.Generator().manual_seed(8)
        zf, xf = randn(gen, 3, 4, 4), randn(gen, 3, 10, 10)
        np.testing.assert_allclose(dw_xcorr(zf, xf).numpy(),
                                   dw_xcorr_reference(zf.numpy(), xf.numpy()), rtol=1e-6)

    def test_batched_matches_single(self):
        gen = torch.Generator().manual_seed(9)
        zf, xf = randn(gen, 4, 2, 3, 3), randn(gen, 4, 2, 7, 7)
        batched = dw_xcorr(zf, xf)
        for b in range(4):
            assert torch.equal(batched[b], dw_xcorr(zf[b], xf[b]))


class TestUpXCorr:
    def test_identity_raise_degenerates_to_xcorr(self):
        gen = torch.Generator().manual_seed(10)
        d = 3
        zf, xf = randn(gen, d, 4, 4), randn(gen, d, 8, 8)
        eye = torch.eye(d, dtype=torch.float64).reshape(d, d, 1, 1)
        out = up_xcorr(zf, xf, eye)
        np.testing.assert_allclose(out.numpy(), xcorr(zf, xf).numpy(), rtol=1e-12)
        assert out.shape[0] == 1

    def test_matches_reference(self):
        gen = torch.Generator().manual_seed(11)
        d, out_ch = 2, 3
        zf, xf = randn(gen, d, 5, 5), randn(gen, d, 9, 9)
        w = randn(gen, out_ch * d, d, 3, 3)
        b = randn(gen, out_ch * d)
        fast = up_xcorr(zf, xf, w, b).numpy()
        ref = up_xcorr_reference(zf.numpy(), xf.numpy(), w.numpy(), b.numpy())
        assert fast.shape == (out_ch, 7, 7)  # raised template 3x3 against 9x9 search
        np.testing.assert_allclose(fast, ref, rtol=1e-6)

    def test_bad_raise_weight(self):
        with pytest.raises(ShapeError):
            up_xcorr(torch.zeros(3, 4, 4), torch.zeros(3, 8, 8), torch.zeros(5, 3, 1, 1))
        with pytest.raises(ShapeError):
            up_xcorr(torch.zeros(3, 4, 4), torch.zeros(3, 8, 8), torch.zeros(6, 2, 1, 1))


class TestParamCounting:
    def test_hand_counted_tiny(self):
        # D=1, k=1, 1x1 kernels everywhere
        dw = CorrConfig(variant="DW_XCORR", channels=1, adjust_kernel=1, fusion_kernel=1)
        pieces = param_breakdown(dw, k=1)
        # adjust convs: 1 weight + 2 norm each; per-task fuse 1+2; outs 2 and 4 (+bias)
        assert pieces["adjust_z.weight"] == 1 and pieces["adjust_z.norm"] == 2
        assert pieces["cls.out.weight"] == 2 and pieces["cls.out.bias"] == 2
        assert pieces["reg.out.weight"] == 4 and pieces["reg.out.bias"] == 4
        assert count_params(dw, 1) == (1 + 2) * 2 + (1 + 2) * 2 + 2 + 2 + 4 + 4

        up = CorrConfig(variant="UP_XCORR", channels=1, out_channels=2, raise_kernel=1)
        pieces = param_breakdown(up, k=1)
        assert pieces["cls.raise.weight"] == 2  # 1*1*1*(2*1*1)
        assert pieces["reg.raise.weight"] == 4
        assert count_params(up, 1) == 2 + 2 + 4 + 4 + 1 + 1 + 1 + 1 + 16 + 4

        assert count_params(CorrConfig(variant="XCORR", channels=8), 5) == 1

    def test_quadratic_channel_scaling(self):
        k = 5
        small = param_breakdown(CorrConfig(variant="DW_XCORR", channels=64), k)
        big = param_breakdown(CorrConfig(variant="DW_XCORR", channels=128), k)
        assert big["adjust_z.weight"] == 4 * small["adjust_z.weight"]
        assert big["adjust_x.weight"] == 4 * small["adjust_x.weight"]

    def test_up_raise_closed_form(self):
        d, out_ch = 32, 10
        cfg = CorrConfig(variant="UP_XCORR", channels=d, out_channels=out_ch)
        pieces = param_breakdown(cfg, k=5)
        assert pieces["cls.raise.weight"] == 3 * 3 * d * (out_ch * d)

    def test_paper_scale_ratio(self):
        d, k = 256, 5
        dw = count_params(CorrConfig(variant="DW_XCORR", channels=d), k)
        up = count_params(CorrConfig(variant="UP_XCORR", channels=d, out_channels=2 * k), k)
        assert dw / up <= 0.1
        assert up / dw >= 10.0

    def test_counts_match_torch_modules(self):
        d, k = 32, 5
        block = RpnBlock(d, k)
        expected = count_params(CorrConfig(variant="DW_XCORR", channels=d), k)
        assert sum(p.numel() for p in block.parameters()) == expected

        up_block = UpChannelBlock(d, k)
        expected = count_params(CorrConfig(variant="UP_XCORR", channels=d, out_channels=2 * k), k)
        assert sum(p.numel() for p in up_block.parameters()) == expected

    def test_config_validation(self):
        with pytest.raises(ConfigError):
            CorrConfig(variant="FFT", channels=8)
        with pytest.raises(ConfigError):
            CorrConfig(variant="UP_XCORR", channels=8)  # missing out_channels
        with pytest.raises(ConfigError):
            CorrConfig(variant="DW_XCORR", channels=0)


class TestBench:
    def test_flops_ordering(self):
        k = 5
        dw = estimate_flops(CorrConfig(variant="DW_XCORR", channels=256), k, 7, 31)
        up = estimate_flops(CorrConfig(variant="UP_XCORR", channels=256, out_channels=2 * k), k, 7, 31)
        assert 0 < dw < up

    def test_benchmark_row(self):
        row = benchmark(CorrConfig(variant="DW_XCORR", channels=16), 5, 5, 17, repeats=3)
        assert set(row) == {"variant", "D", "k", "params", "flops", "wall_time_ms"}
        assert row["wall_time_ms"] > 0
