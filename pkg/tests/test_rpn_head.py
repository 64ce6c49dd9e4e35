import numpy as np
import pytest
import torch

from siamtrack.errors import ShapeError, UsageError
from siamtrack.geometry import AnchorConfig, make_anchors
from siamtrack.rpn_head import (
    FusionWeights,
    ResponsePair,
    RpnBlock,
    UpChannelBlock,
    fuse,
    positive_scores,
    select_best,
)


def pair(gen, k=1, size=3, level=None):
    cls = torch.randn(2 * k, size, size, generator=gen, dtype=torch.float64)
    reg = torch.randn(4 * k, size, size, generator=gen, dtype=torch.float64)
    return ResponsePair(cls=cls, reg=reg, level=level)


class TestResponsePair:
    def test_channel_contract(self):
        with pytest.raises(ShapeError):
            ResponsePair(cls=torch.zeros(3, 5, 5), reg=torch.zeros(6, 5, 5))
        with pytest.raises(ShapeError):
            ResponsePair(cls=torch.zeros(2, 5, 5), reg=torch.zeros(2, 5, 5))
        with pytest.raises(ShapeError):
            ResponsePair(cls=torch.zeros(2, 5, 5), reg=torch.zeros(4, 4, 5))

    def test_num_anchors(self):
        p = ResponsePair(cls=torch.zeros(10, 5, 5), reg=torch.zeros(20, 5, 5))
        assert p.num_anchors == 5 and p.spatial == (5, 5)


class TestFusionWeights:
    def test_rejects_nonpositive(self):
        with pytest.raises(UsageError):
            FusionWeights(alpha=(1.0, 0.0, 1.0), beta=(1.0, 1.0, 1.0))
        with pytest.raises(UsageError):
            FusionWeights(alpha=(1.0, 1.0, 1.0), beta=(1.0, -2.0, 1.0))

    def test_normalized_sums_to_one(self):
        w = FusionWeights(alpha=(1.0, 2.0, 3.0), beta=(5.0, 5.0, 5.0))
        a, b = w.normalized()
        assert a.sum() == pytest.approx(1.0, abs=1e-12)
        np.testing.assert_allclose(b, [1 / 3] * 3, atol=1e-12)
        assert (a > 0).all() and (b > 0).all()

    def test_scale_invariance(self):
        w1 = FusionWeights(alpha=(0.2, 0.5, 0.3), beta=(1.0, 4.0, 2.0))
        for c in (0.1, 7.0, 1e6):
            w2 = FusionWeights(alpha=tuple(c * a for a in w1.alpha),
                               beta=tuple(c * b for b in w1.beta))
            a1, b1 = w1.normalized()
            a2, b2 = w2.normalized()
            np.testing.assert_allclose(a1, a2, atol=1e-7)
            np.testing.assert_allclose(b1, b2, atol=1e-7)


class TestFuse:
    def test_one_hot_is_bitwise(self):
        gen = torch.Generator().manual_seed(0)
        levels = [pair(gen, level=l) for l in (3, 4, 5)]
        fused = fuse(levels, ((1.0, 0.0, 0.0), (1.0, 0.0, 0.0)))
        assert torch.equal(fused.cls, levels[0].cls)
        assert torch.equal(fused.reg, levels[0].reg)

    def test_convexity_fixed_point(self):
        gen = torch.Generator().manual_seed(1)
        base = pair(gen)
        levels = [ResponsePair(cls=base.cls.clone(), reg=base.reg.clone()) for _ in range(3)]
        w = (1 / 3, 1 / 3, 1 / 3)
        fused = fuse(levels, (w, w))
        np.testing.assert_allclose(fused.cls.numpy(), base.cls.numpy(), rtol=1e-12)
        np.testing.assert_allclose(fused.reg.numpy(), base.reg.numpy(), rtol=1e-12)

    def test_constant_maps_weighted_sum(self):
        levels = [
            ResponsePair(cls=torch.full((2, 3, 3), float(v)), reg=torch.full((4, 3, 3), float(v)))
            for v in (1, 2, 3)
        ]
        fused = fuse(levels, ((0.2, 0.5, 0.3), (0.3, 0.3, 0.4)))
        np.testing.assert_allclose(fused.cls.numpy(), 0.2 * 1 + 0.5 * 2 + 0.3 * 3, rtol=1e-7)
        np.testing.assert_allclose(fused.reg.numpy(), 0.3 * 1 + 0.3 * 2 + 0.4 * 3, rtol=1e-7)

    def test_affine_per_level(self):
        gen = torch.Generator().manual_seed(2)
        levels = [pair(gen) for _ in range(3)]
        w = ((0.5, 0.25, 0.25), (0.6, 0.2, 0.2))
        f1 = fuse(levels, w)
        bumped = [ResponsePair(cls=levels[0].cls + 2.0, reg=levels[0].reg)] + levels[1:]
        f2 = fuse(bumped, w)
        np.testing.assert_allclose((f2.cls - f1.cls).numpy(), 0.5 * 2.0, atol=1e-12)

    def test_raw_weight_scale_invariance_through_fuse(self):
        gen = torch.Generator().manual_seed(3)
        levels = [pair(gen) for _ in range(3)]
        w = FusionWeights(alpha=(1.0, 2.0, 2.0), beta=(3.0, 1.0, 1.0))
        ws = FusionWeights(alpha=(10.0, 20.0, 20.0), beta=(30.0, 10.0, 10.0))
        f1, f2 = fuse(levels, w), fuse(levels, ws)
        np.testing.assert_allclose(f1.cls.numpy(), f2.cls.numpy(), atol=1e-7)
        np.testing.assert_allclose(f1.reg.numpy(), f2.reg.numpy(), atol=1e-7)

    def test_shape_mismatch(self):
        gen = torch.Generator().manual_seed(4)
        with pytest.raises(ShapeError):
            fuse([pair(gen, size=3), pair(gen, size=3), pair(gen, size=5)],
                 ((1 / 3,) * 3, (1 / 3,) * 3))


class TestBlocks:
    def test_rpn_block_shapes(self):
        gen = torch.Generator().manual_seed(5)
        block = RpnBlock(channels=8, k=5)
        zf = torch.randn(1, 8, 5, 5, generator=gen)
        xf = torch.randn(1, 8, 17, 17, generator=gen)
        out = block(zf, xf, level=4)
        assert out.cls.shape == (1, 10, 13, 13)
        assert out.reg.shape == (1, 20, 13, 13)
        assert out.level == 4

    def test_rpn_block_paper_scale_arithmetic(self):
        gen = torch.Generator().manual_seed(6)
        block = RpnBlock(channels=4, k=5)
        zf = torch.randn(1, 4, 7, 7, generator=gen)
        xf = torch.randn(1, 4, 31, 31, generator=gen)
        out = block(zf, xf)
        assert out.spatial == (25, 25)

    def test_rpn_block_deterministic(self):
        gen = torch.Generator().manual_seed(7)
        block = RpnBlock(channels=4, k=2)
        block.eval()
        zf = torch.randn(1, 4, 5, 5, generator=gen)
        xf = torch.randn(1, 4, 11, 11, generator=gen)
        a = block(zf, xf)
        b = block(zf, xf)
        assert torch.equal(a.cls, b.cls) and torch.equal(a.reg, b.reg)

    def test_up_block_shapes(self):
        gen = torch.Generator().manual_seed(8)
        block = UpChannelBlock(channels=4, k=3)
        zf = torch.randn(1, 4, 7, 7, generator=gen)
        xf = torch.randn(1, 4, 31, 31, generator=gen)
        out = block(zf, xf)
        assert out.cls.shape == (1, 6, 25, 25)
        assert out.reg.shape == (1, 12, 25, 25)


class TestSelectBest:
    def anchors(self, h=5, w=5, k=2):
        return make_anchors(AnchorConfig(ratios=(0.5, 1.0), scale=8.0, stride=4), (h, w), 0.0)

    def test_single_candidate(self):
        anchors = make_anchors(AnchorConfig(ratios=(1.0,), scale=8.0, stride=4), (1, 1), (3.0, 3.0))
        fused = ResponsePair(cls=torch.zeros(2, 1, 1), reg=torch.zeros(4, 1, 1))
        (i, j, a), score, box = select_best(fused, anchors)
        assert (i, j, a) == (0, 0, 0)
        assert score == pytest.approx(0.5)
        assert (box.cx, box.cy, box.w, box.h) == (3.0, 3.0, 8.0, 8.0)

    def test_tie_break_lowest_flat_index(self):
        anchors = self.anchors()
        fused = ResponsePair(cls=torch.zeros(4, 5, 5), reg=torch.zeros(8, 5, 5))
        (i, j, a), _, _ = select_best(fused, anchors)  # all tied
        assert (i, j, a) == (0, 0, 0)
        # raise anchor 1 everywhere: first (0,0,1) wins over later cells
        cls = torch.zeros(4, 5, 5)
        cls[3] = 5.0  # positive logit of anchor 1
        (i, j, a), _, _ = select_best(ResponsePair(cls=cls, reg=torch.zeros(8, 5, 5)), anchors)
        assert (i, j, a) == (0, 0, 1)

    def test_constructed_maximum(self):
        h, w, k = 8, 9, 2
        anchors = make_anchors(AnchorConfig(ratios=(0.5, 1.0), scale=8.0, stride=4), (h, w), 0.0)
        cls = torch.zeros(2 * k, h, w)
        cls[2 * 1 + 1, 3, 7] = 9.0  # positive logit, anchor 1 at (3, 7)
        reg = torch.zeros(4 * k, h, w)
        reg[4 * 1 + 0, 3, 7] = 0.5  # dx
        fused = ResponsePair(cls=cls, reg=reg)
        (i, j, a), score, box = select_best(fused, anchors)
        assert (i, j, a) == (3, 7, 1)
        assert score > 0.99
        anchor_box = anchors.box_at(3, 7, 1)
        assert box.cx == pytest.approx(anchor_box.cx + 0.5 * anchor_box.w)

    def test_softmax_shift_invariance(self):
        gen = torch.Generator().manual_seed(9)
        cls = torch.randn(4, 5, 5, generator=gen)
        p1 = positive_scores(ResponsePair(cls=cls, reg=torch.zeros(8, 5, 5)))
        p2 = positive_scores(ResponsePair(cls=cls + 3.0, reg=torch.zeros(8, 5, 5)))
        np.testing.assert_allclose(p1, p2, atol=1e-6)

    def test_anchor_grid_mismatch(self):
        fused = ResponsePair(cls=torch.zeros(2, 4, 4), reg=torch.zeros(4, 4, 4))
        with pytest.raises(ShapeError):
            select_best(fused, self.anchors(5, 5, 2))
