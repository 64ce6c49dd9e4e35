import math

import numpy as np
import pytest
import torch

from siamtrack.errors import ConfigError, DivergenceError, UsageError
from siamtrack.geometry import AnchorConfig, BBox, make_anchors
from siamtrack.model import ModelConfig, build_model
from siamtrack.rpn_head import ResponsePair
from siamtrack.sampling import PairSampler, SynthSpec, assign_labels
from siamtrack.training import (
    GradCheckResult,
    TrainConfig,
    grad_check,
    lr_schedule,
    smooth_l1,
    standard_grad_checks,
    total_loss,
    train,
)

TINY_SPEC = SynthSpec(canvas=96, object_min=18, object_max=30, distractors=0, noise=0.04)


def tiny_train_cfg(**kw):
    base = dict(epochs=2, warmup_epochs=1, freeze_backbone_epochs=1,
                steps_per_epoch=3, batch_size=2, seed=5)
    base.update(kw)
    return TrainConfig(**base)


def tiny_sampler(seed=5):
    return PairSampler(TINY_SPEC, shift_range=16.0, scale_jitter=0.05, seed=seed)


class TestSmoothL1:
    @pytest.mark.parametrize("x,expected", [(0.0, 0.0), (0.5, 0.125), (2.0, 1.5), (-2.0, 1.5), (-0.5, 0.125)])
    def test_scalar_values(self, x, expected):
        assert smooth_l1(x) == pytest.approx(expected, abs=1e-12)

    def test_elementwise_numpy_and_torch_agree(self, rng):
        x = rng.normal(0, 2, (4, 5))
        np.testing.assert_allclose(smooth_l1(x), smooth_l1(torch.from_numpy(x)).numpy(), atol=1e-12)

    def test_shape_preserved(self):
        assert smooth_l1(torch.zeros(3, 4, 5)).shape == (3, 4, 5)


class TestTotalLoss:
    @pytest.fixture
    def setup(self):
        anchors = make_anchors(AnchorConfig(ratios=(0.5, 1.0), scale=8.0, stride=2), (5, 5), 0.0)
        gt = BBox(4.0, 4.0, 8.0, 8.0)
        labels = assign_labels(anchors, gt, pos_thr=0.55, neg_thr=0.3, rng=np.random.default_rng(0))
        return anchors, gt, labels

    def test_perfect_prediction_is_near_zero(self, setup):
        anchors, gt, labels = setup
        k = anchors.k
        cls = torch.zeros(2 * k, 5, 5, dtype=torch.float64)
        reg = torch.zeros(4 * k, 5, 5, dtype=torch.float64)
        for a in range(k):
            pos = torch.from_numpy((labels.classes[..., a] == 1).astype(np.float64))
            cls[2 * a + 1] = 100.0 * pos  # big margin toward the true class
            cls[2 * a + 0] = 100.0 * (1 - pos)
            for c in range(4):
                reg[4 * a + c] = torch.from_numpy(labels.deltas[..., a, c])
        lb = total_loss(ResponsePair(cls=cls, reg=reg), labels)
        assert float(lb.total) < 1e-6

    def test_uniform_logits_give_ln2(self, setup):
        _, _, labels = setup
        k = labels.classes.shape[-1]
        lb = total_loss(ResponsePair(cls=torch.zeros(2 * k, 5, 5), reg=torch.zeros(4 * k, 5, 5)), labels)
        assert float(lb.cls_loss) == pytest.approx(math.log(2.0), rel=1e-6)

    def test_reg_weight_scales_linearly(self, setup):
        _, _, labels = setup
        k = labels.classes.shape[-1]
        gen = torch.Generator().manual_seed(0)
        pair = ResponsePair(cls=torch.randn(2 * k, 5, 5, generator=gen, dtype=torch.float64),
                            reg=torch.randn(4 * k, 5, 5, generator=gen, dtype=torch.float64))
        l1 = total_loss(pair, labels, reg_weight=1.0)
        l2 = total_loss(pair, labels, reg_weight=2.0)
        assert float(l2.reg_loss) == pytest.approx(float(l1.reg_loss), rel=1e-12)
        reg_part1 = float(l1.total) - float(l1.cls_loss)
        reg_part2 = float(l2.total) - float(l2.cls_loss)
        assert reg_part2 == pytest.approx(2 * reg_part1, rel=1e-9)
        assert float(l1.total) == pytest.approx(float(l1.cls_loss) + float(l1.reg_loss), rel=1e-9)

    def test_empty_mask_is_zero_with_flag(self, setup):
        _, _, labels = setup
        labels.mask[:] = False
        k = labels.classes.shape[-1]
        lb = total_loss(ResponsePair(cls=torch.ones(2 * k, 5, 5), reg=torch.ones(4 * k, 5, 5)), labels)
        assert lb.empty
        assert float(lb.total) == 0.0

    def test_shape_mismatch(self, setup):
        _, _, labels = setup
        with pytest.raises(UsageError):
            total_loss(ResponsePair(cls=torch.zeros(2, 4, 4), reg=torch.zeros(4, 4, 4)), labels)


class TestSchedule:
    def test_paper_values_exact(self):
        cfg = TrainConfig()  # 20 epochs, 5 warmup, 1e-3 / 5e-3 / 5e-4
        for epoch in range(1, 6):
            assert lr_schedule(epoch, cfg) == 1e-3
        assert lr_schedule(6, cfg) == 5e-3
        assert lr_schedule(20, cfg) == pytest.approx(5e-4, rel=1e-12)
        assert lr_schedule(13, cfg) == pytest.approx(5e-3 * 10 ** (-(13 - 6) / 14), rel=1e-12)

    def test_monotone_after_warmup(self):
        cfg = TrainConfig()
        rates = [lr_schedule(e, cfg) for e in range(6, 21)]
        assert all(a >= b for a, b in zip(rates, rates[1:]))

    def test_epoch_range_enforced(self):
        cfg = TrainConfig()
        with pytest.raises(UsageError):
            lr_schedule(0, cfg)
        with pytest.raises(UsageError):
            lr_schedule(21, cfg)

    def test_config_asserts_warmup_below_peak(self):
        with pytest.raises(ConfigError):
            TrainConfig(warmup_lr=0.01, peak_lr=0.005)
        with pytest.raises(ConfigError):
            TrainConfig(final_lr=0.01, peak_lr=0.005)
        with pytest.raises(ConfigError):
            TrainConfig(backbone_lr_scale=0.0)


class TestOptimizerContracts:
    def test_plain_sgd_step_is_gradient_descent(self):
        p = torch.nn.Parameter(torch.tensor([1.0, -2.0, 3.0], dtype=torch.float64))
        opt = torch.optim.SGD([p], lr=0.1, momentum=0.0, weight_decay=0.0)
        loss = (p * torch.tensor([2.0, 1.0, -1.0], dtype=torch.float64)).sum()
        loss.backward()
        expected = p.detach() - 0.1 * p.grad.detach()
        opt.step()
        np.testing.assert_allclose(p.detach().numpy(), expected.numpy(), rtol=1e-9)

    def test_weight_decay_contracts_parameters(self):
        p = torch.nn.Parameter(torch.tensor([4.0, -8.0], dtype=torch.float64))
        opt = torch.optim.SGD([p], lr=0.5, momentum=0.0, weight_decay=0.01)
        p.grad = torch.zeros_like(p)  # zero data gradient
        before = p.detach().clone()
        opt.step()
        np.testing.assert_allclose(p.detach().numpy(), (before * (1 - 0.5 * 0.01)).numpy(), rtol=1e-12)

    def test_zero_lr_is_a_null_step(self):
        model = build_model(ModelConfig.desk(levels=(4,)), seed=0)
        before = {n: p.detach().clone() for n, p in model.named_parameters()}
        opt = torch.optim.SGD(model.parameters(), lr=0.0, momentum=0.9, weight_decay=5e-4)
        gen = torch.Generator().manual_seed(0)
        fused, _ = model(torch.randn(1, 1, 63, 63, generator=gen),
                         torch.randn(1, 1, 127, 127, generator=gen))
        (fused.cls.sum() + fused.reg.sum()).backward()
        opt.step()
        for n, p in model.named_parameters():
            assert torch.equal(p.detach(), before[n]), n


class TestTrainLoop:
    def test_freeze_contract(self):
        model = build_model(ModelConfig.desk(levels=(4,)), seed=1)
        backbone_before = {n: p.detach().clone() for n, p in model.backbone.named_parameters()}
        adapter_before = {n: p.detach().clone() for n, p in model.adapters.named_parameters()}
        cfg = tiny_train_cfg(epochs=1, warmup_epochs=0, freeze_backbone_epochs=1)
        train(model, tiny_sampler(), cfg)
        for n, p in model.backbone.named_parameters():
            assert torch.equal(p.detach(), backbone_before[n]), n
        assert any(not torch.equal(p.detach(), adapter_before[n])
                   for n, p in model.adapters.named_parameters())

    def test_gradients_reach_all_levels_and_fusion(self):
        model = build_model(ModelConfig.desk(), seed=2)
        model.train()
        sampler = tiny_sampler()
        anchors = model.anchors_for(sampler.search_size)
        samples = [sampler.sample() for _ in range(2)]
        labels = [assign_labels(anchors, s.gt, rng=np.random.default_rng(0)) for s in samples]
        fused, _ = model(model.to_input_batch([s.z for s in samples]),
                         model.to_input_batch([s.x for s in samples]))
        lb = total_loss(fused, labels)
        lb.total.backward()
        for level, head in model.heads.items():
            norms = [p.grad.norm() for p in head.parameters() if p.grad is not None]
            assert norms and all(float(n) > 0 for n in norms), f"level {level}"
        assert float(model.log_alpha.grad.norm()) > 0
        assert float(model.log_beta.grad.norm()) > 0

    def test_fixed_seed_bit_reproducible(self):
        losses = []
        for _ in range(2):
            model = build_model(ModelConfig.desk(levels=(4,)), seed=3)
            result = train(model, tiny_sampler(seed=9), tiny_train_cfg())
            losses.append([row[4] for row in result.rows])
        assert losses[0] == losses[1]

    def test_short_run_reduces_loss(self):
        model = build_model(ModelConfig.desk(levels=(4,)), seed=4)
        cfg = tiny_train_cfg(epochs=5, warmup_epochs=1, freeze_backbone_epochs=1,
                             steps_per_epoch=10, batch_size=4)
        result = train(model, tiny_sampler(), cfg)
        assert result.final_loss < result.initial_loss

    def test_metrics_csv(self, tmp_path):
        model = build_model(ModelConfig.desk(levels=(4,)), seed=5)
        path = tmp_path / "metrics.csv"
        result = train(model, tiny_sampler(), tiny_train_cfg(), metrics_path=path)
        lines = path.read_text().splitlines()
        assert lines[0] == "epoch,step,cls_loss,reg_loss,total,lr"
        assert len(lines) == 1 + len(result.rows)

    def test_divergence_aborts_with_dump(self, tmp_path):
        model = build_model(ModelConfig.desk(levels=(4,)), seed=6)
        with torch.no_grad():
            list(model.adapters.parameters())[0][0] = float("nan")
        dump = tmp_path / "diverged.json"
        with pytest.raises(DivergenceError):
            train(model, tiny_sampler(), tiny_train_cfg(), diagnostics_path=dump)
        assert dump.exists()


class TestGradCheck:
    def test_linear_map_is_exact(self):
        gen = torch.Generator().manual_seed(0)
        w = torch.randn(6, 6, generator=gen, dtype=torch.float64)
        result = grad_check(lambda x: w @ x, (torch.randn(6, generator=gen, dtype=torch.float64),))
        assert result.max_rel_error < 1e-10

    def test_dw_xcorr_gradient(self):
        from siamtrack.correlation import dw_xcorr
        gen = torch.Generator().manual_seed(1)
        zf = torch.randn(2, 4, 4, generator=gen, dtype=torch.float64)
        xf = torch.randn(2, 8, 8, generator=gen, dtype=torch.float64)
        assert grad_check(dw_xcorr, (zf, xf)).max_rel_error < 1e-6

    def test_smooth_l1_skips_kink(self):
        x = torch.tensor([0.3, -0.7, 1.0, 2.5, -1.0, 0.0], dtype=torch.float64)
        result = grad_check(smooth_l1, (x,), skip=lambda i, idx, v: abs(abs(v) - 1.0) < 1e-3)
        assert result.skipped == 2
        assert result.max_rel_error < 1e-8

    def test_standard_battery(self):
        results = standard_grad_checks(seed=0)
        assert set(results) == {"dw_xcorr", "up_xcorr", "fusion", "smooth_l1", "total_loss"}
        for name, r in results.items():
            assert isinstance(r, GradCheckResult)
            assert r.checked > 0
            assert r.max_rel_error < 1e-6, name
