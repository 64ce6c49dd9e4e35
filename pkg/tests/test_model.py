import numpy as np
import pytest
import torch

from siamtrack.checkpoint import load_checkpoint, save_checkpoint
from siamtrack.errors import ConfigError
from siamtrack.geometry import AnchorConfig
from siamtrack.model import ModelConfig, SiamModel, build_model


@pytest.fixture(scope="module")
def desk_model():
    return build_model(ModelConfig.desk(), seed=11)


class TestModelConfig:
    def test_anchor_stride_must_match_backbone(self):
        with pytest.raises(ConfigError):
            ModelConfig(anchor=AnchorConfig(stride=8))  # desk backbone stride is 4

    def test_levels_validation(self):
        with pytest.raises(ConfigError):
            ModelConfig.desk(levels=(2, 3))
        with pytest.raises(ConfigError):
            ModelConfig.desk(levels=())
        with pytest.raises(ConfigError):
            ModelConfig.desk(levels=(4, 3))

    def test_dict_roundtrip(self):
        cfg = ModelConfig.desk("padfree_shallow", levels=(4,))
        again = ModelConfig.from_dict(cfg.to_dict())
        assert again == cfg


class TestGeometryOfResponses:
    def test_response_sizes(self, desk_model):
        assert desk_model.response_size(127) == 25
        padfree = build_model(ModelConfig.desk("padfree_shallow"), seed=0)
        assert padfree.response_size(127) == 19

    def test_anchors_centered(self, desk_model):
        anchors = desk_model.anchors_for(127)
        assert anchors.grid == (25, 25)
        center = anchors.box_at(12, 12, 2)
        assert (center.cx, center.cy) == (63.0, 63.0)
        assert anchors.origin == (15.0, 15.0)

    def test_forward_shapes_and_determinism(self, desk_model):
        gen = torch.Generator().manual_seed(0)
        z = torch.randn(2, 1, 63, 63, generator=gen)
        x = torch.randn(2, 1, 127, 127, generator=gen)
        desk_model.eval()
        fused, per_level = desk_model(z, x)
        assert fused.cls.shape == (2, 10, 25, 25)
        assert fused.reg.shape == (2, 20, 25, 25)
        assert [p.level for p in per_level] == [3, 4, 5]
        fused2, _ = desk_model(z, x)
        assert torch.equal(fused.cls, fused2.cls)

    def test_template_crop_size(self, desk_model):
        z = torch.randn(1, 1, 63, 63, generator=torch.Generator().manual_seed(1))
        desk_model.eval()
        with torch.no_grad():
            zf = desk_model.template(z)
        for level, feat in zf.items():
            assert feat.shape[-2:] == (7, 7)
            assert feat.shape[1] == 32

    def test_single_level_model(self):
        model = build_model(ModelConfig.desk(levels=(4,)), seed=3)
        model.eval()
        gen = torch.Generator().manual_seed(2)
        fused, per_level = model(torch.randn(1, 1, 63, 63, generator=gen),
                                 torch.randn(1, 1, 127, 127, generator=gen))
        assert len(per_level) == 1
        assert fused.cls.shape == (1, 10, 25, 25)

    def test_fusion_weights_uniform_at_init(self, desk_model):
        alpha, beta = desk_model.fusion_weights().normalized()
        np.testing.assert_allclose(alpha, [1 / 3] * 3, atol=1e-9)
        np.testing.assert_allclose(beta, [1 / 3] * 3, atol=1e-9)

    def test_build_determinism(self):
        a = build_model(ModelConfig.desk(), seed=5)
        b = build_model(ModelConfig.desk(), seed=5)
        for (na, pa), (nb, pb) in zip(a.named_parameters(), b.named_parameters()):
            assert na == nb and torch.equal(pa, pb)

    def test_param_groups_cover_everything(self, desk_model):
        total = sum(p.numel() for p in desk_model.parameters())
        split = sum(p.numel() for p in desk_model.backbone_parameters())
        split += sum(p.numel() for p in desk_model.head_parameters())
        assert split == total


class TestCheckpoint:
    def test_bit_exact_roundtrip(self, tmp_path, desk_model):
        path = tmp_path / "model.npz"
        save_checkpoint(path, desk_model, meta={"note": "test"})
        loaded, meta = load_checkpoint(path)
        assert meta == {"note": "test"}
        assert loaded.cfg == desk_model.cfg
        orig_p = dict(desk_model.named_parameters())
        for name, p in loaded.named_parameters():
            assert torch.equal(p, orig_p[name]), name
        orig_b = dict(desk_model.named_buffers())
        for name, b in loaded.named_buffers():
            assert torch.equal(b, orig_b[name]), name

    def test_rejects_non_checkpoint(self, tmp_path):
        path = tmp_path / "junk.npz"
        np.savez(path, a=np.zeros(3))
        with pytest.raises(ConfigError):
            load_checkpoint(path)

    def test_loaded_model_same_outputs(self, tmp_path, desk_model):
        path = tmp_path / "model.npz"
        desk_model.eval()
        save_checkpoint(path, desk_model)
        loaded, _ = load_checkpoint(path)
        gen = torch.Generator().manual_seed(3)
        z = torch.randn(1, 1, 63, 63, generator=gen)
        x = torch.randn(1, 1, 127, 127, generator=gen)
        with torch.no_grad():
            fa, _ = desk_model(z, x)
            fb, _ = loaded(z, x)
        assert torch.equal(fa.cls, fb.cls) and torch.equal(fa.reg, fb.reg)
