import pytest
import torch

from fbanet.errors import CheckpointError, ConfigError
from fbanet.model import (
    BackboneConfig,
    DualDecoderUNet,
    count_parameters,
    load_checkpoint,
    save_checkpoint,
    sharpen,
)


@pytest.fixture(scope="module")
def net2d():
    torch.manual_seed(0)
    return DualDecoderUNet(BackboneConfig(dims=2, base_channels=4, depth=2))


def test_zero_heads_give_uniform_probabilities():
    net = DualDecoderUNet(BackboneConfig(base_channels=4, depth=2, num_classes=2), zero_init_heads=True)
    out = net(torch.randn(2, 1, 16, 16))
    assert torch.allclose(out.prob1, torch.full_like(out.prob1, 1 / 3))
    assert torch.allclose(out.prob2, torch.full_like(out.prob2, 1 / 3))


@pytest.mark.parametrize("dims,shape", [(2, (16, 24)), (3, (8, 16, 8))])
def test_output_shapes_follow_input(dims, shape):
    torch.manual_seed(0)
    cfg = BackboneConfig(dims=dims, base_channels=4, depth=2)
    out = DualDecoderUNet(cfg)(torch.randn(2, 1, *shape))
    assert out.prob1.shape == out.prob2.shape == (2, 2, *shape)
    assert out.features.shape == (2, cfg.feature_channels, *(s // 4 for s in shape))
    assert out.decoder_features.shape == (2, cfg.base_channels, *shape)


def test_probabilities_normalised(net2d):
    out = net2d(10 * torch.randn(3, 1, 16, 16))
    for p in (out.prob1, out.prob2):
        assert (p >= 0).all() and (p <= 1).all()
        assert torch.allclose(p.sum(1), torch.ones_like(p.sum(1)), atol=1e-5)


def test_indivisible_shape_names_multiple(net2d):
    with pytest.raises(ConfigError, match="multiple of 4"):
        net2d(torch.randn(1, 1, 18, 16))


def test_forward_is_deterministic(net2d):
    x = torch.randn(2, 1, 16, 16, generator=torch.Generator().manual_seed(3))
    a, b = net2d(x), net2d(x)
    assert torch.equal(a.prob1, b.prob1) and torch.equal(a.prob2, b.prob2)


def test_decoders_differ(net2d):
    assert count_parameters(net2d.decoder1) != count_parameters(net2d.decoder2)
    out = net2d(torch.randn(2, 1, 16, 16))
    assert not torch.allclose(out.prob1, out.prob2)


def test_backbone_config_validation():
    with pytest.raises(ConfigError):
        BackboneConfig(depth=1)
    with pytest.raises(ConfigError):
        BackboneConfig(base_channels=1)
    with pytest.raises(ConfigError):
        BackboneConfig(dims=4)


def test_sharpen_examples():
    p = torch.tensor([[0.9, 0.5, 0.2], [0.1, 0.5, 0.8]]).view(1, 2, 3)
    assert sharpen(p).tolist() == [[[1.0, 1.0, 0.0], [0.0, 0.0, 1.0]]]


def test_sharpen_matches_scan_oracle():
    g = torch.Generator().manual_seed(0)
    p = torch.softmax(torch.randn(2, 4, 5, 5, generator=g), 1)
    hard = sharpen(p)
    for n in range(2):
        for i in range(5):
            for j in range(5):
                vals = p[n, :, i, j].tolist()
                best = max(range(4), key=lambda k: (vals[k], -k))
                assert hard[n, :, i, j].tolist() == [1.0 if k == best else 0.0 for k in range(4)]


def test_sharpen_blocks_gradient():
    p = torch.rand(1, 2, 3, requires_grad=True)
    assert not sharpen(p).requires_grad


def test_checkpoint_round_trip(tmp_path, net2d):
    path = tmp_path / "ck.pt"
    extra = {"contra.w": torch.arange(3.0)}
    save_checkpoint(path, net2d, extra, {"iteration": 7})
    net, got_extra, meta = load_checkpoint(path, expect=net2d.cfg)
    x = torch.randn(1, 1, 16, 16)
    assert torch.equal(net(x).prob1, net2d(x).prob1)
    assert torch.equal(got_extra["contra.w"], extra["contra.w"])
    assert meta == {"iteration": 7}


def test_checkpoint_config_mismatch(tmp_path, net2d):
    path = tmp_path / "ck.pt"
    save_checkpoint(path, net2d)
    with pytest.raises(CheckpointError, match="does not match"):
        load_checkpoint(path, expect=BackboneConfig(base_channels=8, depth=2))


def test_checkpoint_rejects_garbage(tmp_path):
    path = tmp_path / "bad.pt"
    path.write_bytes(b"not an archive")
    with pytest.raises(CheckpointError):
        load_checkpoint(path)
    torch.save({"format": "other"}, path)
    with pytest.raises(CheckpointError, match="fba-ckpt-v1"):
        load_checkpoint(path)
