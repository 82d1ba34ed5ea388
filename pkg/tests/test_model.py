import numpy as np
import pytest
import torch
import torchvision

from apebehaviour.model import (
    ModelConfig,
    ModelConfigError,
    TwoStreamNet,
    backbone_parameter_count,
    build_model,
    count_parameters,
    fuse_late,
)
from apebehaviour.training import focal_loss

from .oracles import resnet18_param_count, vgg16_param_count

CROP = 32


def seq(b=2, t=20, c=3, crop=CROP, seed=0):
    g = torch.Generator().manual_seed(seed)
    return torch.rand(b, t, c, crop, crop, generator=g)


@pytest.fixture(scope="module")
def net():
    torch.manual_seed(0)
    return TwoStreamNet(ModelConfig(pretrained_backbone=False)).eval()


def test_per_frame_features_shape(net):
    with torch.no_grad():
        assert net.per_frame_features("spatial", seq(1)[0]).shape == (20, 512)
        assert net.per_frame_features("temporal", seq(2, c=1)).shape == (2, 20, 512)


def test_identical_frames_identical_features(net):
    frame = seq(1, 1)[0, 0]
    with torch.no_grad():
        feats = net.per_frame_features("spatial", frame.expand(2, 3, CROP, CROP))
    assert torch.equal(feats[0], feats[1])


def test_pretrained_weights_change_features_not_shapes():
    torch.manual_seed(0)
    cfg = ModelConfig(pretrained_backbone=True)
    torch.manual_seed(1)
    other = torchvision.models.resnet18(weights=None).state_dict()
    a = build_model(cfg, CROP, weights=other).eval()
    torch.manual_seed(0)
    b = TwoStreamNet(ModelConfig(pretrained_backbone=False)).eval()
    x = seq(1, 3)
    with torch.no_grad():
        fa, fb = a.per_frame_features("spatial", x), b.per_frame_features("spatial", x)
    assert fa.shape == fb.shape
    assert not torch.allclose(fa, fb)
    assert torch.equal(a.spatial.stem[0].weight, other["conv1.weight"])
    assert torch.equal(a.temporal.stem[0].weight, other["conv1.weight"])


def test_feature_shape_mismatch(net):
    with pytest.raises(ValueError):
        net.per_frame_features("spatial", torch.rand(2, 20, 2, CROP, CROP))


def test_lstm_head(net):
    torch.manual_seed(3)
    feats = torch.randn(20, 512)
    with torch.no_grad():
        out = net.lstm_head("spatial", feats)
        assert out.shape == (512,)
        assert net.lstm_head("spatial", feats[:1]).shape == (512,)
        permuted = net.lstm_head("spatial", feats[torch.randperm(20, generator=torch.Generator().manual_seed(1))])
    assert not torch.allclose(out, permuted)
    with pytest.raises(ValueError):
        net.lstm_head("spatial", torch.zeros(1, 0, 512))


def test_fuse_late():
    a, b = torch.ones(512), torch.zeros(512)
    fused = fuse_late(a, b)
    assert fused.shape == (1024,)
    assert torch.equal(fused[:512], a) and torch.equal(fused[512:], b)
    assert not torch.equal(fuse_late(a, b), fuse_late(b, a))
    with pytest.raises(ValueError):
        fuse_late(torch.ones(256), b)


def test_classify(net):
    with torch.no_grad():
        assert net.classify(torch.randn(1024)).shape == (9,)
        assert net.classify(torch.randn(5, 1024)).shape == (5, 9)
    zero = TwoStreamNet(ModelConfig(pretrained_backbone=False)).eval()
    with torch.no_grad():
        for layer in (zero.classifier[0], zero.classifier[2]):
            layer.bias.zero_()
        assert torch.equal(zero.classify(torch.zeros(3, 1024)), torch.zeros(3, 9))


def test_forward_optimised(net):
    with torch.no_grad():
        assert net(seq(2), seq(2, c=1)).shape == (2, 9)


def test_baseline_late_constant_sequence_equals_single_frame():
    torch.manual_seed(0)
    model = TwoStreamNet(ModelConfig(variant="baseline", pretrained_backbone=False)).eval()
    rgb, flow = seq(1, 1), seq(1, 1, c=1, seed=4)
    with torch.no_grad():
        one = model(rgb, flow)
        many = model(rgb.expand(1, 20, 3, CROP, CROP), flow.expand(1, 20, 1, CROP, CROP))
    assert torch.allclose(one, many, atol=1e-5)


def test_optimised_convolutional_rejected():
    with pytest.raises(ModelConfigError, match="late fusion"):
        ModelConfig(variant="optimised", fusion="convolutional")


def test_eval_forward_deterministic(net):
    rgb, flow = seq(2), seq(2, c=1)
    with torch.no_grad():
        assert torch.equal(net(rgb, flow), net(rgb, flow))


def test_softmax_normalised(net):
    with torch.no_grad():
        p = torch.softmax(net(seq(3), seq(3, c=1)).double(), dim=-1)
    assert torch.allclose(p.sum(-1), torch.ones(3, dtype=torch.float64), atol=1e-6)


def test_stream_length_mismatch(net):
    with pytest.raises(ValueError):
        net(seq(1, 20), seq(1, 10, c=1))


# ------------------------------------------------------------------ parameters


def test_reference_counts_match_layer_recipe():
    assert backbone_parameter_count("resnet18") == resnet18_param_count() == 11_689_512
    assert backbone_parameter_count("vgg16") == vgg16_param_count() == 138_357_544


def test_parameter_ratio_band():
    ratio = backbone_parameter_count("resnet18") / backbone_parameter_count("vgg16")
    assert 0.075 <= ratio <= 0.095


def test_classifier_width_increases_count():
    assert count_parameters(ModelConfig(classifier_hidden=512)) > count_parameters(ModelConfig())


def test_two_unshared_backbones():
    model = TwoStreamNet(ModelConfig(pretrained_backbone=False))
    trunk = resnet18_param_count() - (512 * 1000 + 1000)
    assert sum(p.numel() for p in model.temporal.parameters()) == trunk
    assert model.spatial.stem[0].weight.data_ptr() != model.temporal.stem[0].weight.data_ptr()
    lstm = 2 * (4 * 512 * (512 + 512) + 2 * 4 * 512)
    head = 1024 * 256 + 256 + 256 * 9 + 9
    assert count_parameters(model) == 2 * trunk + lstm + head


def test_conv_fusion_count():
    cfg = ModelConfig(variant="baseline", fusion="convolutional")
    trunk = resnet18_param_count() - (512 * 1000 + 1000)
    conv = 1024 * 512 * 27 + 512
    head = 512 * 256 + 256 + 256 * 9 + 9
    assert count_parameters(cfg) == 2 * trunk + conv + head


# ---------------------------------------------------------------- grad check


def classifier_gradcheck(seed: int = 0, crop: int = 16, per_tensor: int = 12, eps: float = 1e-6):
    """Max relative error between autograd and central differences on classifier weights."""
    torch.manual_seed(seed)
    model = TwoStreamNet(ModelConfig(sequence_length=3, pretrained_backbone=False)).double().eval()
    rgb = seq(4, 3, crop=crop, seed=seed).double()
    flow = seq(4, 3, c=1, crop=crop, seed=seed + 1).double()
    y = torch.tensor([0, 3, 5, 8])

    def loss():
        return focal_loss(model(rgb, flow), y, 1.0, 1.0)

    model.zero_grad()
    loss().backward()
    rng = np.random.default_rng(seed)
    worst = 0.0
    for layer in (model.classifier[0], model.classifier[2]):
        for param in (layer.weight, layer.bias):
            flat = param.data.view(-1)
            grad = param.grad.view(-1)
            for i in rng.choice(flat.numel(), size=min(per_tensor, flat.numel()), replace=False):
                orig = flat[i].item()
                with torch.no_grad():
                    flat[i] = orig + eps
                    up = loss().item()
                    flat[i] = orig - eps
                    down = loss().item()
                    flat[i] = orig
                numeric = (up - down) / (2 * eps)
                analytic = grad[i].item()
                denom = max(abs(numeric), abs(analytic), 1e-7)
                worst = max(worst, abs(numeric - analytic) / denom)
    return worst


def test_classifier_gradients_match_finite_differences():
    assert classifier_gradcheck() < 1e-3
