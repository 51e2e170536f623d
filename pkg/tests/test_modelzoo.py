from __future__ import annotations

import math

import numpy as np
import pytest
import torch
from hypothesis import given
from hypothesis import strategies as st
from torch import nn

from tlbench import modelzoo as mz
from tlbench.errors import BackboneUnavailableError, ConfigError, RangeError, RegistryError


@pytest.fixture
def tiny():
    torch.manual_seed(0)
    return mz.build_model("SyntheticTiny", 0.0)


# -- freeze policy --------------------------------------------------------------


@pytest.mark.parametrize("n,rate,k", [(100, 0.20, 20), (41, 0.50, 20), (329, 0.0, 0),
                                      (41, 1.0, 41), (0, 0.5, 0)])
def test_num_freeze_layers_examples(n, rate, k):
    assert mz.num_freeze_layers(n, rate) == k


@pytest.mark.parametrize("rate", [-0.01, 1.01])
def test_num_freeze_layers_range(rate):
    with pytest.raises(RangeError):
        mz.num_freeze_layers(10, rate)


@given(st.integers(0, 2000), st.floats(0, 1), st.floats(0, 1))
def test_num_freeze_layers_monotone(n, a, b):
    lo, hi = sorted((a, b))
    assert 0 <= mz.num_freeze_layers(n, lo) <= mz.num_freeze_layers(n, hi) <= n


def test_synthetic_tiny_layers_and_size():
    backbone = mz.SyntheticTiny()
    layers = mz.backbone_layers(backbone)
    assert [type(m).__name__ for m in layers] == ["Conv2d", "BatchNorm2d"] * 4
    assert 40_000 < sum(p.numel() for p in backbone.parameters()) < 60_000


def test_trainable_count_strictly_decreases_at_layer_boundaries():
    counts = []
    for k in range(9):
        model = mz.build_model("SyntheticTiny", k / 8)
        assert model.num_frozen == k
        counts.append(mz.count_trainable(model))
    assert all(a > b for a, b in zip(counts, counts[1:]))


def test_full_freeze_leaves_only_head_trainable():
    model = mz.build_model("SyntheticTiny", 1.0)
    assert not any(p.requires_grad for p in model.backbone.parameters())
    head = {id(p) for p in model.head_parameters()}
    assert {id(p) for p in model.parameters() if p.requires_grad} == head


def test_frozen_batchnorm_runs_in_inference_mode():
    model = mz.build_model("SyntheticTiny", 0.5)
    model.train()
    frozen_bn = [m for m in model.layers[: model.num_frozen] if isinstance(m, nn.BatchNorm2d)]
    live_bn = [m for m in model.layers[model.num_frozen:] if isinstance(m, nn.BatchNorm2d)]
    assert frozen_bn and all(not m.training for m in frozen_bn)
    assert live_bn and all(m.training for m in live_bn)
    toggled = mz.build_model("SyntheticTiny", 0.5, frozen_bn_inference=False).train()
    assert all(m.training for m in toggled.modules())


# -- model construction -----------------------------------------------------------


def test_binary_output_shape_and_sigmoid(tiny):
    x = torch.rand(5, 3, 32, 32)
    assert tiny(x).shape == (5, 1)
    tiny.eval()
    p = tiny.predict_proba(x)
    assert torch.all((p > 0) & (p < 1))


def test_multiclass_softmax_rows_sum_to_one():
    model = mz.build_model("SyntheticTiny", 0.2, mz.HeadConfig(num_classes=3)).eval()
    p = model.predict_proba(torch.rand(4, 3, 32, 32))
    assert p.shape == (4, 3)
    assert torch.allclose(p.sum(dim=1), torch.ones(4), atol=1e-6)


def test_head_structure_matches_config():
    model = mz.build_model("SyntheticTiny", 0.0, mz.BEST_HEAD)
    assert model.dropout.p == 0.3 and model.dense.out_features == 128
    assert model.out.out_features == 1
    assert model.norm.num_features == model.backbone.out_channels


def test_densenet121_best_architecture():
    model = mz.build_model("DenseNet121", 0.2, mz.BEST_HEAD)
    assert model.dense.in_features == 1024 and model.dense.out_features == 128
    assert model.num_frozen == math.floor(model.layer_count * 0.2)
    assert model(torch.rand(2, 3, 64, 64)).shape == (2, 1)


def test_unknown_backbone_and_unavailable_architecture():
    with pytest.raises(RegistryError):
        mz.BackboneSpec("Xception")
    with pytest.raises(BackboneUnavailableError, match="SyntheticTiny"):
        mz.build_model("NASNetMobile", 0.1)
    with pytest.raises(BackboneUnavailableError):
        mz.build_model(mz.BackboneSpec("SyntheticTiny", pretrained=True), 0.1)


def test_weight_download_failure_suggests_synthetic(monkeypatch):
    import torchvision.models

    def offline(**kwargs):
        raise OSError("network unreachable")

    monkeypatch.setattr(torchvision.models, "resnet50", offline)
    with pytest.raises(BackboneUnavailableError, match="SyntheticTiny"):
        mz.build_model(mz.BackboneSpec("ResNet50", pretrained=True), 0.1)


def test_head_config_validation():
    for kwargs in ({"dropout_rate": 0.0}, {"dense_units": 0}, {"l2_strength": -1},
                   {"num_classes": 1}):
        with pytest.raises(ConfigError):
            mz.HeadConfig(**kwargs)


def test_model_spec_round_trip():
    spec = mz.ModelSpec(mz.BackboneSpec("VGG16"), mz.BEST_HEAD, mz.TUNED_BEST_OPTIMIZER, 0.5,
                        (64, 64))
    assert mz.ModelSpec.from_dict(spec.to_dict()) == spec


# -- optimizers and losses --------------------------------------------------------


def test_optimizer_presets():
    assert (mz.MANUAL_BEST_OPTIMIZER.learning_rate, mz.MANUAL_BEST_OPTIMIZER.weight_decay) == (
        5e-5, 1e-5)
    assert (mz.TUNED_BEST_OPTIMIZER.learning_rate, mz.TUNED_BEST_OPTIMIZER.weight_decay) == (
        3.7758e-4, 7.4855e-5)
    opt = mz.build_optimizer(mz.TUNED_BEST_OPTIMIZER, [nn.Parameter(torch.zeros(2))])
    assert isinstance(opt, torch.optim.AdamW)
    assert opt.param_groups[0]["weight_decay"] == 7.4855e-5


@pytest.mark.parametrize("family,cls", [("sgd", torch.optim.SGD), ("rmsprop", torch.optim.RMSprop),
                                        ("adam", torch.optim.Adam), ("nadam", torch.optim.NAdam)])
def test_only_decoupled_family_applies_weight_decay(family, cls):
    opt = mz.build_optimizer(mz.OptimizerSpec(family, 1e-3, 1e-2), [nn.Parameter(torch.zeros(2))])
    assert type(opt) is cls and opt.param_groups[0]["weight_decay"] == 0


def test_unknown_optimizer_family():
    with pytest.raises(RegistryError):
        mz.OptimizerSpec("lamb")
    with pytest.raises(ConfigError):
        mz.OptimizerSpec(learning_rate=0.0)


def _trajectory(family, steps=10):
    torch.manual_seed(3)
    model = mz.build_model("SyntheticTiny", 0.0).eval()
    x, y = torch.rand(4, 3, 16, 16), torch.tensor([0, 1, 1, 0])
    opt = mz.build_optimizer(mz.OptimizerSpec(family, 1e-3, 0.0), model.parameters())
    loss_fn = mz.build_loss(2)
    losses = []
    for _ in range(steps):
        opt.zero_grad()
        loss = loss_fn(model(x), y)
        loss.backward()
        opt.step()
        losses.append(loss.item())
    return losses


def test_zero_decay_matches_plain_adaptive_moments():
    assert np.allclose(_trajectory("adam_decoupled_wd"), _trajectory("adam"), rtol=0, atol=1e-7)


def test_loss_analytic_values():
    bce = mz.build_loss(2)
    assert math.isclose(bce.from_probabilities(torch.tensor([0.5]), torch.tensor([1])).item(),
                        math.log(2), rel_tol=1e-6)
    assert bce(torch.tensor([[0.0]]), torch.tensor([1])).item() == pytest.approx(math.log(2))
    assert bce.from_probabilities(torch.tensor([1.0, 0.0]), torch.tensor([1, 0])).item() == 0.0
    cce = mz.build_loss(3)
    uniform = torch.full((2, 3), 1 / 3)
    assert cce.from_probabilities(uniform, torch.tensor([0, 2])).item() == pytest.approx(
        math.log(3), rel=1e-6)
    assert cce(torch.zeros(2, 3), torch.tensor([1, 2])).item() == pytest.approx(math.log(3))
    onehot = torch.eye(3)
    assert cce.from_probabilities(onehot, torch.tensor([0, 1, 2])).item() == 0.0
    with pytest.raises(ConfigError):
        mz.build_loss(1)


def test_head_gradients_match_finite_differences():
    torch.manual_seed(0)
    model = mz.build_model("SyntheticTiny", 0.0).double().eval()
    x = torch.rand(4, 3, 32, 32, dtype=torch.float64)
    y = torch.tensor([1, 0, 1, 0])
    loss_fn = mz.build_loss(2)
    with torch.no_grad():
        fmap = model.features(x)

    def loss():
        return loss_fn(model.head(fmap), y) + model.regularization_loss()

    params = model.head_parameters()
    analytic = torch.autograd.grad(loss(), params)
    eps = 1e-6
    for p, g in zip(params, analytic):
        numeric = torch.zeros_like(p)
        flat, nflat = p.data.view(-1), numeric.view(-1)
        for i in range(flat.numel()):
            old = flat[i].item()
            flat[i] = old + eps
            up = loss().item()
            flat[i] = old - eps
            down = loss().item()
            flat[i] = old
            nflat[i] = (up - down) / (2 * eps)
        rel = (g - numeric).norm() / max(g.norm(), numeric.norm(), 1e-12)
        assert rel < 1e-3


def test_checkpoint_round_trip(tmp_path, tiny):
    spec = mz.ModelSpec(input_size=(32, 32))
    path = mz.save_checkpoint(tiny, spec, tmp_path / "m.pt", seed=42, extra={"note": "x"})
    sidecar = tmp_path / "m.pt.json"
    assert sidecar.exists() and '"seed": 42' in sidecar.read_text()
    loaded, spec2, meta = mz.load_checkpoint(path)
    assert spec2 == spec and meta["seed"] == 42 and meta["note"] == "x"
    tiny.eval()
    x = torch.rand(2, 3, 32, 32)
    assert torch.equal(loaded(x), tiny(x))
