import dataclasses

import numpy as np
import pytest
import torch
from torch import nn

from aper.backbone import ToyCNN, ToyViT, clone, count_parameters, embed, freeze, param_hash
from aper.exceptions import ConfigurationError, DataError, ShapeError
from aper.peft import (SSF, Adapter, PEFTConfig, adapt, adapter_forward, bn_adapt,
                       count_adaptation_parameters, install, restore_modules, ssf_forward,
                       vpt_forward)
from aper.stream import ExampleSet

import gradcheck
import oracles


def task(images, n_classes=3):
    return ExampleSet(images, np.arange(len(images)) % n_classes)


def test_defaults_follow_reported_training_details():
    cfg = PEFTConfig()
    assert (cfg.lr, cfg.batch_size, cfg.epochs, cfg.prompt_length, cfg.adapter_dim, cfg.momentum) \
        == (0.01, 48, 20, 5, 16, 0.9)


@pytest.mark.parametrize("kwargs", [dict(method="lora"), dict(prompt_length=0), dict(adapter_dim=0),
                                    dict(epochs=-1), dict(batch_size=0), dict(lr=0.0)])
def test_invalid_config(kwargs):
    with pytest.raises(ConfigurationError):
        PEFTConfig(**kwargs)


def test_ssf_forward_oracle():
    layer = SSF(4)
    with torch.no_grad():
        layer.gamma.copy_(torch.tensor([1.0, 2.0, -1.0, 0.5]))
        layer.beta.copy_(torch.tensor([0.0, 1.0, 0.5, -2.0]))
    x = np.array([[1.0, 1.0, 1.0, 1.0], [2.0, -1.0, 0.0, 4.0]])
    expected = [[1.0, 3.0, -0.5, -1.5], [2.0, -1.0, 0.5, 0.0]]
    np.testing.assert_allclose(ssf_forward(layer, x), expected)
    np.testing.assert_array_equal(ssf_forward(SSF(4), x), x)  # identity at init
    with pytest.raises(ShapeError):
        ssf_forward(layer, np.ones((2, 3)))


def test_adapter_forward_oracle():
    torch.manual_seed(0)
    layer = Adapter(6, 2)
    rng = np.random.default_rng(0)
    mlp_out, x = rng.normal(size=(3, 6)), rng.normal(size=(3, 6))
    np.testing.assert_allclose(adapter_forward(layer, mlp_out, x), mlp_out, atol=1e-7)  # W_up = 0
    with torch.no_grad():
        layer.up.normal_()
    down, up = layer.down.detach().double().numpy(), layer.up.detach().double().numpy()
    expected = mlp_out + np.maximum(x @ down, 0) @ up
    np.testing.assert_allclose(adapter_forward(layer, mlp_out, x), expected, atol=1e-5)
    bound = 1 / np.sqrt(6)
    assert np.all(np.abs(down) <= bound)
    with pytest.raises(ShapeError):
        adapter_forward(layer, mlp_out, np.ones((3, 5)))


@pytest.mark.parametrize("method", ["ssf", "adapter"])
def test_identity_initialisation_preserves_embedding(vit, images, method):
    model = clone(vit)
    install(model, PEFTConfig(method=method))
    np.testing.assert_allclose(embed(model, images), embed(vit, images), atol=1e-6)


def test_cnn_ssf_identity_at_init(cnn, images):
    model = clone(cnn)
    install(model, PEFTConfig(method="ssf"))
    np.testing.assert_array_equal(embed(model, images), embed(cnn, images))


@pytest.mark.parametrize("method, replace", [("vpt-shallow", True), ("vpt-deep", True),
                                             ("vpt-deep", False)])
def test_prompted_forward_matches_oracle(vit, images, method, replace):
    model = clone(vit)
    install(model, PEFTConfig(method=method, prompt_length=3, deep_prompts_replace=replace))
    for p in model.prompts:
        assert p.shape == (3, 16)
        assert float(p.detach().abs().max()) <= 0.1
    np.testing.assert_allclose(vpt_forward(model, images), oracles.vit_forward(model, images), atol=1e-5)


def test_vpt_errors(vit, cnn):
    with pytest.raises(ConfigurationError):
        vpt_forward(vit, np.zeros((1, 8, 8, 3)))
    with pytest.raises(ConfigurationError):
        install(clone(cnn), PEFTConfig(method="vpt-deep"))
    model = clone(vit)
    install(model, PEFTConfig(method="vpt-shallow"))
    with pytest.raises(ConfigurationError):
        install(model, PEFTConfig(method="vpt-deep"))
    model.prompts[0] = nn.Parameter(torch.zeros(5, 8))
    with pytest.raises(ConfigurationError):
        vpt_forward(model, np.zeros((1, 8, 8, 3)))


@pytest.mark.parametrize("method", ["full", "vpt-shallow", "vpt-deep", "ssf", "adapter"])
def test_install_trains_only_theta(vit, method):
    model = clone(vit)
    params = install(model, PEFTConfig(method=method, prompt_length=5, adapter_dim=4))
    ids = {id(p) for p in params}
    for name, p in model.named_parameters():
        assert p.requires_grad == (id(p) in ids), name
    total, trainable = count_parameters(model)
    d = 16
    expected = {"full": total, "vpt-shallow": 5 * d, "vpt-deep": 2 * 5 * d, "ssf": 2 * 2 * 2 * d,
                "adapter": 2 * (d * 4 + 4 * d)}[method]
    assert trainable == expected


def test_adapter_parameter_count_at_reference_width():
    model = ToyViT(image_size=8, patch_size=4, embed_dim=64, depth=2, num_heads=4)
    counts = count_adaptation_parameters(model, PEFTConfig(method="adapter", adapter_dim=16), n_classes=10)
    named = {n: p.numel() for n, p in _installed(model, "adapter").named_parameters() if "adapter" in n}
    assert sum(named.values()) == 2 * (64 * 16 + 16 * 64) == 4096
    assert counts["trainable"] == 4096 + 64 * 10
    assert counts["total"] == sum(p.numel() for p in model.parameters()) + 4096 + 640


def _installed(model, method):
    m = clone(model)
    install(m, PEFTConfig(method=method))
    return m


def test_parameter_counts_per_method(vit, cnn):
    base = sum(p.numel() for p in vit.parameters())
    ssf = count_adaptation_parameters(vit, PEFTConfig(method="ssf"), 4)
    assert ssf["trainable"] == 2 * 2 * (2 * 16) + 16 * 4
    full = count_adaptation_parameters(vit, PEFTConfig(method="full"), 4)
    assert full["trainable"] == full["total"] == base + 64 and full["frozen"] == 0
    bn = count_adaptation_parameters(cnn, PEFTConfig(method="bn"), 4)
    assert bn["trainable"] == 0 and bn["head"] == 0


def test_incompatible_methods(vit, cnn):
    with pytest.raises(ConfigurationError):
        install(clone(cnn), PEFTConfig(method="adapter"))
    with pytest.raises(ConfigurationError):
        adapt(vit, task(np.zeros((3, 8, 8, 3), np.float32)), PEFTConfig(method="bn"))
    with pytest.raises(ConfigurationError):
        bn_adapt(vit, task(np.zeros((3, 8, 8, 3), np.float32)))


def test_adapt_leaves_original_untouched_and_is_deterministic(vit, images):
    before = param_hash(vit)
    cfg = PEFTConfig(method="adapter", epochs=3, batch_size=4, lr=0.05, adapter_dim=4)
    a = adapt(vit, task(images), cfg, seed=3)
    b = adapt(vit, task(images), cfg, seed=3)
    c = adapt(vit, task(images), cfg, seed=4)
    assert param_hash(vit) == before
    assert param_hash(a) == param_hash(b) != param_hash(c)
    assert a.frozen and count_parameters(a)[1] == 0
    assert len(a.adaptation_losses) == 3
    assert not np.allclose(embed(a, images), embed(vit, images))


def test_adapt_reduces_training_loss(cnn, images):
    cfg = PEFTConfig(method="ssf", epochs=15, batch_size=12, lr=0.1)
    losses = adapt(cnn, task(images), cfg).adaptation_losses
    assert losses[-1] < losses[0]


def test_adapt_with_zero_epochs_is_identity_for_ssf(vit, images):
    model = adapt(vit, task(images), PEFTConfig(method="ssf", epochs=0))
    np.testing.assert_allclose(embed(model, images), embed(vit, images), atol=1e-6)


def test_adapt_empty_task(vit):
    with pytest.raises(DataError):
        adapt(vit, ExampleSet(np.zeros((0, 8, 8, 3)), np.zeros(0, dtype=int)), PEFTConfig())


def test_regularizer_hook_is_added_to_objective(vit, images):
    cfg = PEFTConfig(method="ssf", epochs=1, batch_size=12)
    plain = adapt(vit, task(images), cfg, seed=0).adaptation_losses[0]
    shifted = adapt(vit, task(images), cfg, seed=0,
                    regularizer=lambda: torch.tensor(2.0)).adaptation_losses[0]
    assert shifted == pytest.approx(plain + 2.0)


def test_bn_statistics_match_layerwise_oracle(cnn):
    rng = np.random.default_rng(1)
    X = (rng.normal(size=(20, 8, 8, 3)) * 3 + 1).astype(np.float32)
    before = param_hash(cnn, "parameters")
    model = bn_adapt(cnn, task(X), batch_size=7)
    assert param_hash(model, "parameters") == before  # weights unchanged, no backprop

    x = X.astype(np.float64).transpose(0, 3, 1, 2)
    for block, ref in zip(model.blocks, cnn.blocks):
        z = oracles.conv2d(x, oracles.P(ref.conv.weight), ref.conv.stride[0])
        mean, var = z.mean(axis=(0, 2, 3)), z.var(axis=(0, 2, 3))
        np.testing.assert_allclose(oracles.P(block.bn.running_mean), mean, rtol=1e-5, atol=1e-5)
        np.testing.assert_allclose(oracles.P(block.bn.running_var), var, rtol=1e-5, atol=1e-5)
        bn = ref.bn
        z = (z - mean[:, None, None]) / np.sqrt(var[:, None, None] + bn.eps)
        x = np.maximum(z * oracles.P(bn.weight)[:, None, None] + oracles.P(bn.bias)[:, None, None], 0)
    assert model.frozen and not model.training


def test_bn_adapt_is_order_invariant(cnn):
    X = np.random.default_rng(2).normal(size=(16, 8, 8, 3)).astype(np.float32)
    a = bn_adapt(cnn, task(X))
    b = bn_adapt(cnn, task(X[::-1].copy()))
    for ba, bb in zip(a.blocks, b.blocks):
        np.testing.assert_allclose(ba.bn.running_mean.numpy(), bb.bn.running_mean.numpy(), atol=1e-6)


def test_restore_modules_rebuilds_slots(vit):
    model = clone(vit)
    install(model, PEFTConfig(method="vpt-deep", prompt_length=2))
    install(model, PEFTConfig(method="adapter", adapter_dim=3))
    twin = clone(vit)
    restore_modules(twin, model.peft_state())
    assert {n: p.shape for n, p in twin.named_parameters()} == \
        {n: p.shape for n, p in model.named_parameters()}


def test_cnn_ssf_gradients_match_finite_differences():
    torch.manual_seed(0)
    model = ToyCNN(image_size=6, channels=(3, 4), strides=(1, 2)).double()
    model.eval()
    params = install(model, PEFTConfig(method="ssf"))
    with torch.no_grad():
        for p in params:
            p.add_(torch.randn_like(p) * 0.3)
    head = nn.Linear(4, 3, bias=False).double()
    X = torch.randn(5, 6, 6, 3, dtype=torch.float64)
    y = torch.tensor([0, 1, 2, 0, 1])
    named = [(n, p) for n, p in model.named_parameters() if p.requires_grad]
    errors = gradcheck.relative_errors(model, head, X, y, named)
    assert max(errors.values()) < 1e-4, errors
