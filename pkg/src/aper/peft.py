"""Adapting a pre-trained backbone on the first task.

``adapt`` trains one of six parameter sets on D^1 with a throw-away linear
head and returns an adapted deep copy:

========== ====================================================== ===========
method     trained parameters                                     backbone
========== ====================================================== ===========
full       every backbone parameter                               vit, cnn
vpt-*      prompt rows prepended at block 1 (shallow) / all blocks vit
ssf        per-channel scale and shift after attention and MLP    vit, cnn
adapter    ReLU bottleneck added in parallel to each MLP          vit
bn         none; BatchNorm running statistics are recomputed      cnn
========== ====================================================== ===========
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np
import torch
from torch import nn

from .backbone import Backbone, ToyCNN, ToyViT, clone, count_parameters, embed, freeze
from .exceptions import ConfigurationError, DataError, ShapeError
from .stream import ExampleSet
from .training import train_cross_entropy

METHODS = ("full", "vpt-shallow", "vpt-deep", "ssf", "adapter", "bn")


@dataclass(frozen=True)
class PEFTConfig:
    method: str = "ssf"
    prompt_length: int = 5
    adapter_dim: int = 16
    epochs: int = 20
    batch_size: int = 48
    lr: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 0.0
    deep_prompts_replace: bool = True

    def __post_init__(self):
        if self.method not in METHODS:
            raise ConfigurationError(f"unknown adaptation method {self.method!r}; "
                                     f"expected one of {METHODS}")
        if self.prompt_length < 1:
            raise ConfigurationError("prompt_length must be >= 1")
        if self.adapter_dim < 1:
            raise ConfigurationError("adapter_dim must be >= 1")
        if self.epochs < 0 or self.batch_size < 1 or self.lr <= 0:
            raise ConfigurationError("epochs >= 0, batch_size >= 1 and lr > 0 required")


class SSF(nn.Module):
    """x_o = gamma * x_i + beta over the last axis; identity at initialisation."""

    def __init__(self, dim):
        super().__init__()
        self.gamma = nn.Parameter(torch.ones(dim))
        self.beta = nn.Parameter(torch.zeros(dim))

    def forward(self, x):
        if x.shape[-1] != self.gamma.shape[0]:
            raise ShapeError(f"SSF width {self.gamma.shape[0]} vs input width {x.shape[-1]}")
        return x * self.gamma + self.beta


class Adapter(nn.Module):
    """Bottleneck branch added to an MLP output: mlp_out + ReLU(x W_down) W_up."""

    def __init__(self, dim, bottleneck):
        super().__init__()
        bound = 1.0 / np.sqrt(dim)
        self.down = nn.Parameter(torch.empty(dim, bottleneck).uniform_(-bound, bound))
        self.up = nn.Parameter(torch.zeros(bottleneck, dim))

    def forward(self, mlp_out, x):
        if x.shape[-1] != self.down.shape[0] or mlp_out.shape[-1] != self.up.shape[1]:
            raise ShapeError(f"adapter width {self.down.shape[0]} vs inputs "
                             f"{x.shape[-1]}/{mlp_out.shape[-1]}")
        return mlp_out + torch.relu(x @ self.down) @ self.up


def _tensor(a, like):
    return torch.as_tensor(np.asarray(a), dtype=like.dtype)


def ssf_forward(layer: SSF, x):
    """Apply an SSF layer to an (L, d) array; returns a numpy array."""
    with torch.no_grad():
        return layer(_tensor(x, layer.gamma)).numpy()


def adapter_forward(layer: Adapter, mlp_out, x_ell):
    """Adapter output for block input ``x_ell`` given the MLP output; returns numpy."""
    with torch.no_grad():
        return layer(_tensor(mlp_out, layer.up), _tensor(x_ell, layer.down)).numpy()


# --------------------------------------------------------------------------
# Installing tuning modules
# --------------------------------------------------------------------------

def _require(backbone, cls, method):
    if not isinstance(backbone, cls):
        raise ConfigurationError(f"method {method!r} needs a {cls.kind} backbone, got {backbone.kind}")


def install(backbone: Backbone, config: PEFTConfig) -> list[nn.Parameter]:
    """Attach the modules of ``config.method`` in place (once) and return the tuned set.

    Every backbone parameter outside the returned list has ``requires_grad`` off.
    """
    method = config.method
    first = next(iter(backbone.parameters()), None)
    if first is None:
        raise ConfigurationError(f"{backbone.kind} backbone has nothing to adapt")
    dtype = first.dtype
    for p in backbone.parameters():
        p.requires_grad_(False)

    if method == "full":
        params = list(backbone.parameters())
    elif method in ("vpt-shallow", "vpt-deep"):
        _require(backbone, ToyViT, method)
        mode = method.split("-")[1]
        if backbone.prompts is None:
            count = 1 if mode == "shallow" else backbone.depth
            backbone.prompts = nn.ParameterList(
                nn.Parameter(torch.empty(config.prompt_length, backbone.embed_dim, dtype=dtype)
                             .uniform_(-0.1, 0.1)) for _ in range(count))
            backbone.prompt_mode = mode
            backbone.deep_prompts_replace = config.deep_prompts_replace
        elif backbone.prompt_mode != mode:
            raise ConfigurationError(f"backbone already carries {backbone.prompt_mode} prompts")
        params = list(backbone.prompts)
    elif method == "ssf":
        if isinstance(backbone, ToyViT):
            for block in backbone.blocks:
                if block.ssf_attn is None:
                    block.ssf_attn = SSF(backbone.embed_dim).to(dtype)
                    block.ssf_mlp = SSF(backbone.embed_dim).to(dtype)
            modules = [m for b in backbone.blocks for m in (b.ssf_attn, b.ssf_mlp)]
        elif isinstance(backbone, ToyCNN):
            for block in backbone.blocks:
                if block.ssf is None:
                    block.ssf = SSF(block.bn.num_features).to(dtype)
            modules = [b.ssf for b in backbone.blocks]
        else:
            raise ConfigurationError(f"ssf is not defined for {backbone.kind}")
        params = [p for m in modules for p in m.parameters()]
    elif method == "adapter":
        _require(backbone, ToyViT, method)
        for block in backbone.blocks:
            if block.adapter is None:
                block.adapter = Adapter(backbone.embed_dim, config.adapter_dim).to(dtype)
        params = [p for b in backbone.blocks for p in b.adapter.parameters()]
    elif method == "bn":
        _require(backbone, ToyCNN, method)
        params = []
    else:  # PEFTConfig validates, so only reachable with a hand-built config
        raise ConfigurationError(f"unknown adaptation method {method!r}")

    for p in params:
        p.requires_grad_(True)
    backbone.frozen = False
    return params


def restore_modules(backbone: Backbone, state: dict):
    """Recreate empty tuning modules described by ``Backbone.peft_state()``."""
    if "prompts" in state:
        pr = state["prompts"]
        install(backbone, PEFTConfig(method=f"vpt-{pr['mode']}", prompt_length=pr["length"],
                                     deep_prompts_replace=pr.get("replace", True)))
    if state.get("ssf"):
        install(backbone, PEFTConfig(method="ssf"))
    if "adapter" in state:
        install(backbone, PEFTConfig(method="adapter", adapter_dim=state["adapter"]["dim"]))


# --------------------------------------------------------------------------
# Adaptation
# --------------------------------------------------------------------------

def _label_map(y):
    classes = np.unique(y)
    return classes, np.searchsorted(classes, y)


def adapt(backbone: Backbone, D1: ExampleSet, config: PEFTConfig, seed: int = 0,
          regularizer: Optional[Callable[[], torch.Tensor]] = None) -> Backbone:
    """Return a frozen adapted copy of ``backbone`` trained on ``D1``.

    The original backbone is left untouched.  The linear head used for the
    cross-entropy objective is discarded.  Per-epoch mean losses are kept on
    the returned model as ``adaptation_losses``.
    """
    if len(D1) == 0:
        raise DataError("cannot adapt on an empty training set")
    model = clone(backbone)
    if config.method == "bn":
        _require(model, ToyCNN, "bn")
        model = bn_adapt(model, D1)
        model.adaptation_losses = []
        return model

    with torch.random.fork_rng():
        torch.manual_seed(seed)
        params = install(model, config)
        classes, targets = _label_map(D1.y)
        head = nn.Linear(model.embed_dim, len(classes), bias=False).to(next(model.parameters()).dtype)

    losses = train_cross_entropy(
        model, head, D1.X, targets, params + list(head.parameters()),
        epochs=config.epochs, batch_size=config.batch_size, lr=config.lr,
        momentum=config.momentum, weight_decay=config.weight_decay, seed=seed,
        regularizer=regularizer, train_mode=config.method == "full")
    freeze(model)
    model.adaptation_losses = losses
    return model


def _batchnorms(model):
    return [m for m in model.modules() if isinstance(m, nn.modules.batchnorm._BatchNorm)]


def bn_adapt(backbone: Backbone, D1: ExampleSet, batch_size: int = 256) -> Backbone:
    """Copy of ``backbone`` whose BN running statistics are those of ``D1``.

    Layers are processed in forward order; each gets two forward-only passes
    (mean, then population variance) with earlier layers already updated.
    """
    bns = _batchnorms(backbone)
    if not bns:
        raise ConfigurationError(f"{backbone.kind} backbone has no BatchNorm layers")
    if len(D1) == 0:
        raise DataError("cannot recompute statistics on an empty set")
    model = clone(backbone)
    bns = _batchnorms(model)
    model.eval()

    def run_pass(bn, reduce):
        acc = {}

        def hook(module, inputs):
            x = inputs[0].detach().double()
            acc["sum"] = acc.get("sum", 0.0) + reduce(x)
            acc["count"] = acc.get("count", 0) + x.numel() // x.shape[1]

        handle = bn.register_forward_pre_hook(hook)
        try:
            embed(model, D1.X, batch_size=batch_size)
        finally:
            handle.remove()
        return acc["sum"] / acc["count"]

    for bn in bns:
        mean = run_pass(bn, lambda x: x.sum(dim=(0, 2, 3)))
        var = run_pass(bn, lambda x: ((x - mean[None, :, None, None]) ** 2).sum(dim=(0, 2, 3)))
        with torch.no_grad():
            bn.running_mean.copy_(mean.to(bn.running_mean.dtype))
            bn.running_var.copy_(var.to(bn.running_var.dtype))
    return freeze(model)


def vpt_forward(backbone: ToyViT, X) -> np.ndarray:
    """Embeddings of a prompted ViT; the classification token stays at position 0."""
    _require(backbone, ToyViT, "vpt")
    if backbone.prompts is None:
        raise ConfigurationError("backbone carries no prompts")
    for p in backbone.prompts:
        if p.shape[1] != backbone.embed_dim:
            raise ConfigurationError(f"prompt width {p.shape[1]} != embed_dim {backbone.embed_dim}")
    return embed(backbone, X)


def count_adaptation_parameters(backbone: Backbone, config: PEFTConfig, n_classes: int) -> dict:
    """Parameter counts of the model trained during adaptation (backbone + tuning modules + head)."""
    model = clone(backbone)
    install(model, config)
    head_total = 0 if config.method == "bn" else model.embed_dim * n_classes
    total, trainable = count_parameters(model)
    total += head_total
    trainable += head_total
    return {"total": total, "trainable": trainable, "frozen": total - trainable,
            "head": head_total}
