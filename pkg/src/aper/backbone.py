"""Small embedding networks phi: R^D -> R^d.

All backbones take channel-last inputs, (N, H, W, C) for images and (N, D) for
flat vectors, and return (N, d) embeddings.  The ViT reads the classification
token of its last layer; the CNN global-average-pools its last feature map.

Parameter-efficient tuning modules (see :mod:`aper.peft`) plug into the
``ssf_*``, ``adapter`` and ``prompts`` slots, which are empty on a plain backbone.
"""
from __future__ import annotations

import copy
import hashlib
import math
from typing import Optional

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .exceptions import ConfigurationError, ShapeError

KINDS = ("toy-vit", "toy-cnn", "identity")


class Backbone(nn.Module):
    """Base class.  Subclasses implement :meth:`features` on a float tensor."""

    kind: str = ""

    def __init__(self, input_shape, embed_dim):
        super().__init__()
        self.input_shape = tuple(int(s) for s in input_shape)
        self.embed_dim = int(embed_dim)
        self.frozen = False

    def features(self, x: torch.Tensor) -> torch.Tensor:
        raise NotImplementedError

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if tuple(x.shape[1:]) != self.input_shape:
            raise ShapeError(f"{self.kind} expects inputs of shape {self.input_shape}, "
                             f"got {tuple(x.shape[1:])}")
        return self.features(x)

    def config(self) -> dict:
        """Constructor arguments, enough to rebuild an empty copy."""
        raise NotImplementedError

    def peft_state(self) -> dict:
        """Which tuning modules are installed; rebuilt before loading a checkpoint."""
        return {}


class IdentityBackbone(Backbone):
    """Flattening embedder, used to classify precomputed features directly."""

    kind = "identity"

    def __init__(self, input_shape):
        super().__init__(input_shape, int(np.prod(input_shape)))

    def features(self, x):
        return x.reshape(len(x), -1)

    def config(self):
        return {"input_shape": list(self.input_shape)}


# --------------------------------------------------------------------------
# Vision transformer
# --------------------------------------------------------------------------

class Attention(nn.Module):
    def __init__(self, dim, num_heads):
        super().__init__()
        if dim % num_heads:
            raise ConfigurationError(f"embed_dim {dim} not divisible by {num_heads} heads")
        self.num_heads = num_heads
        self.qkv = nn.Linear(dim, 3 * dim)
        self.proj = nn.Linear(dim, dim)

    def forward(self, x):
        n, L, d = x.shape
        h = self.num_heads
        q, k, v = self.qkv(x).reshape(n, L, 3, h, d // h).permute(2, 0, 3, 1, 4)
        att = (q @ k.transpose(-2, -1)) / math.sqrt(d // h)
        out = att.softmax(dim=-1) @ v
        return self.proj(out.transpose(1, 2).reshape(n, L, d))


class Mlp(nn.Module):
    def __init__(self, dim, hidden):
        super().__init__()
        self.fc1 = nn.Linear(dim, hidden)
        self.fc2 = nn.Linear(hidden, dim)

    def forward(self, x):
        return self.fc2(F.gelu(self.fc1(x)))


class Block(nn.Module):
    """Pre-norm transformer block with optional SSF and adapter slots."""

    def __init__(self, dim, num_heads, mlp_ratio):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = Attention(dim, num_heads)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = Mlp(dim, dim * mlp_ratio)
        self.ssf_attn: Optional[nn.Module] = None
        self.ssf_mlp: Optional[nn.Module] = None
        self.adapter: Optional[nn.Module] = None

    def forward(self, x):
        a = self.attn(self.norm1(x))
        if self.ssf_attn is not None:
            a = self.ssf_attn(a)
        x = x + a
        h = self.norm2(x)
        m = self.mlp(h)
        if self.adapter is not None:
            m = self.adapter(m, h)
        if self.ssf_mlp is not None:
            m = self.ssf_mlp(m)
        return x + m


class ToyViT(Backbone):
    kind = "toy-vit"

    def __init__(self, image_size=32, patch_size=8, in_channels=3, embed_dim=64,
                 depth=2, num_heads=4, mlp_ratio=4, embed_after_norm=True):
        if image_size % patch_size:
            raise ConfigurationError(f"patch {patch_size} does not divide image side {image_size}")
        super().__init__((image_size, image_size, in_channels), embed_dim)
        self.image_size = image_size
        self.patch_size = patch_size
        self.in_channels = in_channels
        self.depth = depth
        self.num_heads = num_heads
        self.mlp_ratio = mlp_ratio
        self.embed_after_norm = embed_after_norm
        self.num_patches = (image_size // patch_size) ** 2

        self.patch_embed = nn.Linear(patch_size * patch_size * in_channels, embed_dim)
        self.cls_token = nn.Parameter(torch.zeros(1, 1, embed_dim))
        self.pos_embed = nn.Parameter(torch.zeros(1, 1 + self.num_patches, embed_dim))
        nn.init.trunc_normal_(self.cls_token, std=0.02)
        nn.init.trunc_normal_(self.pos_embed, std=0.02)
        self.blocks = nn.ModuleList(Block(embed_dim, num_heads, mlp_ratio) for _ in range(depth))
        self.norm = nn.LayerNorm(embed_dim)

        # visual prompts: None, or a ParameterList of (p, d) tensors, one (shallow) or one per block (deep)
        self.prompts: Optional[nn.ParameterList] = None
        self.prompt_mode: Optional[str] = None
        self.deep_prompts_replace = True

    @property
    def seq_len(self) -> int:
        return 1 + self.num_patches

    def patchify(self, x):
        n = len(x)
        p, g = self.patch_size, self.image_size // self.patch_size
        x = x.reshape(n, g, p, g, p, self.in_channels).permute(0, 1, 3, 2, 4, 5)
        return x.reshape(n, g * g, p * p * self.in_channels)

    def encode_patches(self, x):
        """Token sequence x_e of shape (N, L, d); row 0 is the classification token."""
        tokens = self.patch_embed(self.patchify(x))
        cls = self.cls_token.expand(len(x), -1, -1)
        return torch.cat([cls, tokens], dim=1) + self.pos_embed

    def _with_prompts(self, x, prompt):
        # [CLS, prompts, patches]: the classification token keeps position 0
        return torch.cat([x[:, :1], prompt.expand(len(x), -1, -1), x[:, 1:]], dim=1)

    def features(self, x):
        x = self.encode_patches(x)
        prompts = self.prompts
        for i, block in enumerate(self.blocks):
            if prompts is not None:
                if i == 0:
                    x = self._with_prompts(x, prompts[0])
                elif self.prompt_mode == "deep":
                    keep = x[:, 1 + prompts[i - 1].shape[0]:] if self.deep_prompts_replace else x[:, 1:]
                    x = self._with_prompts(torch.cat([x[:, :1], keep], dim=1), prompts[i])
            x = block(x)
        if self.embed_after_norm:
            x = self.norm(x)
        return x[:, 0]

    def config(self):
        return dict(image_size=self.image_size, patch_size=self.patch_size,
                    in_channels=self.in_channels, embed_dim=self.embed_dim, depth=self.depth,
                    num_heads=self.num_heads, mlp_ratio=self.mlp_ratio,
                    embed_after_norm=self.embed_after_norm)

    def peft_state(self):
        state = {}
        if self.prompts is not None:
            state["prompts"] = {"mode": self.prompt_mode, "length": int(self.prompts[0].shape[0]),
                                "replace": self.deep_prompts_replace}
        b = self.blocks[0]
        if b.ssf_attn is not None:
            state["ssf"] = True
        if b.adapter is not None:
            state["adapter"] = {"dim": int(b.adapter.down.shape[1])}
        return state


# --------------------------------------------------------------------------
# Convolutional network
# --------------------------------------------------------------------------

class ConvBlock(nn.Module):
    def __init__(self, cin, cout, kernel_size, stride):
        super().__init__()
        self.conv = nn.Conv2d(cin, cout, kernel_size, stride=stride,
                              padding=kernel_size // 2, bias=False)
        self.bn = nn.BatchNorm2d(cout)
        self.ssf: Optional[nn.Module] = None

    def forward(self, x):
        x = self.bn(self.conv(x))
        if self.ssf is not None:
            x = self.ssf(x.movedim(1, -1)).movedim(-1, 1)
        return F.relu(x)


class ToyCNN(Backbone):
    kind = "toy-cnn"

    def __init__(self, image_size=32, in_channels=3, channels=(16, 32, 64), kernel_size=3,
                 strides=None):
        channels = tuple(int(c) for c in channels)
        strides = tuple(strides) if strides is not None else (1,) + (2,) * (len(channels) - 1)
        if len(strides) != len(channels):
            raise ConfigurationError("one stride per conv block required")
        super().__init__((image_size, image_size, in_channels), channels[-1])
        self.image_size = image_size
        self.in_channels = in_channels
        self.channels = channels
        self.kernel_size = kernel_size
        self.strides = strides
        cins = (in_channels,) + channels[:-1]
        self.blocks = nn.ModuleList(ConvBlock(a, b, kernel_size, s)
                                    for a, b, s in zip(cins, channels, strides))

    def features(self, x):
        x = x.movedim(-1, 1)
        for block in self.blocks:
            x = block(x)
        return x.mean(dim=(2, 3))

    def config(self):
        return dict(image_size=self.image_size, in_channels=self.in_channels,
                    channels=list(self.channels), kernel_size=self.kernel_size,
                    strides=list(self.strides))

    def peft_state(self):
        return {"ssf": True} if self.blocks[0].ssf is not None else {}


def build_backbone(kind: str, **kwargs) -> Backbone:
    if kind == "toy-vit":
        return ToyViT(**kwargs)
    if kind == "toy-cnn":
        return ToyCNN(**kwargs)
    if kind == "identity":
        return IdentityBackbone(**kwargs)
    raise ConfigurationError(f"unknown backbone kind {kind!r}; expected one of {KINDS}")


# --------------------------------------------------------------------------
# Utilities
# --------------------------------------------------------------------------

def _as_tensor(x, backbone):
    dtype = next(backbone.parameters(), torch.empty(0)).dtype
    if isinstance(x, torch.Tensor):
        return x.to(dtype)
    return torch.as_tensor(np.asarray(x), dtype=dtype)


def embed(backbone: Backbone, X, batch_size: int = 256) -> np.ndarray:
    """Embeddings of ``X`` as a float64 array (N, d).  Never mutates ``backbone``."""
    was_training = backbone.training
    backbone.eval()
    out = []
    with torch.no_grad():
        for start in range(0, len(X), batch_size):
            out.append(backbone(_as_tensor(X[start:start + batch_size], backbone)).double().numpy())
    backbone.train(was_training)
    if not out:
        return np.zeros((0, backbone.embed_dim))
    return np.concatenate(out)


def encode_patches(backbone: ToyViT, X) -> np.ndarray:
    backbone.eval()
    with torch.no_grad():
        x = _as_tensor(X, backbone)
        if tuple(x.shape[1:]) != backbone.input_shape:
            raise ShapeError(f"expected {backbone.input_shape}, got {tuple(x.shape[1:])}")
        return backbone.encode_patches(x).double().numpy()


def clone(backbone: Backbone) -> Backbone:
    return copy.deepcopy(backbone)


def freeze(backbone: Backbone) -> Backbone:
    """Freeze in place (no gradients, eval mode) and return the same object."""
    for p in backbone.parameters():
        p.requires_grad_(False)
    backbone.eval()
    backbone.frozen = True
    return backbone


def param_hash(backbone: nn.Module, which: str = "all") -> str:
    """SHA-256 over named tensors.  ``which`` is "all", "parameters" or "buffers"."""
    if which == "parameters":
        items = backbone.named_parameters()
    elif which == "buffers":
        items = backbone.named_buffers()
    elif which == "all":
        items = backbone.state_dict().items()
    else:
        raise ValueError(f"which={which!r}")
    h = hashlib.sha256()
    for name, t in sorted(items, key=lambda kv: kv[0]):
        h.update(name.encode())
        h.update(t.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


def count_parameters(module: nn.Module) -> tuple[int, int]:
    """(total, trainable) scalar parameter counts."""
    total = sum(p.numel() for p in module.parameters())
    trainable = sum(p.numel() for p in module.parameters() if p.requires_grad)
    return total, trainable
