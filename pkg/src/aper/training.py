"""Minibatch cross-entropy training shared by pretraining, adaptation and finetuning."""
from __future__ import annotations

import logging
from typing import Callable, Iterable, Optional

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

logger = logging.getLogger(__name__)


def train_cross_entropy(model: nn.Module, head: nn.Module, X, y, params: Iterable[nn.Parameter],
                        *, epochs: int, batch_size: int, lr: float, momentum: float = 0.9,
                        weight_decay: float = 0.0, seed: int = 0,
                        regularizer: Optional[Callable[[], torch.Tensor]] = None,
                        train_mode: bool = True) -> list[float]:
    """SGD with momentum and per-epoch cosine annealing on ``head(model(x))``.

    ``y`` must already be mapped to head columns 0..K-1.  Returns the mean
    training loss of every epoch.  ``train_mode`` controls BatchNorm behaviour
    of ``model`` (False keeps running statistics untouched).
    """
    params = [p for p in params if p.requires_grad]
    if epochs == 0 or not params:
        return []
    first = next(iter(model.parameters()), None)
    dtype = first.dtype if first is not None else torch.get_default_dtype()
    X = torch.as_tensor(np.asarray(X), dtype=dtype)
    y = torch.as_tensor(np.asarray(y), dtype=torch.long)
    opt = torch.optim.SGD(params, lr=lr, momentum=momentum, weight_decay=weight_decay)
    sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, T_max=epochs)
    gen = torch.Generator().manual_seed(int(seed))

    model.train(train_mode)
    head.train()
    history = []
    for epoch in range(epochs):
        order = torch.randperm(len(y), generator=gen)
        total, seen = 0.0, 0
        for start in range(0, len(y), batch_size):
            idx = order[start:start + batch_size]
            loss = F.cross_entropy(head(model(X[idx])), y[idx])
            if regularizer is not None:
                loss = loss + regularizer()
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += loss.item() * len(idx)
            seen += len(idx)
        sched.step()
        history.append(total / seen)
        logger.debug("epoch %d/%d loss %.4f", epoch + 1, epochs, history[-1])
    model.eval()
    return history


def pretrain(backbone: nn.Module, X, y, *, epochs: int = 30, batch_size: int = 64,
             lr: float = 0.05, momentum: float = 0.9, weight_decay: float = 1e-4,
             seed: int = 0) -> list[float]:
    """Supervised pre-training of ``backbone`` in place on a source distribution.

    A bias-free linear head over the source classes is trained jointly and
    dropped afterwards.  Returns per-epoch losses.
    """
    classes, targets = np.unique(np.asarray(y), return_inverse=True)
    first = next(iter(backbone.parameters()))
    with torch.random.fork_rng():
        torch.manual_seed(seed)
        head = nn.Linear(backbone.embed_dim, len(classes), bias=False).to(first.dtype)
    for p in backbone.parameters():
        p.requires_grad_(True)
    return train_cross_entropy(backbone, head, X, targets,
                               list(backbone.parameters()) + list(head.parameters()),
                               epochs=epochs, batch_size=batch_size, lr=lr, momentum=momentum,
                               weight_decay=weight_decay, seed=seed)
