"""Binary file formats.

Tensor container (``.apt``), all integers little-endian u32::

    b"APERTNS1"
    header_len, header (UTF-8 JSON object)
    n_entries
    per entry: name_len, name (UTF-8), rank, dims[rank], dtype tag (u8: 0=f32, 1=f64)
    payloads, row-major, in entry order

Embedding cache::

    b"APEREMB1", version, n, dim, then n*dim float32 row-major
    sidecar "<path>.labels.txt": one integer label per line

Dataset directory: per split, ``<split>.apt`` holding an ``inputs`` tensor and
``<split>_labels.txt`` with one integer per line.  A split may instead be an
embedding cache ``<split>.emb`` (labels in its sidecar).
"""
from __future__ import annotations

import json
import os
import pickle
import struct
from pathlib import Path

import numpy as np
import torch

from .backbone import Backbone, build_backbone
from .exceptions import CorruptFileError, DataError
from .stream import ExampleSet

TENSOR_MAGIC = b"APERTNS1"
CACHE_MAGIC = b"APEREMB1"
CACHE_VERSION = 1
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_TAGS = {np.dtype("float32"): 0, np.dtype("float64"): 1}


class _Reader:
    def __init__(self, data: bytes, path):
        self.data, self.pos, self.path = data, 0, path

    def take(self, n):
        if self.pos + n > len(self.data):
            raise CorruptFileError(f"{self.path}: truncated at byte {self.pos} (wanted {n} more)")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self):
        return struct.unpack("<I", self.take(4))[0]


def save_tensors(path, tensors: dict, header: dict | None = None) -> None:
    header_bytes = json.dumps(header or {}, sort_keys=True).encode()
    table, payloads = [], []
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        if arr.dtype not in _TAGS:
            arr = arr.astype(np.float32)
        name_bytes = name.encode()
        table.append(struct.pack("<I", len(name_bytes)) + name_bytes
                     + struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
                     + struct.pack("<B", _TAGS[arr.dtype]))
        payloads.append(np.ascontiguousarray(arr, dtype=_DTYPES[_TAGS[arr.dtype]]).tobytes())
    with open(path, "wb") as fh:
        fh.write(TENSOR_MAGIC)
        fh.write(struct.pack("<I", len(header_bytes)) + header_bytes)
        fh.write(struct.pack("<I", len(table)))
        fh.writelines(table)
        fh.writelines(payloads)


def load_tensors(path) -> tuple[dict, dict]:
    """Return ``(tensors, header)``; raises CorruptFileError on malformed input."""
    r = _Reader(Path(path).read_bytes(), path)
    if r.take(8) != TENSOR_MAGIC:
        raise CorruptFileError(f"{path}: not a tensor container")
    try:
        header = json.loads(r.take(r.u32()).decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CorruptFileError(f"{path}: bad header") from exc
    entries = []
    for _ in range(r.u32()):
        name = r.take(r.u32()).decode()
        rank = r.u32()
        dims = struct.unpack(f"<{rank}I", r.take(4 * rank))
        tag = r.take(1)[0]
        if tag not in _DTYPES:
            raise CorruptFileError(f"{path}: unknown dtype tag {tag}")
        entries.append((name, dims, _DTYPES[tag]))
    tensors = {}
    for name, dims, dtype in entries:
        count = int(np.prod(dims, dtype=np.int64))
        raw = r.take(count * dtype.itemsize)
        tensors[name] = np.frombuffer(raw, dtype=dtype).reshape(dims).astype(dtype.newbyteorder("="))
    if r.pos != len(r.data):
        raise CorruptFileError(f"{path}: {len(r.data) - r.pos} trailing bytes")
    return tensors, header


# --------------------------------------------------------------------------
# Backbone checkpoints
# --------------------------------------------------------------------------

def save_backbone(backbone: Backbone, path) -> None:
    state = {k: v.detach().cpu().numpy() for k, v in backbone.state_dict().items()
             if v.is_floating_point()}
    header = {"kind": backbone.kind, "config": backbone.config(), "embed_dim": backbone.embed_dim,
              "input_shape": list(backbone.input_shape), "peft": backbone.peft_state()}
    save_tensors(path, state, header)


def load_backbone(path) -> Backbone:
    from .peft import restore_modules

    tensors, header = load_tensors(path)
    try:
        backbone = build_backbone(header["kind"], **header["config"])
    except KeyError as exc:
        raise CorruptFileError(f"{path}: checkpoint header lacks {exc}") from exc
    if header.get("peft"):
        restore_modules(backbone, header["peft"])
    expected = {k for k, v in backbone.state_dict().items() if v.is_floating_point()}
    if set(tensors) != expected:
        raise CorruptFileError(f"{path}: tensor names do not match a {header['kind']} backbone "
                               f"(missing {sorted(expected - set(tensors))[:3]}, "
                               f"unexpected {sorted(set(tensors) - expected)[:3]})")
    backbone.load_state_dict({k: torch.from_numpy(v.copy()) for k, v in tensors.items()},
                             strict=False)
    for p in backbone.parameters():
        p.requires_grad_(False)
    backbone.eval()
    backbone.frozen = True
    return backbone


# --------------------------------------------------------------------------
# Embedding cache
# --------------------------------------------------------------------------

def labels_path(path) -> str:
    return f"{path}.labels.txt"


def write_labels(path, labels) -> None:
    with open(path, "w") as fh:
        fh.writelines(f"{int(v)}\n" for v in labels)


def read_labels(path) -> np.ndarray:
    with open(path) as fh:
        try:
            return np.array([int(line) for line in fh if line.strip()], dtype=np.int64)
        except ValueError as exc:
            raise DataError(f"{path}: labels must be one integer per line") from exc


def write_embedding_cache(path, features, labels=None) -> None:
    F = np.ascontiguousarray(features, dtype="<f4")
    if F.ndim != 2:
        raise DataError(f"embedding cache needs an (n, dim) matrix, got shape {F.shape}")
    n, dim = F.shape
    with open(path, "wb") as fh:
        fh.write(CACHE_MAGIC + struct.pack("<III", CACHE_VERSION, n, dim))
        fh.write(F.tobytes())
    if labels is not None:
        if len(labels) != n:
            raise DataError(f"{len(labels)} labels for {n} rows")
        write_labels(labels_path(path), labels)


def read_embedding_cache(path) -> tuple[np.ndarray, np.ndarray | None]:
    """Return ``(features float32 (n, dim), labels or None)``."""
    r = _Reader(Path(path).read_bytes(), path)
    if r.take(8) != CACHE_MAGIC:
        raise CorruptFileError(f"{path}: not an embedding cache")
    version, n, dim = r.u32(), r.u32(), r.u32()
    if version != CACHE_VERSION:
        raise CorruptFileError(f"{path}: unsupported cache version {version}")
    expected = n * dim * 4
    if len(r.data) - r.pos != expected:
        raise CorruptFileError(f"{path}: payload is {len(r.data) - r.pos} bytes, expected {expected}")
    F = np.frombuffer(r.take(expected), dtype="<f4").reshape(n, dim).astype(np.float32)
    labels = None
    if os.path.exists(labels_path(path)):
        labels = read_labels(labels_path(path))
        if len(labels) != n:
            raise CorruptFileError(f"{path}: {len(labels)} labels for {n} rows")
    return F, labels


# --------------------------------------------------------------------------
# Datasets
# --------------------------------------------------------------------------

def save_dataset_dir(root, splits: dict) -> None:
    """Write ``{split: ExampleSet}`` in the dataset directory layout."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    for split, data in splits.items():
        save_tensors(root / f"{split}.apt", {"inputs": np.asarray(data.X, dtype=np.float32)})
        write_labels(root / f"{split}_labels.txt", data.y)


def load_split(root, split: str) -> ExampleSet:
    root = Path(root)
    if (root / f"{split}.apt").exists():
        tensors, _ = load_tensors(root / f"{split}.apt")
        if "inputs" not in tensors:
            raise CorruptFileError(f"{root / f'{split}.apt'}: no 'inputs' tensor")
        labels = read_labels(root / f"{split}_labels.txt")
        return ExampleSet(tensors["inputs"], labels)
    if (root / f"{split}.emb").exists():
        F, labels = read_embedding_cache(root / f"{split}.emb")
        if labels is None:
            raise DataError(f"{root / f'{split}.emb'} has no labels sidecar")
        return ExampleSet(F, labels)
    raise DataError(f"no split {split!r} under {root}")


def load_cifar100(root) -> tuple[ExampleSet, ExampleSet]:
    """Read the python-pickle release of CIFAR-100 (``train``/``test`` files, fine labels).

    Pixels are scaled to [0, 1] and returned channel-last (N, 32, 32, 3).
    """
    def read(name):
        with open(Path(root) / name, "rb") as fh:
            d = pickle.load(fh, encoding="latin1")
        X = np.asarray(d["data"], dtype=np.float32).reshape(-1, 3, 32, 32).transpose(0, 2, 3, 1) / 255.0
        return ExampleSet(np.ascontiguousarray(X), np.asarray(d["fine_labels"], dtype=np.int64))

    return read("train"), read("test")


# --------------------------------------------------------------------------
# Prototype banks, projectors, learner state
# --------------------------------------------------------------------------

def save_bank(bank, path) -> None:
    save_tensors(path, {"prototypes": bank.matrix()},
                 {"class_ids": list(bank.registered_classes), "feature_dim": bank.feature_dim})


def load_bank(path):
    from .prototypes import PrototypeBank

    tensors, header = load_tensors(path)
    bank = PrototypeBank(header["feature_dim"])
    for c, p in zip(header["class_ids"], tensors["prototypes"]):
        bank.register(c, p)
    return bank


def save_projector(projector, path) -> None:
    header = {"method": projector.method, "n_components": projector.n_components,
              "random_state": projector.random_state, "n_features_in": projector.n_features_in_}
    if projector.method == "pca":
        tensors = {"mean": projector.mean_, "components": projector.components_,
                   "explained_variance": projector.explained_variance_}
    else:
        tensors = {"indices": projector.indices_.astype(np.float64)}
    save_tensors(path, tensors, header)


def load_projector(path):
    from .projection import FeatureProjector

    tensors, header = load_tensors(path)
    p = FeatureProjector(header["method"], header["n_components"], header["random_state"])
    p.n_features_in_ = header["n_features_in"]
    if p.method == "pca":
        p.mean_, p.components_ = tensors["mean"], tensors["components"]
        p.explained_variance_ = tensors["explained_variance"]
    else:
        p.indices_ = tensors["indices"].astype(np.int64)
    return p


def save_learner(learner, root) -> None:
    """Persist what a fitted learner needs to predict: checkpoints, bank, projector."""
    from .learner import AperClassifier

    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    meta = {"classes": [int(c) for c in learner.classes_], "stage": learner.stage_,
            "batch_size": learner.batch_size}
    if isinstance(learner, AperClassifier):
        meta.update(kind="prototype", mode=learner.mode, adapt_stages=learner.frozen_after_)
        save_backbone(learner.pretrained_, root / "pretrained.apt")
        if learner.adapted_ is not None:
            save_backbone(learner.adapted_, root / "adapted.apt")
        save_bank(learner.bank_, root / "prototypes.apt")
        if learner.projector_ is not None:
            save_projector(learner.projector_, root / "projector.apt")
    else:
        meta.update(kind="finetune")
        save_backbone(learner.model_, root / "model.apt")
        save_tensors(root / "head.apt", {"weight": learner.head_.weight.detach().numpy()})
    (root / "learner.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")


def load_learner(root):
    """Rebuild a learner saved by :func:`save_learner`, ready for ``predict``."""
    from torch import nn

    from .learner import AperClassifier, SequentialFinetuneClassifier
    from .prototypes import CosinePrototypeClassifier

    root = Path(root)
    meta = json.loads((root / "learner.json").read_text())
    if meta["kind"] == "prototype":
        pretrained = load_backbone(root / "pretrained.apt")
        learner = AperClassifier(pretrained, mode=meta["mode"], adapt_stages=meta["adapt_stages"],
                                 batch_size=meta["batch_size"])
        learner.pretrained_ = pretrained
        learner.adapted_ = load_backbone(root / "adapted.apt") if (root / "adapted.apt").exists() else None
        learner.projector_ = load_projector(root / "projector.apt") if (root / "projector.apt").exists() else None
        learner.frozen_after_ = meta["adapt_stages"]
        clf = CosinePrototypeClassifier()
        clf.bank_ = load_bank(root / "prototypes.apt")
        clf.n_features_in_ = clf.bank_.feature_dim
        clf.classes_ = np.array(clf.bank_.registered_classes)
        learner.classifier_ = clf
    else:
        model = load_backbone(root / "model.apt")
        learner = SequentialFinetuneClassifier(model, batch_size=meta["batch_size"])
        learner.model_ = model
        weight = torch.from_numpy(load_tensors(root / "head.apt")[0]["weight"].copy())
        learner.head_ = nn.Linear(weight.shape[1], weight.shape[0], bias=False)
        with torch.no_grad():
            learner.head_.weight.copy_(weight)
    learner.classes_ = np.array(meta["classes"], dtype=np.int64)
    learner.stage_ = meta["stage"]
    return learner
