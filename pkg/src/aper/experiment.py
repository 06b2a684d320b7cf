"""Turn an :class:`ExperimentConfig` into data, a backbone, a stream and a run on disk."""
from __future__ import annotations

import csv
import dataclasses
import logging
from pathlib import Path

import numpy as np
import torch

from . import io
from .backbone import Backbone, build_backbone, freeze
from .config import ExperimentConfig, dump_config, sub_seed
from .evaluation import RunSummary, summarize, summary_line, write_metrics_csv, write_summary_csv
from .exceptions import ConfigurationError, DataError
from .learner import run
from .peft import count_adaptation_parameters
from .stream import ExampleSet, IncrementalStream, build_stream, make_synthetic
from .training import pretrain

logger = logging.getLogger(__name__)

STATUS_FILE = "STATUS"


def load_data(config: ExperimentConfig) -> tuple[ExampleSet, ExampleSet]:
    ds = config.dataset
    if ds.source == "synthetic":
        spec = ds.synthetic.spec(class_seed=sub_seed(config.seed, "classes"))
        return make_synthetic(spec, sample_seed=sub_seed(config.seed, "data"))
    if ds.source == "directory":
        return io.load_split(ds.path, "train"), io.load_split(ds.path, "test")
    return io.load_cifar100(ds.path)


def _input_shape(config: ExperimentConfig, data: ExampleSet | None = None) -> tuple:
    if data is not None:
        return tuple(data.X.shape[1:])
    if config.dataset.source == "synthetic":
        return tuple(config.dataset.synthetic.shape)
    if config.dataset.source == "cifar100":
        return (32, 32, 3)
    return tuple(io.load_split(config.dataset.path, "train").X.shape[1:])


def build_configured_backbone(config: ExperimentConfig, input_shape) -> Backbone:
    """Fresh backbone of the configured kind, sized to ``input_shape``, initialised from the init seed."""
    bc = config.backbone
    options = dict(bc.options)
    if bc.kind == "identity":
        options.setdefault("input_shape", list(input_shape))
    else:
        if len(input_shape) != 3 or input_shape[0] != input_shape[1]:
            raise ConfigurationError(f"backbone.kind: {bc.kind} needs square (H, W, C) inputs, "
                                     f"data has shape {input_shape}")
        options.setdefault("image_size", int(input_shape[0]))
        options.setdefault("in_channels", int(input_shape[2]))
    with torch.random.fork_rng():
        torch.manual_seed(sub_seed(config.seed, "init"))
        try:
            return build_backbone(bc.kind, **options)
        except TypeError as exc:
            raise ConfigurationError(f"backbone.options: {exc}") from None


def prepare_backbone(config: ExperimentConfig, input_shape) -> Backbone:
    """Load the configured checkpoint, or build and (optionally) pretrain a toy backbone."""
    bc = config.backbone
    if bc.checkpoint is not None:
        backbone = io.load_backbone(bc.checkpoint)
    else:
        backbone = build_configured_backbone(config, input_shape)
        if bc.pretrain is not None and bc.kind != "identity":
            pc = bc.pretrain
            source, _ = make_synthetic(pc.spec(input_shape, sub_seed(config.seed, "source")),
                                       sample_seed=sub_seed(config.seed, "pretrain"))
            losses = pretrain(backbone, source.X, source.y, epochs=pc.epochs,
                              batch_size=pc.batch_size, lr=pc.lr, momentum=pc.momentum,
                              weight_decay=pc.weight_decay, seed=sub_seed(config.seed, "pretrain"))
            if losses:
                logger.info("pretrained %s: loss %.4f -> %.4f", bc.kind, losses[0], losses[-1])
    if backbone.input_shape != tuple(input_shape):
        raise DataError(f"backbone expects inputs {backbone.input_shape}, data has {tuple(input_shape)}")
    return freeze(backbone)


def prepare(config: ExperimentConfig) -> tuple[IncrementalStream, Backbone]:
    train, test = load_data(config)
    total = int(max(train.y.max(), test.y.max())) + 1
    stream = build_stream(train, test, config.stream.build(total, sub_seed(config.seed, "stream")))
    return stream, prepare_backbone(config, _input_shape(config, train))


def execute(config: ExperimentConfig, stream: IncrementalStream, backbone: Backbone, on_record=None):
    """Run the configured learner on a prepared stream; returns ``(learner, records)``."""
    proj = config.projection
    return run(stream, backbone, config.learner_config(),
               projection=proj.method if proj else None, n_components=proj.k if proj else None,
               projection_seed=sub_seed(config.seed, "projection"), on_record=on_record)


def _write_curve(records, out: Path, plot: bool) -> None:
    with open(out / "curve.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["stage", "n_seen_classes", "accuracy"])
        for r in records:
            w.writerow([r.stage, r.n_seen_classes, repr(float(r.accuracy))])
    if not plot:
        return
    try:
        import matplotlib

        matplotlib.use("Agg")
        import matplotlib.pyplot as plt

        fig, ax = plt.subplots(figsize=(5, 3.5))
        ax.plot([r.n_seen_classes for r in records], [100 * float(r.accuracy) for r in records],
                marker="o")
        ax.set_xlabel("classes seen")
        ax.set_ylabel("accuracy (%)")
        fig.tight_layout()
        fig.savefig(out / "curve.png", dpi=100)
        plt.close(fig)
    except Exception as exc:  # rendering is optional
        logger.warning("could not render curve.png: %s", exc)


def run_experiment(config: ExperimentConfig, output_dir=None, force: bool = False) -> RunSummary:
    """Run ``config`` and write its artifacts under ``output_dir`` (default ``config.output_dir``).

    Files: ``config.yaml``, ``metrics.csv`` (rewritten after every stage),
    ``summary.csv``, ``summary.txt``, ``curve.csv`` (+ ``curve.png`` when
    matplotlib is usable), ``state/`` (final learner) and ``STATUS``, which
    reads ``running``, ``complete`` or ``failed: <reason>``.
    """
    out = Path(output_dir if output_dir is not None else config.output_dir)
    if out.exists() and any(out.iterdir()) and not force:
        raise FileExistsError(f"output directory {out} is not empty (use --force to overwrite)")
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.yaml").write_text(dump_config(config))
    status = out / STATUS_FILE
    status.write_text("running\n")
    records = []

    def on_record(rec):
        records.append(rec)
        write_metrics_csv(records, out / "metrics.csv")

    try:
        stream, backbone = prepare(config)
        learner, _ = execute(config, stream, backbone, on_record=on_record)
        summary = summarize(records)
        write_summary_csv(summary, out / "summary.csv")
        (out / "summary.txt").write_text(summary_line(summary) + "\n")
        _write_curve(records, out, config.plot)
        io.save_learner(learner, out / "state")
    except BaseException as exc:
        status.write_text(f"failed: {type(exc).__name__}: {exc}\n")
        raise
    status.write_text("complete\n")
    return summary


def report_params(config: ExperimentConfig) -> list[tuple[str, int, int, int]]:
    """Rows ``(component, total, trainable, frozen)`` for the configured mode and method.

    ``adaptation`` is the model optimised on the first task (backbone, tuning
    modules, temporary head); ``inference`` is what classification keeps.
    """
    shape = _input_shape(config)
    backbone = (io.load_backbone(config.backbone.checkpoint) if config.backbone.checkpoint
                else build_configured_backbone(config, shape))
    lc = config.learner_config()
    if config.dataset.source == "synthetic":
        total_classes = config.dataset.synthetic.n_classes
    else:
        train, _ = load_data(config)
        total_classes = int(train.y.max()) + 1
    first_task = config.stream.build(total_classes, 0).task_sizes()[0]
    base = sum(p.numel() for p in backbone.parameters())
    rows = [("backbone", base, 0, base)]
    if lc.mode == "finetune-seq" or lc.adapt_stages > 0:
        peft = lc.peft if lc.mode != "finetune-seq" else dataclasses.replace(lc.peft, method="full")
        c = count_adaptation_parameters(backbone, peft, first_task)
        rows.append(("adaptation", c["total"], c["trainable"], c["frozen"]))
        tuned = c["total"] - c["head"]
        if lc.mode == "aper":
            inference = base + tuned
        elif lc.mode == "finetune-seq":
            inference = tuned + backbone.embed_dim * total_classes
        else:
            inference = tuned
    else:
        inference = base
    rows.append(("inference", inference, 0, inference))
    return rows


def format_param_table(rows) -> str:
    lines = [f"{'component':<12}{'total':>12}{'trainable':>12}{'frozen':>12}"]
    lines += [f"{name:<12}{t:>12,}{tr:>12,}{fr:>12,}" for name, t, tr, fr in rows]
    return "\n".join(lines)


def embed_dataset(checkpoint, data_dir, out, split: str = "train", batch_size: int = 256) -> np.ndarray:
    """Write the embeddings of one dataset split to an embedding cache (rows in dataset order)."""
    from .backbone import embed

    backbone = io.load_backbone(checkpoint)
    data = io.load_split(data_dir, split)
    if tuple(data.X.shape[1:]) != backbone.input_shape:
        raise DataError(f"checkpoint expects inputs {backbone.input_shape}, "
                        f"{split} split has {tuple(data.X.shape[1:])}")
    feats = embed(backbone, data.X, batch_size).astype(np.float32)
    io.write_embedding_cache(out, feats, data.y)
    return feats
