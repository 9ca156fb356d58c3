"""Experiment driver: baseline/search variants, artifacts, ablation grids.

Every run writes the same artifact tree under <outdir>/<variant>/:
metrics.csv (fixed column order), structures.json, stats.json,
manifest.json, structures.dot, and model.bin. Files are written
atomically (write then rename) and are byte-identical across re-runs of
the same spec and seed.
"""

import csv
import hashlib
import json
import os
from dataclasses import dataclass, field, replace

import numpy as np

from . import __version__
from . import engine as eng
from .cell import DiscreteStructure, init_classifier, pool_and_classify
from .container import read_container, write_container
from .engine import ConfigurationError
from .kernels import BACKEND
from .ops import (
    channel_project,
    difference_propagation,
    feature_aggregation,
    identity_op,
    init_background,
    init_bilinear,
    init_node_attention,
    init_temporal_conv,
    node_attention,
    temporal_convolution,
    zero_op,
)
from .ops import background_incorporation
from .search import (
    LOG_COLUMNS,
    Model,
    PlateauSchedule,
    SGD,
    SearchConfig,
    alternating_search,
    discrete_finetune,
    evaluate_discrete,
    make_batch,
    structure_statistics,
    train_val_split,
)
from .synthdata import GeneratorSpec, generate, load

VARIANTS = ("global_pooling", "pooling_over_rois", "single_op", "non_adaptive_search", "adaptive_search")
SINGLE_OPS = ("zero", "identity", "feat_aggr", "diff_prop", "temp_conv", "back_incor", "node_att")


@dataclass
class ExperimentSpec:
    variant: str
    outdir: str
    search: SearchConfig = field(default_factory=SearchConfig)
    generator: GeneratorSpec = None
    dataset_path: str = None
    single_op: str = None

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ConfigurationError(f"unknown variant {self.variant!r}")
        if (self.generator is None) == (self.dataset_path is None):
            raise ConfigurationError("exactly one of generator or dataset_path required")
        if self.variant == "single_op":
            if self.single_op not in SINGLE_OPS:
                raise ConfigurationError(f"single_op must be one of {SINGLE_OPS}")
        elif self.single_op is not None:
            raise ConfigurationError("single_op only applies to the single_op variant")

    def to_dict(self):
        return {
            "variant": self.variant,
            "outdir": self.outdir,
            "search": self.search.to_dict(),
            "generator": None if self.generator is None else self.generator.to_dict(),
            "dataset_path": self.dataset_path,
            "single_op": self.single_op,
        }

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["search"] = SearchConfig.from_dict(d["search"])
        if d.get("generator") is not None:
            d["generator"] = GeneratorSpec.from_dict(d["generator"])
        return cls(**d)

    def run_name(self):
        if self.variant == "single_op":
            return f"single_op_{self.single_op}"
        return self.variant


# ---------------------------------------------------------------------------
# baseline models
# ---------------------------------------------------------------------------

class GlobalPoolingModel:
    """Linear classifier on the sample's global feature alone."""

    def __init__(self, global_dim, n_classes, rng):
        self.classifier = init_classifier(global_dim, n_classes, rng=rng)

    def named_parameters(self):
        return self.classifier.named_tensors()

    def parameters(self):
        return [t for _, t in self.named_parameters()]

    def forward(self, batch, training, rng):
        gf = batch["global"]
        return eng.add(eng.matmul(gf, eng.transpose(self.classifier.weight)), self.classifier.bias)


class RoiPoolingModel:
    """Mean over linearly projected node features into a classifier."""

    def __init__(self, channels, width, n_classes, rng):
        self.project = eng.parameter(rng.standard_normal((width, channels)) / np.sqrt(channels))
        self.classifier = init_classifier(width, n_classes, rng=rng)

    def named_parameters(self):
        return [("project/W", self.project)] + self.classifier.named_tensors()

    def parameters(self):
        return [t for _, t in self.named_parameters()]

    def forward(self, batch, training, rng):
        h = channel_project(batch["nodes"], self.project)
        pooled = eng.mean_(h.features, axis=-2)
        return eng.add(eng.matmul(pooled, eng.transpose(self.classifier.weight)), self.classifier.bias)


class SingleOpModel:
    """Projection, one graph operation, pooling with the global feature."""

    def __init__(self, channels, global_dim, width, n_classes, grid_cells, op_kind, rng,
                 m_top=5, kernel_size=7, identity_dropout=0.3):
        self.op_kind = op_kind
        self.identity_dropout = identity_dropout
        self.project = eng.parameter(rng.standard_normal((width, channels)) / np.sqrt(channels))
        if op_kind in ("feat_aggr", "diff_prop"):
            self.op_params = init_bilinear(width, width, rng)
        elif op_kind == "temp_conv":
            self.op_params = init_temporal_conv(width, width, rng, kernel_size=kernel_size)
        elif op_kind == "back_incor":
            self.op_params = init_background(width, width, grid_cells, rng)
        elif op_kind == "node_att":
            self.op_params = init_node_attention(m_top, rng)
        else:
            self.op_params = None
        self.classifier = init_classifier(width + global_dim, n_classes, rng=rng)

    def named_parameters(self):
        out = [("project/W", self.project)]
        if self.op_params is not None:
            out.extend(self.op_params.named_tensors(f"op:{self.op_kind}"))
        out.extend(self.classifier.named_tensors())
        return out

    def parameters(self):
        return [t for _, t in self.named_parameters()]

    def forward(self, batch, training, rng):
        h = channel_project(batch["nodes"], self.project)
        kind = self.op_kind
        if kind == "zero":
            h = zero_op(h)
        elif kind == "identity":
            h = identity_op(h, self.identity_dropout, rng, training)
        elif kind == "feat_aggr":
            h = feature_aggregation(h, self.op_params)
        elif kind == "diff_prop":
            h = difference_propagation(h, self.op_params)
        elif kind == "temp_conv":
            h = temporal_convolution(h, self.op_params)
        elif kind == "back_incor":
            h = background_incorporation(h, batch["bg"], self.op_params)
        elif kind == "node_att":
            h = node_attention(h, self.op_params)
        return pool_and_classify(h, batch["global"], self.classifier)


def _simple_train(model, dataset, train_idx, val_idx, config, labels=None, max_epochs=None):
    """SGD with plateau decay on plain cross-entropy; shared by all
    non-search variants. Returns log rows in the standard schema."""
    from .search import DivergenceError, _batched

    labels = dataset.labels if labels is None else labels
    sgd = SGD(model.parameters(), lr=config.lr_ops, momentum=config.momentum)
    schedule = PlateauSchedule(config.lr_ops, factor=config.lr_decay_factor,
                               patience=config.plateau_patience,
                               floor=config.lr_ops * config.lr_decay_factor ** 2)
    shuffle_rng = np.random.default_rng(np.random.SeedSequence([config.seed, 31]))
    dropout_rng = np.random.default_rng(np.random.SeedSequence([config.seed, 32]))

    def batch_labels(chunk):
        return labels[chunk]

    def eval_on(indices):
        losses, correct = 0.0, 0
        for chunk in _batched(indices, config.eval_batch_size):
            batch = make_batch(dataset, chunk)
            logits = model.forward(batch, training=False, rng=dropout_rng)
            loss = eng.softmax_cross_entropy(logits, batch_labels(chunk))
            losses += loss.data.item() * len(chunk)
            correct += int((np.argmax(logits.data, axis=-1) == batch_labels(chunk)).sum())
        return losses / len(indices), correct / len(indices)

    log = []
    for epoch in range(max_epochs or config.max_finetune_epochs):
        sgd.lr = schedule.lr
        perm = shuffle_rng.permutation(len(train_idx))
        total, n_batches = 0.0, 0
        for chunk in _batched(train_idx[perm], config.batch_size):
            batch = make_batch(dataset, chunk)
            try:
                logits = model.forward(batch, training=True, rng=dropout_rng)
                loss = eng.softmax_cross_entropy(logits, batch_labels(chunk))
                for p in model.parameters():
                    p.zero_grad()
                loss.backward()
            except eng.NonFiniteError as exc:
                raise DivergenceError(f"training diverged: {exc}") from exc
            sgd.step()
            total += loss.data.item()
            n_batches += 1
        val_loss, val_acc = eval_on(val_idx)
        log.append({
            "round": 0, "phase": "train", "epoch": epoch,
            "train_loss": total / max(n_batches, 1), "val_loss": val_loss,
            "val_acc": val_acc, "l_var": 0.0, "n_distinct_signatures": 0,
        })
        if schedule.update(val_loss):
            break
    return log


def single_op_family_accuracy(dataset, family, op_kind, seed=0, epochs=12, width=16):
    """Validation accuracy of one operation on one family's two classes."""
    f_idx = dataset.spec.families.index(family)
    members = np.nonzero(dataset.group_ids == f_idx)[0]
    sub = dataset.subset(members)
    labels = sub.labels - 2 * f_idx
    config = SearchConfig(seed=seed, width=width)
    train_idx, val_idx = train_val_split(len(sub), config.val_fraction, seed)
    rng = np.random.default_rng(np.random.SeedSequence([seed, 41]))
    if op_kind == "global_pooling":
        model = GlobalPoolingModel(dataset.spec.global_dim, 2, rng)
    else:
        model = SingleOpModel(
            dataset.spec.channels, dataset.spec.global_dim, width, 2,
            int(np.prod(dataset.spec.grid)), op_kind, rng,
            m_top=config.m_top, kernel_size=config.kernel_size,
        )
    log = _simple_train(model, sub, train_idx, val_idx, config, labels=labels, max_epochs=epochs)
    return log[-1]["val_acc"]


# ---------------------------------------------------------------------------
# artifact io
# ---------------------------------------------------------------------------

def atomic_write_text(path, text):
    tmp = f"{path}.tmp"
    with open(tmp, "w") as f:
        f.write(text)
    os.replace(tmp, path)


def write_json(path, obj):
    atomic_write_text(path, json.dumps(obj, sort_keys=True, indent=2) + "\n")


def write_metrics_csv(path, rows):
    lines = [",".join(LOG_COLUMNS)]
    for r in rows:
        lines.append(",".join(repr(r[c]) if isinstance(r[c], float) else str(r[c]) for c in LOG_COLUMNS))
    atomic_write_text(path, "\n".join(lines) + "\n")


def read_metrics_csv(path):
    with open(path) as f:
        reader = csv.DictReader(f)
        return [dict(row) for row in reader]


def config_hash(spec_dict):
    blob = json.dumps(spec_dict, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()


_MODEL_MAGIC = b"GOPSMODEL1\n"


def save_model(path, spec, model, dims):
    named = model.named_parameters() if not isinstance(model, Model) else (
        model.named_op_parameters() + model.structure.named_parameters()
    )
    meta = {
        "format_version": 1,
        "variant": spec.variant,
        "single_op": spec.single_op,
        "search": spec.search.to_dict(),
        "dims": dims,
    }
    write_container(path, _MODEL_MAGIC, meta, [(n, t.data) for n, t in named])


def load_model(path):
    meta, arrays = read_container(path, _MODEL_MAGIC)
    config = SearchConfig.from_dict(meta["search"])
    dims = meta["dims"]
    rng = np.random.default_rng(0)
    variant = meta["variant"]
    if variant in ("adaptive_search", "non_adaptive_search"):
        model = Model(dims["channels"], dims["global_dim"], dims["n_classes"],
                      dims["grid_cells"], config, rng)
        named = model.named_op_parameters() + model.structure.named_parameters()
    elif variant == "global_pooling":
        model = GlobalPoolingModel(dims["global_dim"], dims["n_classes"], rng)
        named = model.named_parameters()
    elif variant == "pooling_over_rois":
        model = RoiPoolingModel(dims["channels"], config.width, dims["n_classes"], rng)
        named = model.named_parameters()
    elif variant == "single_op":
        model = SingleOpModel(dims["channels"], dims["global_dim"], config.width,
                              dims["n_classes"], dims["grid_cells"], meta["single_op"], rng,
                              m_top=config.m_top, kernel_size=config.kernel_size,
                              identity_dropout=config.identity_dropout)
        named = model.named_parameters()
    else:
        raise ValueError(f"unknown variant in model file: {variant}")
    for name, tensor in named:
        if name not in arrays:
            raise ValueError(f"model file missing parameter {name}")
        if arrays[name].shape != tensor.data.shape:
            raise ValueError(f"parameter {name} has shape {arrays[name].shape}, expected {tensor.data.shape}")
        tensor.data[:] = arrays[name]
    return model, meta


# ---------------------------------------------------------------------------
# running experiments
# ---------------------------------------------------------------------------

def _per_family_accuracy(correct_mask, dataset, indices):
    out = {}
    for f_idx, family in enumerate(dataset.spec.families):
        members = dataset.group_ids[indices] == f_idx
        if members.any():
            out[family] = float(correct_mask[members].mean())
    return out


def _eval_simple(model, dataset, indices, config):
    from .search import _batched

    correct = np.zeros(len(indices), dtype=bool)
    rng = np.random.default_rng(0)
    pos = 0
    for chunk in _batched(indices, config.eval_batch_size):
        batch = make_batch(dataset, chunk)
        logits = model.forward(batch, training=False, rng=rng)
        correct[pos:pos + len(chunk)] = np.argmax(logits.data, axis=-1) == batch["labels"]
        pos += len(chunk)
    return correct


def run(spec):
    """Execute one experiment variant end to end and write its artifacts.

    Returns a metrics dict with the final validation accuracy, per-family
    accuracies, and (for search variants) the structure statistics.
    """
    dataset = load(spec.dataset_path) if spec.dataset_path else generate(spec.generator)
    config = spec.search
    outdir = os.path.join(spec.outdir, spec.run_name())
    os.makedirs(outdir, exist_ok=True)
    dims = {
        "channels": dataset.spec.channels,
        "global_dim": dataset.spec.global_dim,
        "n_classes": dataset.n_classes,
        "grid_cells": int(np.prod(dataset.spec.grid)),
    }

    stats = {}
    structures_table = {}
    dot_text = "// no discrete structures for this variant\n"

    if spec.variant in ("adaptive_search", "non_adaptive_search"):
        config = replace(config, adaptive=spec.variant == "adaptive_search")
        model, log, (train_idx, val_idx) = alternating_search(dataset, config)
        all_idx = np.concatenate([train_idx, val_idx])
        derived = model.derive_structures(dataset, all_idx)
        structures = {int(i): s for i, s in zip(all_idx, derived)}
        log = discrete_finetune(model, dataset, structures, train_idx, val_idx, config,
                                log=log, epoch_start=len(log))
        val_structures = [structures[int(i)] for i in val_idx]
        _, val_acc, mask = evaluate_discrete(model, dataset, val_idx, val_structures, config,
                                             return_mask=True)
        per_family = _per_family_accuracy(mask, dataset, val_idx)
        stats = structure_statistics(model, dataset)
        structures_table = {
            sig: entry["structure"] for sig, entry in stats["signatures"].items()
        }
        dots = []
        for k, sig in enumerate(sorted(structures_table)):
            dots.append(DiscreteStructure.parse(structures_table[sig]).to_dot(f"structure_{k}"))
        dot_text = "\n".join(dots) + ("\n" if dots else "")
    else:
        train_idx, val_idx = train_val_split(len(dataset), config.val_fraction, config.seed)
        rng = np.random.default_rng(np.random.SeedSequence([config.seed, 51]))
        if spec.variant == "global_pooling":
            model = GlobalPoolingModel(dims["global_dim"], dims["n_classes"], rng)
        elif spec.variant == "pooling_over_rois":
            model = RoiPoolingModel(dims["channels"], config.width, dims["n_classes"], rng)
        else:
            model = SingleOpModel(dims["channels"], dims["global_dim"], config.width,
                                  dims["n_classes"], dims["grid_cells"], spec.single_op, rng,
                                  m_top=config.m_top, kernel_size=config.kernel_size,
                                  identity_dropout=config.identity_dropout)
        log = _simple_train(model, dataset, train_idx, val_idx, config)
        mask = _eval_simple(model, dataset, val_idx, config)
        val_acc = float(mask.mean())
        per_family = _per_family_accuracy(mask, dataset, val_idx)

    metrics = {
        "variant": spec.run_name(),
        "val_acc": float(val_acc),
        "per_family": per_family,
        "n_epochs": len(log),
        "n_distinct_signatures": stats.get("n_distinct", 0),
    }

    write_metrics_csv(os.path.join(outdir, "metrics.csv"), log)
    write_json(os.path.join(outdir, "structures.json"), structures_table)
    write_json(os.path.join(outdir, "stats.json"), {"final": metrics, "structures": stats})
    atomic_write_text(os.path.join(outdir, "structures.dot"), dot_text)
    manifest = {
        "seed": config.seed,
        "config": spec.to_dict(),
        "config_hash": config_hash(spec.to_dict()),
        "code_version": __version__,
        "backend": BACKEND,
    }
    write_json(os.path.join(outdir, "manifest.json"), manifest)
    save_model(os.path.join(outdir, "model.bin"), spec, model, dims)
    return metrics


# ---------------------------------------------------------------------------
# ablation grids
# ---------------------------------------------------------------------------

ABLATION_AXES = {
    "supernodes": ("n_intermediate", (2, 3, 4)),
    "cells": ("n_cells", (1, 2)),
    "var_weight": ("var_loss_weight", (0.0, 0.1)),
    "space": ("search_space", ("original_ops", "fixed_substructures")),
}


def _run_point(spec_dict):
    spec = ExperimentSpec.from_dict(spec_dict)
    return run(spec)


def ablation_grid(base, axis, workers=1):
    """Run the base spec once per axis value with a shared seed and emit a
    comparison table (list of rows plus a CSV next to the runs)."""
    if axis not in ABLATION_AXES:
        raise ConfigurationError(f"unknown ablation axis {axis!r}; choose from {sorted(ABLATION_AXES)}")
    field_name, values = ABLATION_AXES[axis]
    specs = []
    for v in values:
        sub = replace(base.search, **{field_name: v})
        specs.append(replace(base, search=sub, outdir=os.path.join(base.outdir, f"ablation_{axis}", str(v))))

    if workers > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_run_point, [s.to_dict() for s in specs]))
    else:
        results = [run(s) for s in specs]

    rows = []
    for v, res in zip(values, results):
        n_inter = base.search.n_intermediate if field_name != "n_intermediate" else v
        rows.append({
            "axis": axis,
            "value": v,
            "n_edges": n_inter * (n_inter + 1) // 2,
            "val_acc": res["val_acc"],
            "n_distinct_signatures": res["n_distinct_signatures"],
        })
    table_path = os.path.join(base.outdir, f"ablation_{axis}.csv")
    os.makedirs(base.outdir, exist_ok=True)
    cols = ("axis", "value", "n_edges", "val_acc", "n_distinct_signatures")
    lines = [",".join(cols)]
    for r in rows:
        lines.append(",".join(repr(r[c]) if isinstance(r[c], float) else str(r[c]) for c in cols))
    atomic_write_text(table_path, "\n".join(lines) + "\n")
    return rows
