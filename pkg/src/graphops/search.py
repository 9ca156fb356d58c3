"""Adaptive structure-weight search and the training schedules around it.

The controller maps a sample's global feature to per-superedge candidate
logits through a single linear layer (adaptive mode) or holds them as a
free logit table shared by every sample (non-adaptive mode). Search
alternates SGD on the operation/classifier weights with Adam on the
structure weights, both minimizing classification loss plus a weighted
variance penalty on the per-candidate logit sums, until the derived
per-sample structures stop churning. Fine-tuning then trains operation
weights under the derived discrete structures with a plateau-decayed
learning rate.
"""

from dataclasses import dataclass

import numpy as np

from . import engine as eng
from .cell import Cell, CellSpec, derive_discrete, init_classifier, pool_and_classify
from .engine import ConfigurationError, DimensionError, Tensor
from .ops import BackgroundMap, NodeSet


@dataclass
class SearchConfig:
    # optimizers
    lr_ops: float = 0.01
    lr_structure: float = 1e-4
    adam_betas: tuple = (0.9, 0.999)
    adam_eps: float = 1e-8
    momentum: float = 0.0
    var_loss_weight: float = 0.1
    # alternation
    batch_size: int = 8
    period_epochs: int = 1
    max_rounds: int = 25
    stable_churn: float = 0.01
    joint: bool = False
    # discrete fine-tune
    lr_finetune: float = 1e-3
    plateau_patience: int = 5
    lr_decay_factor: float = 0.1
    lr_floor: float = 1e-4
    max_finetune_epochs: int = 40
    transfer_ops_epochs: int = 8
    # model
    adaptive: bool = True
    width: int = 24
    n_intermediate: int = 3
    search_space: str = "fixed_substructures"
    n_cells: int = 1
    m_top: int = 5
    kernel_size: int = 7
    identity_dropout: float = 0.3
    derive_exclude: tuple = ("zero",)
    # data
    val_fraction: float = 0.2
    eval_batch_size: int = 64
    seed: int = 0

    def __post_init__(self):
        if self.lr_ops <= 0 or self.lr_structure <= 0 or self.lr_finetune <= 0:
            raise ConfigurationError("learning rates must be positive")
        if self.var_loss_weight < 0:
            raise ConfigurationError("var_loss_weight must be non-negative")
        object.__setattr__(self, "adam_betas", tuple(self.adam_betas))
        object.__setattr__(self, "derive_exclude", tuple(self.derive_exclude))

    def to_dict(self):
        d = {k: getattr(self, k) for k in self.__dataclass_fields__}
        d["adam_betas"] = list(d["adam_betas"])
        d["derive_exclude"] = list(d["derive_exclude"])
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        if "adam_betas" in d:
            d["adam_betas"] = tuple(d["adam_betas"])
        if "derive_exclude" in d:
            d["derive_exclude"] = tuple(d["derive_exclude"])
        return cls(**d)


# ---------------------------------------------------------------------------
# structure weights and the diversity loss
# ---------------------------------------------------------------------------

class StructureWeights:
    """Per-sample candidate logits from the global feature (adaptive) or a
    free logit table identical for all samples (non-adaptive)."""

    def __init__(self, n_edges, n_candidates, global_dim, adaptive=True):
        self.n_edges = n_edges
        self.n_candidates = n_candidates
        self.global_dim = global_dim
        self.adaptive = adaptive
        if adaptive:
            self.matrix = eng.parameter(np.zeros((n_edges * n_candidates, global_dim)))
        else:
            self.logits = eng.parameter(np.zeros((n_edges, n_candidates)))

    def named_parameters(self):
        if self.adaptive:
            return [("structure/A", self.matrix)]
        return [("structure/alpha", self.logits)]

    def compute_alphas(self, global_feature):
        """(... , C_g) global features to (..., E, O) candidate logits."""
        if not isinstance(global_feature, Tensor):
            global_feature = eng.constant(global_feature)
        lead = global_feature.data.shape[:-1]
        if self.adaptive:
            if global_feature.data.shape[-1] != self.global_dim:
                raise DimensionError(
                    f"global feature dim {global_feature.data.shape[-1]} != {self.global_dim}"
                )
            flat = eng.matmul(global_feature, eng.transpose(self.matrix))
            return eng.reshape(flat, lead + (self.n_edges, self.n_candidates))
        anchor = eng.constant(np.zeros(lead + (1, 1)))
        return eng.add(self.logits, anchor)

    def state(self):
        if self.adaptive:
            return {"adaptive": True, "matrix": self.matrix.data.copy()}
        return {"adaptive": False, "logits": self.logits.data.copy()}

    def load_state(self, state):
        if state["adaptive"] != self.adaptive:
            raise ConfigurationError("structure weight mode mismatch")
        if self.adaptive:
            if state["matrix"].shape != self.matrix.data.shape:
                raise DimensionError("structure weight shape mismatch")
            self.matrix.data[:] = state["matrix"]
        else:
            if state["logits"].shape != self.logits.data.shape:
                raise DimensionError("structure weight shape mismatch")
            self.logits.data[:] = state["logits"]


def variance_loss(all_alphas):
    """Variance of per-candidate logit sums over the superedges.

    all_alphas is (..., E, O); per candidate o the logits are summed over
    edges, and the loss is the variance of those sums over candidates with
    1/(O-1) normalization, averaged over any batch dimensions.
    """
    n_cand = all_alphas.data.shape[-1]
    if n_cand < 2:
        raise ConfigurationError("variance loss needs at least two candidates")
    per_cand = eng.sum_(all_alphas, axis=-2)
    mean = eng.mean_(per_cand, axis=-1, keepdims=True)
    dev = eng.sub(per_cand, mean)
    var = eng.mul(eng.sum_(eng.mul(dev, dev), axis=-1), 1.0 / (n_cand - 1))
    return eng.mean_(var)


# ---------------------------------------------------------------------------
# optimizers
# ---------------------------------------------------------------------------

class SGD:
    def __init__(self, params, lr, momentum=0.0):
        self.params = list(params)
        self.lr = lr
        self.momentum = momentum
        self._velocity = [np.zeros_like(p.data) for p in self.params] if momentum else None

    def zero_grad(self):
        for p in self.params:
            p.zero_grad()

    def step(self):
        for i, p in enumerate(self.params):
            if p.grad is None:
                continue
            if self.momentum:
                self._velocity[i] = self.momentum * self._velocity[i] + p.grad
                p.data -= self.lr * self._velocity[i]
            else:
                p.data -= self.lr * p.grad


class Adam:
    def __init__(self, params, lr, betas=(0.9, 0.999), eps=1e-8):
        self.params = list(params)
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self._m = [np.zeros_like(p.data) for p in self.params]
        self._v = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self):
        for p in self.params:
            p.zero_grad()

    def step(self):
        self.t += 1
        for i, p in enumerate(self.params):
            if p.grad is None:
                continue
            self._m[i] = self.b1 * self._m[i] + (1 - self.b1) * p.grad
            self._v[i] = self.b2 * self._v[i] + (1 - self.b2) * p.grad ** 2
            m_hat = self._m[i] / (1 - self.b1 ** self.t)
            v_hat = self._v[i] / (1 - self.b2 ** self.t)
            p.data -= self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


class PlateauSchedule:
    """Divide the lr by 10 after `patience` epochs without validation
    improvement; signal stop when patience runs out at the floor lr."""

    def __init__(self, lr, factor=0.1, patience=5, floor=1e-4):
        self.lr = lr
        self.factor = factor
        self.patience = patience
        self.floor = floor
        self.best = np.inf
        self.stagnant = 0

    def update(self, val_loss):
        if val_loss < self.best - 1e-12:
            self.best = val_loss
            self.stagnant = 0
            return False
        self.stagnant += 1
        if self.stagnant >= self.patience:
            if self.lr <= self.floor * (1 + 1e-9):
                return True
            self.lr = max(self.lr * self.factor, self.floor)
            self.stagnant = 0
        return False


# ---------------------------------------------------------------------------
# the model bundle
# ---------------------------------------------------------------------------

class Model:
    """Channel projection, searched cell stack, classifier, structure weights."""

    def __init__(self, data_channels, global_dim, n_classes, grid_cells, config, rng):
        self.config = config
        self.cell_spec = CellSpec(config.n_intermediate, config.search_space)
        w = config.width
        self.project = eng.parameter(rng.standard_normal((w, data_channels)) / np.sqrt(data_channels))
        self.cells = []
        self.inter_projects = []
        cell_out = w * config.n_intermediate
        for c_idx in range(config.n_cells):
            if c_idx > 0:
                # a stacked cell reads the previous cell's concatenated output
                self.inter_projects.append(
                    eng.parameter(rng.standard_normal((w, cell_out)) / np.sqrt(cell_out))
                )
            self.cells.append(
                Cell(
                    self.cell_spec, w, grid_cells, rng,
                    m_top=config.m_top, kernel_size=config.kernel_size,
                    identity_dropout=config.identity_dropout,
                )
            )
        self.classifier = init_classifier(cell_out + global_dim, n_classes, rng=rng)
        self.structure = StructureWeights(
            self.cell_spec.n_edges, self.cell_spec.n_candidates, global_dim, config.adaptive
        )

    def named_op_parameters(self):
        out = [("project/W", self.project)]
        for i, w in enumerate(self.inter_projects):
            out.append((f"inter_project{i}/W", w))
        for i, cell in enumerate(self.cells):
            out.extend((f"cell{i}/{n}", t) for n, t in cell.named_parameters())
        out.extend(self.classifier.named_tensors())
        return out

    def op_parameters(self):
        return [t for _, t in self.named_op_parameters()]

    def structure_parameters(self):
        return [t for _, t in self.structure.named_parameters()]

    def all_parameters(self):
        return self.op_parameters() + self.structure_parameters()

    def _trunk(self, nodes, bg, training, rng, alphas=None, structure=None):
        from .ops import channel_project

        h = channel_project(nodes, self.project)
        # the one channel reduction feeds all graph reasoning, background included
        bg_w = BackgroundMap(eng.matmul(bg.maps, eng.transpose(self.project)))
        for c_idx, cell in enumerate(self.cells):
            if c_idx > 0:
                h = h.with_features(eng.matmul(h.features, eng.transpose(self.inter_projects[c_idx - 1])))
            if structure is None:
                h = cell.forward(h, alphas, bg_w, training, rng)
            else:
                h = cell.discrete_forward(h, structure, bg_w, training, rng)
        return h

    def forward_mixed(self, batch, training, rng):
        alphas = self.structure.compute_alphas(batch["global"])
        out = self._trunk(batch["nodes"], batch["bg"], training, rng, alphas=alphas)
        logits = pool_and_classify(out, batch["global"], self.classifier)
        return logits, alphas

    def forward_discrete(self, batch, structure, training, rng):
        out = self._trunk(batch["nodes"], batch["bg"], training, rng, structure=structure)
        return pool_and_classify(out, batch["global"], self.classifier)

    def alphas_for(self, dataset, indices):
        gf = eng.constant(dataset.global_features[indices])
        return self.structure.compute_alphas(gf).data

    def derive_structures(self, dataset, indices):
        """Per-sample discrete structures (a list, one per index)."""
        alphas = self.alphas_for(dataset, indices)
        derived = derive_discrete(alphas, self.cell_spec, exclude=self.config.derive_exclude)
        if isinstance(derived, list):
            return derived
        return [derived] * len(indices)


def make_batch(dataset, indices):
    indices = np.asarray(indices)
    nodes = NodeSet(
        features=eng.constant(dataset.features[indices]),
        positions=dataset.positions[indices],
        frame_index=dataset.frame_index,
        n_frames=dataset.spec.n_frames,
    )
    return {
        "nodes": nodes,
        "bg": BackgroundMap(eng.constant(dataset.maps[indices])),
        "global": eng.constant(dataset.global_features[indices]),
        "labels": dataset.labels[indices],
    }


def train_val_split(n, val_fraction, seed):
    perm = np.random.default_rng(np.random.SeedSequence([seed, 7001])).permutation(n)
    n_val = max(1, int(round(n * val_fraction)))
    return np.sort(perm[n_val:]), np.sort(perm[:n_val])


# ---------------------------------------------------------------------------
# evaluation helpers
# ---------------------------------------------------------------------------

def _batched(indices, size):
    for start in range(0, len(indices), size):
        yield indices[start:start + size]


def evaluate_mixed(model, dataset, indices, config):
    losses, correct = [], 0
    rng = np.random.default_rng(0)  # unused in eval mode
    for chunk in _batched(indices, config.eval_batch_size):
        batch = make_batch(dataset, chunk)
        logits, _ = model.forward_mixed(batch, training=False, rng=rng)
        loss = eng.softmax_cross_entropy(logits, batch["labels"])
        losses.append(loss.data.item() * len(chunk))
        correct += int((np.argmax(logits.data, axis=-1) == batch["labels"]).sum())
    return sum(losses) / len(indices), correct / len(indices)


def evaluate_discrete(model, dataset, indices, structures, config, return_mask=False):
    """Accuracy/loss under per-sample structures; samples are grouped by
    signature so each group shares one graph."""
    indices = np.asarray(indices)
    sig_order = {}
    for i, s in zip(indices, structures):
        sig_order.setdefault(s.signature, (s, []))[1].append(i)
    losses, correct = 0.0, 0
    mask = np.zeros(len(indices), dtype=bool)
    pos_of = {int(i): p for p, i in enumerate(indices)}
    rng = np.random.default_rng(0)
    for sig in sorted(sig_order):
        structure, members = sig_order[sig]
        members = np.asarray(members)
        for chunk in _batched(members, config.eval_batch_size):
            batch = make_batch(dataset, chunk)
            logits = model.forward_discrete(batch, structure, training=False, rng=rng)
            loss = eng.softmax_cross_entropy(logits, batch["labels"])
            losses += loss.data.item() * len(chunk)
            hits = np.argmax(logits.data, axis=-1) == batch["labels"]
            correct += int(hits.sum())
            for i, h in zip(chunk, hits):
                mask[pos_of[int(i)]] = h
    if return_mask:
        return losses / len(indices), correct / len(indices), mask
    return losses / len(indices), correct / len(indices)


def signatures_of(structures):
    return np.array([s.signature for s in structures])


# ---------------------------------------------------------------------------
# the alternating search schedule
# ---------------------------------------------------------------------------

LOG_COLUMNS = ("round", "phase", "epoch", "train_loss", "val_loss", "val_acc", "l_var", "n_distinct_signatures")


class DivergenceError(Exception):
    """Training produced non-finite values."""


def _train_epoch(model, dataset, train_idx, config, optimizers, shuffle_rng, dropout_rng):
    perm = shuffle_rng.permutation(len(train_idx))
    order = train_idx[perm]
    total_loss, total_var = 0.0, 0.0
    n_batches = 0
    for chunk in _batched(order, config.batch_size):
        batch = make_batch(dataset, chunk)
        try:
            logits, alphas = model.forward_mixed(batch, training=True, rng=dropout_rng)
            cls = eng.softmax_cross_entropy(logits, batch["labels"])
            lvar = variance_loss(alphas)
            loss = eng.add(cls, eng.mul(lvar, config.var_loss_weight))
            for p in model.all_parameters():
                p.zero_grad()
            loss.backward()
        except eng.NonFiniteError as exc:
            raise DivergenceError(f"training diverged: {exc}") from exc
        for opt in optimizers:
            opt.step()
        total_loss += cls.data.item()
        total_var += lvar.data.item()
        n_batches += 1
    return total_loss / n_batches, total_var / n_batches


def alternating_search(dataset, config):
    """Alternate operation-weight and structure-weight phases until the
    derived per-sample structures are stable (or max rounds), returning
    the model, the epoch log, and the train/val index split."""
    train_idx, val_idx = train_val_split(len(dataset), config.val_fraction, config.seed)
    init_rng = np.random.default_rng(np.random.SeedSequence([config.seed, 11]))
    model = Model(
        data_channels=dataset.spec.channels,
        global_dim=dataset.spec.global_dim,
        n_classes=dataset.n_classes,
        grid_cells=int(np.prod(dataset.spec.grid)),
        config=config,
        rng=init_rng,
    )
    sgd = SGD(model.op_parameters(), lr=config.lr_ops, momentum=config.momentum)
    adam = Adam(model.structure_parameters(), lr=config.lr_structure,
                betas=config.adam_betas, eps=config.adam_eps)
    shuffle_rng = np.random.default_rng(np.random.SeedSequence([config.seed, 12]))
    dropout_rng = np.random.default_rng(np.random.SeedSequence([config.seed, 13]))

    log = []
    epoch = 0
    prev_sigs = None
    for rnd in range(config.max_rounds):
        if config.joint:
            phases = [("joint", [sgd, adam])]
        else:
            phases = [("ops", [sgd]), ("structure", [adam])]
        for phase_name, opts in phases:
            for _ in range(config.period_epochs):
                train_loss, l_var = _train_epoch(
                    model, dataset, train_idx, config, opts, shuffle_rng, dropout_rng
                )
                val_loss, val_acc = evaluate_mixed(model, dataset, val_idx, config)
                sigs = signatures_of(model.derive_structures(dataset, train_idx))
                log.append({
                    "round": rnd, "phase": phase_name, "epoch": epoch,
                    "train_loss": train_loss, "val_loss": val_loss, "val_acc": val_acc,
                    "l_var": l_var, "n_distinct_signatures": len(set(sigs)),
                })
                epoch += 1
        sigs = signatures_of(model.derive_structures(dataset, train_idx))
        if prev_sigs is not None:
            churn = float(np.mean(sigs != prev_sigs))
            if churn < config.stable_churn:
                break
        prev_sigs = sigs
    return model, log, (train_idx, val_idx)


def discrete_finetune(model, dataset, structures, train_idx, val_idx, config, log=None, epoch_start=0):
    """Train operation weights under fixed per-sample discrete structures.

    `structures` maps sample index -> DiscreteStructure for every train
    and val index. Structure weights are never touched.
    """
    sgd = SGD(model.op_parameters(), lr=config.lr_finetune, momentum=config.momentum)
    schedule = PlateauSchedule(
        config.lr_finetune, factor=config.lr_decay_factor,
        patience=config.plateau_patience, floor=config.lr_floor,
    )
    shuffle_rng = np.random.default_rng(np.random.SeedSequence([config.seed, 21]))
    dropout_rng = np.random.default_rng(np.random.SeedSequence([config.seed, 22]))
    log = [] if log is None else log

    by_sig = {}
    for i in train_idx:
        s = structures[int(i)]
        by_sig.setdefault(s.signature, (s, []))[1].append(int(i))

    val_structures = [structures[int(i)] for i in val_idx]
    epoch = epoch_start
    for _ in range(config.max_finetune_epochs):
        sgd.lr = schedule.lr
        total_loss, n_batches = 0.0, 0
        for sig in sorted(by_sig):
            structure, members = by_sig[sig]
            members = np.asarray(members)
            perm = shuffle_rng.permutation(len(members))
            for chunk in _batched(members[perm], config.batch_size):
                batch = make_batch(dataset, chunk)
                try:
                    logits = model.forward_discrete(batch, structure, training=True, rng=dropout_rng)
                    loss = eng.softmax_cross_entropy(logits, batch["labels"])
                    for p in model.op_parameters():
                        p.zero_grad()
                    loss.backward()
                except eng.NonFiniteError as exc:
                    raise DivergenceError(f"fine-tune diverged: {exc}") from exc
                sgd.step()
                total_loss += loss.data.item()
                n_batches += 1
        val_loss, val_acc = evaluate_discrete(model, dataset, val_idx, val_structures, config)
        log.append({
            "round": -1, "phase": "finetune", "epoch": epoch,
            "train_loss": total_loss / max(n_batches, 1), "val_loss": val_loss,
            "val_acc": val_acc, "l_var": 0.0, "n_distinct_signatures": len(by_sig),
        })
        epoch += 1
        if schedule.update(val_loss):
            break
    return log


# ---------------------------------------------------------------------------
# analyses over derived structures
# ---------------------------------------------------------------------------

def structure_statistics(model, dataset, indices=None):
    """Counts of derived signatures by class and by group, plus the
    structure definitions keyed by signature."""
    if indices is None:
        indices = np.arange(len(dataset))
    indices = np.asarray(indices)
    structures = model.derive_structures(dataset, indices)
    table = {}
    for i, s in zip(indices, structures):
        sig = s.signature
        entry = table.setdefault(sig, {
            "structure": s.serialize(),
            "total": 0,
            "by_class": {},
            "by_group": {},
        })
        entry["total"] += 1
        cls = str(int(dataset.labels[i]))
        grp = dataset.group_name(int(dataset.group_ids[i]))
        entry["by_class"][cls] = entry["by_class"].get(cls, 0) + 1
        entry["by_group"][grp] = entry["by_group"].get(grp, 0) + 1
    return {"n_distinct": len(table), "signatures": table}


def mismatch_evaluate(model, dataset, indices, config, swap=None):
    """Accuracy of each group under its own majority-derived structure vs
    under a swapped group's structure.

    `swap` maps group name -> group name and must be a permutation; by
    default the two most populous groups are exchanged. Needs at least two
    distinct derived structures to be applicable.
    """
    indices = np.asarray(indices)
    structures = model.derive_structures(dataset, indices)
    sigs = signatures_of(structures)
    if len(set(sigs)) < 2:
        return {"applicable": False, "reason": "fewer than two distinct structures"}

    group_names = [dataset.group_name(int(g)) for g in dataset.group_ids[indices]]
    groups = sorted(set(group_names))
    majority = {}
    counts = {}
    for g in groups:
        members = [k for k, name in enumerate(group_names) if name == g]
        counts[g] = len(members)
        sig_counts = {}
        for k in members:
            sig_counts[sigs[k]] = sig_counts.get(sigs[k], 0) + 1
        best_sig = max(sorted(sig_counts), key=lambda s: sig_counts[s])
        majority[g] = next(structures[k] for k in members if sigs[k] == best_sig)

    if swap is None:
        top2 = sorted(groups, key=lambda g: (-counts[g], g))[:2]
        swap = {g: g for g in groups}
        swap[top2[0]], swap[top2[1]] = top2[1], top2[0]
    if sorted(swap.values()) != sorted(swap.keys()):
        raise ConfigurationError("swap must be a permutation of group names")

    result = {"applicable": True, "swap": dict(swap), "groups": {}}
    matched_accs, mismatched_accs = [], []
    for g in groups:
        members = indices[[k for k, name in enumerate(group_names) if name == g]]
        own = majority[g]
        other = majority[swap[g]]
        _, acc_own = evaluate_discrete(model, dataset, members, [own] * len(members), config)
        _, acc_other = evaluate_discrete(model, dataset, members, [other] * len(members), config)
        result["groups"][g] = {
            "matched": acc_own,
            "mismatched": acc_other,
            "structure": own.signature,
        }
        matched_accs.append(acc_own)
        mismatched_accs.append(acc_other)
    result["mean_matched"] = float(np.mean(matched_accs))
    result["mean_mismatched"] = float(np.mean(mismatched_accs))
    return result


def transfer_structure_weights(source_state, dataset, config):
    """Train a fresh model on `dataset` with structure weights copied from
    another run and frozen: operation phases only, then derivation and
    discrete fine-tune. Returns (model, log, (train_idx, val_idx))."""
    train_idx, val_idx = train_val_split(len(dataset), config.val_fraction, config.seed)
    init_rng = np.random.default_rng(np.random.SeedSequence([config.seed, 11]))
    model = Model(
        data_channels=dataset.spec.channels,
        global_dim=dataset.spec.global_dim,
        n_classes=dataset.n_classes,
        grid_cells=int(np.prod(dataset.spec.grid)),
        config=config,
        rng=init_rng,
    )
    model.structure.load_state(source_state)
    frozen = model.structure.state()

    sgd = SGD(model.op_parameters(), lr=config.lr_ops, momentum=config.momentum)
    shuffle_rng = np.random.default_rng(np.random.SeedSequence([config.seed, 12]))
    dropout_rng = np.random.default_rng(np.random.SeedSequence([config.seed, 13]))
    log = []
    for epoch in range(config.transfer_ops_epochs):
        train_loss, l_var = _train_epoch(model, dataset, train_idx, config, [sgd], shuffle_rng, dropout_rng)
        val_loss, val_acc = evaluate_mixed(model, dataset, val_idx, config)
        log.append({
            "round": 0, "phase": "transfer_ops", "epoch": epoch,
            "train_loss": train_loss, "val_loss": val_loss, "val_acc": val_acc,
            "l_var": l_var, "n_distinct_signatures": 0,
        })

    all_idx = np.concatenate([train_idx, val_idx])
    derived = model.derive_structures(dataset, all_idx)
    structures = {int(i): s for i, s in zip(all_idx, derived)}
    discrete_finetune(model, dataset, structures, train_idx, val_idx, config,
                      log=log, epoch_start=config.transfer_ops_epochs)

    after = model.structure.state()
    key = "matrix" if config.adaptive else "logits"
    if not np.array_equal(frozen[key], after[key]):
        raise RuntimeError("structure weights changed during transfer")
    return model, log, (train_idx, val_idx)
