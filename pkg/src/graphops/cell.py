"""The searched computation cell.

A cell is a DAG of supernodes 0..n_intermediate (0 is the input) with one
superedge per ordered pair (i, j), i < j. Every superedge carries the
same candidate set; a candidate is either a single graph operation or a
fixed chain of operations. The relaxed forward mixes all candidates with
softmax weights, the discrete forward applies one chosen candidate per
edge. The cell output channel-concatenates the intermediate supernodes.

Candidate parameters are not shared across superedges: each (edge,
candidate) pair owns a full parameter set.
"""

import re
from dataclasses import dataclass, field

import numpy as np

from . import engine as eng
from . import ops
from .engine import ConfigurationError, Tensor

ORIGINAL_OPS = ("zero", "identity", "feat_aggr", "diff_prop", "temp_conv", "back_incor", "node_att")
FIXED_SUBSTRUCTURES = (
    "zero",
    "identity",
    "diff_prop-feat_aggr-node_att",
    "temp_conv-feat_aggr-node_att",
    "back_incor-feat_aggr-node_att",
)


@dataclass(frozen=True)
class CellSpec:
    n_intermediate: int = 3
    mode: str = "fixed_substructures"
    candidate_set: tuple = None   # explicit override; identical on every superedge

    def __post_init__(self):
        if self.n_intermediate < 1:
            raise ConfigurationError("need at least one intermediate supernode")
        if self.mode not in ("fixed_substructures", "original_ops"):
            raise ConfigurationError(f"unknown search space mode {self.mode!r}")
        if self.candidate_set is not None:
            object.__setattr__(self, "candidate_set", tuple(self.candidate_set))

    def edges(self):
        n = self.n_intermediate
        return tuple((i, j) for i in range(n + 1) for j in range(i + 1, n + 1))

    def candidates(self):
        if self.candidate_set is not None:
            return self.candidate_set
        return FIXED_SUBSTRUCTURES if self.mode == "fixed_substructures" else ORIGINAL_OPS

    @property
    def n_edges(self):
        return len(self.edges())

    @property
    def n_candidates(self):
        return len(self.candidates())


def candidate_chain(candidate_id):
    """Operation kinds applied in sequence by a candidate; empty for zero/identity."""
    if candidate_id in ("zero", "identity"):
        return ()
    return tuple(candidate_id.split("-"))


@dataclass(frozen=True)
class DiscreteStructure:
    """One chosen candidate per superedge, in lexicographic edge order."""

    edges: tuple
    choices: tuple

    def __post_init__(self):
        if len(self.edges) != len(self.choices):
            raise ConfigurationError("one choice per edge required")

    @property
    def signature(self):
        return ";".join(f"edge({i},{j})={c}" for (i, j), c in zip(self.edges, self.choices))

    def serialize(self):
        return "".join(f"edge({i},{j})={c}\n" for (i, j), c in zip(self.edges, self.choices))

    @classmethod
    def parse(cls, text):
        edges, choices = [], []
        for line in text.replace(";", "\n").splitlines():
            line = line.strip()
            if not line:
                continue
            m = re.fullmatch(r"edge\((\d+),(\d+)\)=(\S+)", line)
            if m is None:
                raise ValueError(f"unparseable structure line: {line!r}")
            edges.append((int(m.group(1)), int(m.group(2))))
            choices.append(m.group(3))
        return cls(edges=tuple(edges), choices=tuple(choices))

    def to_dot(self, name="structure"):
        n_super = max(j for _, j in self.edges) + 1
        lines = [f"digraph {name} {{", "  rankdir=LR;", '  n0 [label="input"];']
        for j in range(1, n_super):
            lines.append(f'  n{j} [label="N-{j}"];')
        for (i, j), c in zip(self.edges, self.choices):
            lines.append(f'  n{i} -> n{j} [label="{c}"];')
        lines.append("}")
        return "\n".join(lines) + "\n"


def structure_from_dot(dot_text):
    """Rebuild a DiscreteStructure from a single DOT digraph's edge labels."""
    edges, choices = [], []
    for m in re.finditer(r"n(\d+)\s*->\s*n(\d+)\s*\[label=\"([^\"]+)\"\]", dot_text):
        edges.append((int(m.group(1)), int(m.group(2))))
        choices.append(m.group(3))
    order = sorted(range(len(edges)), key=lambda k: edges[k])
    return DiscreteStructure(
        edges=tuple(edges[k] for k in order),
        choices=tuple(choices[k] for k in order),
    )


def derive_discrete(all_alphas, spec, exclude=("zero",)):
    """Per superedge, the candidate with the strongest weight.

    Excluded candidates (the zero op by default) never win; ties go to the
    first candidate in canonical order. ``all_alphas`` is (E, O) for one
    sample or (B, E, O) for a batch, returning one structure per sample.
    """
    all_alphas = np.asarray(all_alphas)
    cands = spec.candidates()
    keep = [k for k, c in enumerate(cands) if c not in exclude]
    if not keep:
        raise ConfigurationError("every candidate is excluded from derivation")
    sub = all_alphas[..., keep]
    best = np.argmax(sub, axis=-1)    # first max wins: canonical-order tie break
    chosen = np.asarray(keep)[best]   # (..., E)
    edges = spec.edges()

    def build(row):
        return DiscreteStructure(edges=edges, choices=tuple(cands[k] for k in row))

    if chosen.ndim == 1:
        return build(chosen)
    return [build(row) for row in chosen.reshape(-1, len(edges))]


# ---------------------------------------------------------------------------
# cell parameters and forward passes
# ---------------------------------------------------------------------------

@dataclass
class ClassifierParams:
    weight: Tensor   # (n_classes, D)
    bias: Tensor     # (n_classes,)

    def named_tensors(self, prefix="classifier"):
        return [(f"{prefix}/W", self.weight), (f"{prefix}/b", self.bias)]


def init_classifier(in_dim, n_classes, rng=None, scale=0.01):
    if rng is None:
        weight = np.zeros((n_classes, in_dim))
    else:
        weight = scale * rng.standard_normal((n_classes, in_dim))
    return ClassifierParams(
        weight=eng.parameter(weight),
        bias=eng.parameter(np.zeros(n_classes)),
    )


def pool_and_classify(nodes, global_feature, classifier):
    """Mean-pool node features, append the global feature, classify linearly."""
    pooled = eng.mean_(nodes.features, axis=-2)
    h = eng.concat([pooled, global_feature], axis=-1)
    return eng.add(eng.matmul(h, eng.transpose(classifier.weight)), classifier.bias)


def _init_op_params(kind, width, grid_cells, m_top, kernel_size, rng):
    if kind in ("feat_aggr", "diff_prop"):
        return ops.init_bilinear(width, width, rng)
    if kind == "temp_conv":
        return ops.init_temporal_conv(width, width, rng, kernel_size=kernel_size)
    if kind == "back_incor":
        return ops.init_background(width, width, grid_cells, rng)
    if kind == "node_att":
        return ops.init_node_attention(m_top, rng)
    raise ConfigurationError(f"unknown operation kind {kind!r}")


def _apply_op(kind, nodes, bg, params):
    if kind == "feat_aggr":
        return ops.feature_aggregation(nodes, params)
    if kind == "diff_prop":
        return ops.difference_propagation(nodes, params)
    if kind == "temp_conv":
        return ops.temporal_convolution(nodes, params)
    if kind == "back_incor":
        return ops.background_incorporation(nodes, bg, params)
    if kind == "node_att":
        return ops.node_attention(nodes, params)
    raise ConfigurationError(f"unknown operation kind {kind!r}")


class Cell:
    """Parameters and forward passes of one computation cell."""

    def __init__(self, spec, width, grid_cells, rng, m_top=5, kernel_size=7, identity_dropout=0.3):
        self.spec = spec
        self.width = width
        self.grid_cells = grid_cells
        self.m_top = m_top
        self.kernel_size = kernel_size
        self.identity_dropout = identity_dropout
        self.params = {}
        for edge in spec.edges():
            for cand in spec.candidates():
                chain = candidate_chain(cand)
                self.params[edge, cand] = [
                    _init_op_params(kind, width, grid_cells, m_top, kernel_size, rng)
                    for kind in chain
                ]

    def named_parameters(self):
        out = []
        for edge in self.spec.edges():
            for cand in self.spec.candidates():
                chain = candidate_chain(cand)
                for step, (kind, p) in enumerate(zip(chain, self.params[edge, cand])):
                    prefix = f"edge({edge[0]},{edge[1]})/{cand}/{step}:{kind}"
                    out.extend(p.named_tensors(prefix))
        return out

    def candidate_forward(self, nodes, edge, candidate, bg, training, rng):
        """Apply one candidate (possibly a chain) on a superedge."""
        if candidate == "zero":
            return ops.zero_op(nodes)
        if candidate == "identity":
            return ops.identity_op(nodes, self.identity_dropout, rng, training)
        out = nodes
        for kind, p in zip(candidate_chain(candidate), self.params[edge, candidate]):
            out = _apply_op(kind, out, bg, p)
        return out

    def mixed_edge_forward(self, nodes, edge, alphas_edge, bg, training, rng):
        """Softmax-weighted combination of every candidate on one superedge.

        alphas_edge is (..., O); per-sample weights broadcast over nodes
        and channels.
        """
        cands = self.spec.candidates()
        if alphas_edge.data.shape[-1] != len(cands):
            raise ConfigurationError(
                f"expected {len(cands)} candidate weights, got {alphas_edge.data.shape[-1]}"
            )
        weights = eng.row_softmax(alphas_edge)
        lead = weights.data.shape[:-1]
        total = None
        for k, cand in enumerate(cands):
            out = self.candidate_forward(nodes, edge, cand, bg, training, rng)
            w_k = eng.reshape(eng.narrow(weights, -1, k, 1), lead + (1, 1))
            term = eng.mul(w_k, out.features)
            total = term if total is None else eng.add(total, term)
        return nodes.with_features(total)

    def forward(self, nodes, all_alphas, bg, training, rng):
        """Relaxed cell evaluation: every supernode sums its mixed predecessors.

        all_alphas is (..., E, O) in lexicographic edge order. Returns the
        channel-concatenated intermediate supernodes.
        """
        lead = all_alphas.data.shape[:-2]
        states = {0: nodes}
        for e, (i, j) in enumerate(self.spec.edges()):
            a_e = eng.reshape(eng.narrow(all_alphas, -2, e, 1), lead + (self.spec.n_candidates,))
            contrib = self.mixed_edge_forward(states[i], (i, j), a_e, bg, training, rng)
            if j in states:
                states[j] = states[j].with_features(eng.add(states[j].features, contrib.features))
            else:
                states[j] = contrib
        inter = [states[j].features for j in range(1, self.spec.n_intermediate + 1)]
        return nodes.with_features(eng.concat(inter, axis=-1))

    def discrete_forward(self, nodes, structure, bg, training, rng):
        """Same wiring as forward but each superedge applies one candidate."""
        cands = self.spec.candidates()
        choice = dict(zip(structure.edges, structure.choices))
        states = {0: nodes}
        for i, j in self.spec.edges():
            cand = choice[(i, j)]
            if cand not in cands:
                raise ConfigurationError(f"unknown candidate {cand!r} on edge ({i},{j})")
            contrib = self.candidate_forward(states[i], (i, j), cand, bg, training, rng)
            if j in states:
                states[j] = states[j].with_features(eng.add(states[j].features, contrib.features))
            else:
                states[j] = contrib
        inter = [states[j].features for j in range(1, self.spec.n_intermediate + 1)]
        return nodes.with_features(eng.concat(inter, axis=-1))
