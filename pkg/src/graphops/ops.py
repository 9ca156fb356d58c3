"""Graph operations over node-feature sets.

Five parameterized relational operations plus zero/identity and a channel
projection. Every operation maps a node set (..., K_total, C_in) to
(..., K_total, C_out) and never touches positions or frame indices. The
three affinity-based operations row-normalize their bilinear affinities
with a softmax; feature-transforming operations finish with layer
normalization plus LeakyReLU, the node attention is a pure sigmoid
gating.

Operations accept an optional leading batch axis on features, background
maps and global features; positions follow the same convention.

``pre_activation=True`` skips the normalization/activation so tests can
compare raw outputs against loop oracles independent of norm parameters.
"""

from dataclasses import dataclass

import numpy as np

from . import engine as eng
from .engine import ConfigurationError, DimensionError, Tensor

LEAKY_SLOPE = 0.01
LN_EPS = 1e-5


@dataclass
class NodeSet:
    """Node features plus constant positions and frame assignment.

    Nodes are stored frame-major: frame_index equals
    repeat(arange(n_frames), nodes_per_frame). positions are normalized
    (x, y, t) centers in [0, 1].
    """

    features: Tensor            # (..., K_total, C)
    positions: np.ndarray       # (..., K_total, 3)
    frame_index: np.ndarray     # (K_total,)
    n_frames: int

    def __post_init__(self):
        if not isinstance(self.features, Tensor):
            self.features = eng.constant(self.features)
        self.positions = np.asarray(self.positions, dtype=np.float64)
        self.frame_index = np.asarray(self.frame_index, dtype=np.int64)
        k_total = self.features.data.shape[-2]
        if k_total % self.n_frames != 0:
            raise ConfigurationError(f"{k_total} nodes do not split evenly over {self.n_frames} frames")
        per = k_total // self.n_frames
        expected = np.repeat(np.arange(self.n_frames), per)
        if not np.array_equal(self.frame_index, expected):
            raise ConfigurationError("nodes must be ordered frame-major")
        if self.positions.shape[-2:] != (k_total, 3):
            raise DimensionError(f"positions must be (..., {k_total}, 3)")
        if self.positions.min() < 0.0 or self.positions.max() > 1.0:
            raise ConfigurationError("positions must lie in [0, 1]")
        if self.features.data.shape[-1] < 2:
            raise ConfigurationError("feature dimension must be at least 2")

    @property
    def n_nodes(self):
        return self.features.data.shape[-2]

    @property
    def nodes_per_frame(self):
        return self.n_nodes // self.n_frames

    def with_features(self, features):
        out = object.__new__(NodeSet)
        out.features = features
        out.positions = self.positions
        out.frame_index = self.frame_index
        out.n_frames = self.n_frames
        return out


@dataclass
class BackgroundMap:
    """Per-frame background feature grids (..., T, h, w, C)."""

    maps: Tensor

    def __post_init__(self):
        if not isinstance(self.maps, Tensor):
            self.maps = eng.constant(self.maps)

    @property
    def grid_cells(self):
        return self.maps.data.shape[-3] * self.maps.data.shape[-2]


# ---------------------------------------------------------------------------
# parameters
# ---------------------------------------------------------------------------

@dataclass
class NormParams:
    gain: Tensor
    bias: Tensor

    def named_tensors(self, prefix):
        return [(f"{prefix}/gain", self.gain), (f"{prefix}/bias", self.bias)]


@dataclass
class BilinearParams:
    """Feature aggregation / difference propagation: transform W, affinity U."""

    transform: Tensor   # (C_out, C_in)
    affinity: Tensor    # (C_in, C_in)
    norm: NormParams

    def named_tensors(self, prefix):
        return [(f"{prefix}/W", self.transform), (f"{prefix}/U", self.affinity)] + self.norm.named_tensors(prefix)


@dataclass
class TemporalConvParams:
    kernel: Tensor      # (k, C_out, C_in)
    norm: NormParams

    def named_tensors(self, prefix):
        return [(f"{prefix}/Wt", self.kernel)] + self.norm.named_tensors(prefix)


@dataclass
class BackgroundParams:
    affinity: Tensor    # U_b (C_in, C_in)
    relation: Tensor    # V_b (C_out, grid_cells)
    transform: Tensor   # W_b (C_out, C_in)
    norm: NormParams

    def named_tensors(self, prefix):
        return [
            (f"{prefix}/Ub", self.affinity),
            (f"{prefix}/Vb", self.relation),
            (f"{prefix}/Wb", self.transform),
        ] + self.norm.named_tensors(prefix)


@dataclass
class NodeAttentionParams:
    weight: Tensor      # (1, 4*m_top)
    m_top: int

    def named_tensors(self, prefix):
        return [(f"{prefix}/Wn", self.weight)]


def _norm_params(c_out):
    return NormParams(gain=eng.parameter(np.ones(c_out)), bias=eng.parameter(np.zeros(c_out)))


def init_bilinear(c_in, c_out, rng):
    return BilinearParams(
        transform=eng.parameter(rng.standard_normal((c_out, c_in)) / np.sqrt(c_in)),
        affinity=eng.parameter(rng.standard_normal((c_in, c_in)) / c_in),
        norm=_norm_params(c_out),
    )


def init_temporal_conv(c_in, c_out, rng, kernel_size=7):
    scale = np.sqrt(kernel_size * c_in)
    return TemporalConvParams(
        kernel=eng.parameter(rng.standard_normal((kernel_size, c_out, c_in)) / scale),
        norm=_norm_params(c_out),
    )


def init_background(c_in, c_out, grid_cells, rng):
    return BackgroundParams(
        affinity=eng.parameter(rng.standard_normal((c_in, c_in)) / c_in),
        relation=eng.parameter(rng.standard_normal((c_out, grid_cells)) / np.sqrt(grid_cells)),
        transform=eng.parameter(rng.standard_normal((c_out, c_in)) / np.sqrt(c_in)),
        norm=_norm_params(c_out),
    )


def init_node_attention(m_top, rng):
    return NodeAttentionParams(
        weight=eng.parameter(rng.standard_normal((1, 4 * m_top)) / np.sqrt(4 * m_top)),
        m_top=m_top,
    )


def _delta(z, norm):
    return eng.layernorm_leakyrelu(z, norm.gain, norm.bias, slope=LEAKY_SLOPE, eps=LN_EPS)


# ---------------------------------------------------------------------------
# operations
# ---------------------------------------------------------------------------

def feature_aggregation(nodes, params, pre_activation=False):
    """Each node aggregates transformed features of all nodes, weighted by
    row-normalized bilinear affinities (self included)."""
    x = nodes.features
    logits = eng.matmul(eng.matmul(x, params.affinity), eng.transpose(x))
    aff = eng.row_softmax(logits)
    z = eng.matmul(aff, eng.matmul(x, eng.transpose(params.transform)))
    if not pre_activation:
        z = _delta(z, params.norm)
    return nodes.with_features(z)


def difference_propagation(nodes, params, pre_activation=False):
    """Each node propagates affinity-weighted feature differences to all
    other nodes; the diagonal is masked before normalization."""
    x = nodes.features
    k = nodes.n_nodes
    if k < 2:
        z = eng.mul(eng.matmul(x, eng.transpose(params.transform)), 0.0)
    else:
        logits = eng.matmul(eng.matmul(x, params.affinity), eng.transpose(x))
        mask = ~np.eye(k, dtype=bool)
        aff = eng.row_softmax(logits, mask=mask)
        # sum_j!=i a_ij W (x_i - x_j) = W x_i - W (a @ x)_i since rows sum to 1
        z = eng.matmul(eng.sub(x, eng.matmul(aff, x)), eng.transpose(params.transform))
    if not pre_activation:
        z = _delta(z, params.norm)
    return nodes.with_features(z)


def temporal_convolution(nodes, params, pre_activation=False):
    """Convolve each node's cross-frame nearest-node sequence in time.

    For node i, the frame-tau element is the frame-tau node with the
    largest inner product to x_i (ties to the lower node index; the node's
    own frame is searched like any other). The convolved sequence is read
    at the node's own frame position.
    """
    x = nodes.features
    t_len, per = nodes.n_frames, nodes.nodes_per_frame
    k = nodes.n_nodes
    sims = x.data @ np.swapaxes(x.data, -1, -2)                    # (..., K, K)
    blocks = sims.reshape(sims.shape[:-1] + (t_len, per))
    within = np.argmax(blocks, axis=-1)                            # (..., K, T)
    idx = within + np.arange(t_len) * per                          # global node ids
    lead = x.data.shape[:-2]
    seq = eng.take_rows(x, idx.reshape(lead + (k * t_len,)))
    seq = eng.reshape(seq, lead + (k, t_len, x.data.shape[-1]))
    conv = eng.conv1d_same(seq, params.kernel)                     # (..., K, T, C_out)
    own = np.broadcast_to(nodes.frame_index[:, None], lead + (k, 1))
    z = eng.take_rows(conv, own)
    z = eng.reshape(z, lead + (k, conv.data.shape[-1]))
    if not pre_activation:
        z = _delta(z, params.norm)
    return nodes.with_features(z)


def background_incorporation(nodes, bg, params, pre_activation=False):
    """Each node relates to its frame's background grid: the affinity
    vector itself is mapped to features (relation branch) and the grid is
    affinity-aggregated (aggregation branch)."""
    if bg is None:
        raise ConfigurationError("background_incorporation requires a background map")
    x = nodes.features
    k = nodes.n_nodes
    c = x.data.shape[-1]
    m = bg.maps
    t_len = m.data.shape[-4]
    grid = bg.grid_cells
    if m.data.shape[-1] != c:
        raise DimensionError("background channel dim must match node features")
    if nodes.frame_index.max() >= t_len:
        raise ConfigurationError("frame_index addresses a missing background frame")
    lead = x.data.shape[:-2]
    flat = eng.reshape(m, lead + (t_len, grid * c))
    own = np.broadcast_to(nodes.frame_index, lead + (k,))
    cells = eng.reshape(eng.take_rows(flat, own), lead + (k, grid, c))
    xu = eng.reshape(eng.matmul(x, params.affinity), lead + (k, 1, c))
    logits = eng.sum_(eng.mul(xu, cells), axis=-1)                 # (..., K, G)
    aff = eng.row_softmax(logits)
    z_rel = eng.matmul(aff, eng.transpose(params.relation))        # V_b a_i
    agg = eng.reshape(eng.matmul(eng.reshape(aff, lead + (k, 1, grid)), cells), lead + (k, c))
    z_agg = eng.matmul(agg, eng.transpose(params.transform))       # sum_j a_ij W_b y_j
    z = eng.add(z_rel, z_agg)
    if not pre_activation:
        z = _delta(z, params.norm)
    return nodes.with_features(z)


def node_attention(nodes, params):
    """Gate each node by a sigmoid weight computed from its similarities
    and relative positions to its top-M similar nodes (self excluded).

    No normalization or activation follows: the output is w_i * x_i. When
    fewer than M other nodes exist, M is clamped and the similarity and
    position blocks are zero padded to their nominal lengths.
    """
    x = nodes.features
    k = nodes.n_nodes
    m_top = params.m_top
    m_eff = min(m_top, k - 1)
    lead = x.data.shape[:-2]

    sims = eng.matmul(x, eng.transpose(x))                         # (..., K, K)
    masked = sims.data.copy()
    diag = np.arange(k)
    masked[..., diag, diag] = -np.inf
    idx = eng.topk_indices(masked, m_eff)                          # (..., K, M_eff)
    a_top = eng.take_last(sims, idx)

    pos = np.broadcast_to(nodes.positions, lead + (k, 3))
    pos_flat = pos.reshape(-1, k, 3)
    idx_flat = idx.reshape(-1, k * m_eff)
    picked = pos_flat[np.arange(pos_flat.shape[0])[:, None], idx_flat].reshape(lead + (k, m_eff, 3))
    dpos = (pos[..., :, None, :] - picked).reshape(lead + (k, 3 * m_eff))

    parts = [a_top]
    if m_eff < m_top:
        parts.append(eng.constant(np.zeros(lead + (k, m_top - m_eff))))
    parts.append(eng.constant(dpos))
    if m_eff < m_top:
        parts.append(eng.constant(np.zeros(lead + (k, 3 * (m_top - m_eff)))))
    feat = eng.concat(parts, axis=-1)                              # (..., K, 4M)
    w = eng.sigmoid(eng.matmul(feat, eng.transpose(params.weight)))
    return nodes.with_features(eng.mul(w, x))


def zero_op(nodes):
    """All-zero features; positions preserved."""
    return nodes.with_features(eng.constant(np.zeros_like(nodes.features.data)))


def identity_op(nodes, dropout_rate, rng, training):
    """Features through dropout in training mode, untouched in eval mode."""
    return nodes.with_features(eng.dropout(nodes.features, dropout_rate, rng, training))


def channel_project(nodes, weight):
    """Per-node linear projection, applied once so the cell sees a fixed width."""
    x = nodes.features
    if weight.data.shape[-1] != x.data.shape[-1]:
        raise DimensionError(
            f"projection expects C_in={weight.data.shape[-1]}, features have {x.data.shape[-1]}"
        )
    return nodes.with_features(eng.matmul(x, eng.transpose(weight)))
