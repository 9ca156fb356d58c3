"""Planted-signal synthetic datasets, one signal family per graph operation.

Each family hides the class label in a relational mechanism that global
mean pooling cannot see:

- temporal: a monotonic drift along a fixed direction, with the sign of
  the drift as the class. The per-frame offsets are a centered ramp, so
  pooling over frames cancels the signal exactly and only order-aware
  readers recover it.
- difference: two clusters along a fixed direction with asymmetric sizes
  and magnitudes (2 nodes at +2b vs 4 at -b, mirrored for the other
  class). Offsets sum to zero, so per-sample means carry nothing; a large
  random common offset shared by all nodes drowns per-node readouts while
  pairwise differences cancel it exactly.
- background: node features carry no class signal at all; a pattern
  vector sits in the grid cell nearest the node anchor for one class and
  in the farthest cell for the other. The cell means match exactly, so
  only a reader of per-cell structure can tell them apart.
- aggregation: all nodes are copies of +q / -q for an axis q chosen from
  {q1, q2} (class 0) or {q3, q4} (class 1). Sample means are exactly the
  family base; the class lives in which prototype pair co-occurs.

Samples come in twin pairs: consecutive samples share every random draw
and differ only in the class-dependent construction, which makes the
pooled-feature invariances exact and the class marginals identical.

The direction bank (drift direction, prototypes, anchors, base offsets)
depends only on the structural fields (families, T, K, C, grid), not on
the seed: datasets generated with different seeds are fresh samples of
the same planted mechanisms, so structure weights learned on one transfer
to another.
"""

import hashlib
from dataclasses import dataclass

import numpy as np

from . import engine as eng
from .container import read_container, write_container
from .engine import ConfigurationError
from .ops import BackgroundMap, NodeSet

FAMILIES = ("aggregation", "background", "difference", "temporal")

# family signal scales
SCATTER_SD = 0.3
COMMON_OFFSET_SD = 1.5
DRIFT_SCALE = 2.0
CLUSTER_SCALE = 1.0
PROTO_SCALE = 1.5
PROTO_SCATTER_SD = 0.2
PATTERN_SCALE = 2.0
BASE_OFFSET_SCALE = 1.0
BG_BASE_SD = 0.5
ANCHOR_JITTER = 0.08
OUTLIER_SD = 2.0


@dataclass(frozen=True)
class GeneratorSpec:
    families: tuple = FAMILIES
    n_frames: int = 4
    nodes_per_frame: int = 6
    channels: int = 16
    grid: tuple = (4, 4)
    noise: float = 0.05
    outlier_rate: float = 0.05
    n_samples: int = 800
    seed: int = 0

    def __post_init__(self):
        fams = tuple(sorted(set(self.families)))
        for f in fams:
            if f not in FAMILIES:
                raise ConfigurationError(f"unknown family {f!r}")
        if not fams:
            raise ConfigurationError("at least one family required")
        object.__setattr__(self, "families", fams)
        object.__setattr__(self, "grid", tuple(self.grid))
        if self.noise < 0:
            raise ConfigurationError("noise must be non-negative")
        if not 0 <= self.outlier_rate < 1:
            raise ConfigurationError("outlier_rate must be in [0, 1)")
        if self.n_frames < 1 or self.nodes_per_frame < 1 or self.channels < 2:
            raise ConfigurationError("invalid dimensions")
        if self.n_samples % (2 * len(fams)) != 0:
            raise ConfigurationError(
                f"n_samples must be divisible by {2 * len(fams)} for class balance"
            )

    @property
    def n_classes(self):
        return 2 * len(self.families)

    @property
    def global_dim(self):
        return 2 * self.channels

    def to_dict(self):
        return {
            "families": list(self.families),
            "n_frames": self.n_frames,
            "nodes_per_frame": self.nodes_per_frame,
            "channels": self.channels,
            "grid": list(self.grid),
            "noise": self.noise,
            "outlier_rate": self.outlier_rate,
            "n_samples": self.n_samples,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["families"] = tuple(d["families"])
        d["grid"] = tuple(d["grid"])
        return cls(**d)


@dataclass
class VideoSample:
    """One synthetic video: node set, background map, global feature, label."""

    nodes: NodeSet
    background: BackgroundMap
    global_feature: np.ndarray
    label: int
    group: str


@dataclass
class Dataset:
    spec: GeneratorSpec
    features: np.ndarray          # (n, K_total, C)
    positions: np.ndarray         # (n, K_total, 3)
    frame_index: np.ndarray       # (K_total,)
    maps: np.ndarray              # (n, T, h, w, C)
    global_features: np.ndarray   # (n, 2C)
    labels: np.ndarray            # (n,)
    group_ids: np.ndarray         # (n,) index into spec.families

    def __len__(self):
        return self.features.shape[0]

    @property
    def n_classes(self):
        return self.spec.n_classes

    def group_name(self, gid):
        return self.spec.families[gid]

    def sample(self, i):
        nodes = NodeSet(
            features=eng.constant(self.features[i]),
            positions=self.positions[i],
            frame_index=self.frame_index,
            n_frames=self.spec.n_frames,
        )
        return VideoSample(
            nodes=nodes,
            background=BackgroundMap(eng.constant(self.maps[i])),
            global_feature=self.global_features[i],
            label=int(self.labels[i]),
            group=self.group_name(int(self.group_ids[i])),
        )

    def subset(self, indices):
        indices = np.asarray(indices)
        return Dataset(
            spec=self.spec,
            features=self.features[indices],
            positions=self.positions[indices],
            frame_index=self.frame_index,
            maps=self.maps[indices],
            global_features=self.global_features[indices],
            labels=self.labels[indices],
            group_ids=self.group_ids[indices],
        )


# ---------------------------------------------------------------------------
# direction bank
# ---------------------------------------------------------------------------

def _bank_rng(family, spec):
    key = f"bank:{family}:{spec.n_frames}:{spec.nodes_per_frame}:{spec.channels}:{spec.grid}"
    digest = hashlib.sha256(key.encode()).digest()
    return np.random.default_rng(int.from_bytes(digest[:8], "little"))


def _orthonormal(rng, c, count):
    q, _ = np.linalg.qr(rng.standard_normal((c, max(count, 1))))
    return q.T[:count]


def _family_bank(family, spec):
    rng = _bank_rng(family, spec)
    c = spec.channels
    h, w = spec.grid
    bank = {"base": BASE_OFFSET_SCALE * _orthonormal(rng, c, 1)[0]}
    bank["bg_base"] = BG_BASE_SD * rng.standard_normal((h, w, c))
    if family == "temporal":
        bank["drift"] = _orthonormal(rng, c, 1)[0]
    elif family == "difference":
        bank["axis"] = _orthonormal(rng, c, 1)[0]
    elif family == "aggregation":
        bank["protos"] = _orthonormal(rng, c, 4) * PROTO_SCALE
    elif family == "background":
        bank["anchor"] = rng.uniform(0.2, 0.8, size=2)
        bank["pattern"] = PATTERN_SCALE * _orthonormal(rng, c, 1)[0]
        centers = np.stack(
            [np.repeat((np.arange(h) + 0.5) / h, w), np.tile((np.arange(w) + 0.5) / w, h)],
            axis=1,
        )
        dist = np.linalg.norm(centers - bank["anchor"], axis=1)
        bank["near_cell"] = int(np.argmin(dist))
        bank["far_cell"] = int(np.argmax(dist))
    return bank


# ---------------------------------------------------------------------------
# per-family sample construction
# ---------------------------------------------------------------------------

def _positions(rng, spec, anchor=None):
    k_total = spec.n_frames * spec.nodes_per_frame
    pos = np.empty((k_total, 3))
    if anchor is None:
        pos[:, :2] = rng.random((k_total, 2))
    else:
        pos[:, :2] = np.clip(anchor + ANCHOR_JITTER * rng.standard_normal((k_total, 2)), 0.0, 1.0)
    pos[:, 2] = np.repeat(np.arange(spec.n_frames), spec.nodes_per_frame) / max(spec.n_frames - 1, 1)
    return pos


def _build_sample(family, bank, label01, rng, spec):
    t_len, per, c = spec.n_frames, spec.nodes_per_frame, spec.channels
    k_total = t_len * per
    h, w = spec.grid
    feats = np.tile(bank["base"], (k_total, 1))
    maps = np.tile(bank["bg_base"], (t_len, 1, 1, 1))
    anchor = bank.get("anchor")
    pos = _positions(rng, spec, anchor=anchor)

    if family == "temporal":
        feats += COMMON_OFFSET_SD * rng.standard_normal(c)
        ramp = np.arange(t_len) / max(t_len - 1, 1) - 0.5
        sign = 1.0 if label01 == 0 else -1.0
        drift = sign * DRIFT_SCALE * np.outer(ramp, bank["drift"])
        feats += np.repeat(drift, per, axis=0)
        feats += SCATTER_SD * rng.standard_normal((k_total, c))
    elif family == "difference":
        feats += COMMON_OFFSET_SD * rng.standard_normal(c)
        n_hi = max(1, per // 3)
        n_lo = per - n_hi
        hi_mag = CLUSTER_SCALE * n_lo / n_hi
        lo_mag = CLUSTER_SCALE
        sign = 1.0 if label01 == 0 else -1.0
        for t in range(t_len):
            members = rng.permutation(per)
            offs = np.empty(per)
            offs[members[:n_hi]] = sign * hi_mag
            offs[members[n_hi:]] = -sign * lo_mag
            feats[t * per:(t + 1) * per] += np.outer(offs, bank["axis"])
        feats += SCATTER_SD * rng.standard_normal((k_total, c))
    elif family == "aggregation":
        pick = rng.integers(0, 2)
        axis = bank["protos"][2 * label01 + pick]
        for t in range(t_len):
            members = rng.permutation(per)
            offs = np.zeros(per)
            offs[members[: per // 2]] = 1.0
            offs[members[per // 2: 2 * (per // 2)]] = -1.0
            feats[t * per:(t + 1) * per] += np.outer(offs, axis)
        feats += PROTO_SCATTER_SD * rng.standard_normal((k_total, c))
    elif family == "background":
        cell = bank["near_cell"] if label01 == 0 else bank["far_cell"]
        maps = maps.reshape(t_len, h * w, c).copy()
        maps[:, cell] += bank["pattern"]
        maps = maps.reshape(t_len, h, w, c)
        feats += SCATTER_SD * rng.standard_normal((k_total, c))
    else:
        raise ConfigurationError(f"unknown family {family!r}")

    if spec.outlier_rate > 0:
        outliers = rng.random(k_total) < spec.outlier_rate
        draws = OUTLIER_SD * rng.standard_normal((k_total, c))
        feats[outliers] = draws[outliers]

    if spec.noise > 0:
        feats = feats + spec.noise * rng.standard_normal(feats.shape)
        maps = maps + spec.noise * rng.standard_normal(maps.shape)

    return feats, pos, maps


def generate(spec):
    """Build a deterministic dataset: equal counts per (family, class) and
    consecutive twin samples sharing all random draws except the class."""
    fams = spec.families
    per_family = spec.n_samples // len(fams)
    k_total = spec.n_frames * spec.nodes_per_frame
    h, w = spec.grid
    n = spec.n_samples

    features = np.empty((n, k_total, spec.channels))
    positions = np.empty((n, k_total, 3))
    maps = np.empty((n, spec.n_frames, h, w, spec.channels))
    labels = np.empty(n, dtype=np.int64)
    group_ids = np.empty(n, dtype=np.int64)

    i = 0
    for f_idx, family in enumerate(fams):
        bank = _family_bank(family, spec)
        for pair in range(per_family // 2):
            seq = np.random.SeedSequence([spec.seed, f_idx, pair])
            state = seq.generate_state(4)
            for cls in (0, 1):
                rng = np.random.default_rng(np.random.PCG64(state))
                feats, pos, m = _build_sample(family, bank, cls, rng, spec)
                features[i] = feats
                positions[i] = pos
                maps[i] = m
                labels[i] = 2 * f_idx + cls
                group_ids[i] = f_idx
                i += 1

    global_features = np.concatenate(
        [features.mean(axis=1), maps.reshape(n, -1, spec.channels).mean(axis=1)],
        axis=1,
    )
    return Dataset(
        spec=spec,
        features=features,
        positions=positions,
        frame_index=np.repeat(np.arange(spec.n_frames), spec.nodes_per_frame),
        maps=maps,
        global_features=global_features,
        labels=labels,
        group_ids=group_ids,
    )


# ---------------------------------------------------------------------------
# serialization
# ---------------------------------------------------------------------------

_MAGIC = b"GOPSDATA1\n"
_ARRAYS = ("features", "positions", "frame_index", "maps", "global_features", "labels", "group_ids")


def save(dataset, path):
    meta = {"format_version": 1, "spec": dataset.spec.to_dict()}
    arrays = [(name, getattr(dataset, name)) for name in _ARRAYS]
    write_container(path, _MAGIC, meta, arrays)


def load(path):
    meta, arrays = read_container(path, _MAGIC)
    if meta.get("format_version") != 1:
        raise ValueError(f"unsupported dataset format version {meta.get('format_version')}")
    spec = GeneratorSpec.from_dict(meta["spec"])
    return Dataset(spec=spec, **arrays)


# ---------------------------------------------------------------------------
# per-family discriminability
# ---------------------------------------------------------------------------

def family_discriminability_report(dataset, seeds=(0,), epochs=12, operations=None):
    """Accuracy matrix of single-operation models per (family, operation).

    Each cell trains a fresh single-operation classifier on the family's
    samples (labels remapped to the within-family class) and reports
    held-out accuracy averaged over the seeds. Implemented on top of the
    trainer's single-op recipe; imported lazily to keep this module free
    of training machinery at import time.
    """
    from .trainer import single_op_family_accuracy

    if operations is None:
        operations = ("zero", "identity", "feat_aggr", "diff_prop", "temp_conv", "back_incor", "node_att")
    rows = {}
    for family in dataset.spec.families:
        rows[family] = {}
        for op_kind in operations:
            accs = [
                single_op_family_accuracy(dataset, family, op_kind, seed=seed, epochs=epochs)
                for seed in seeds
            ]
            rows[family][op_kind] = float(np.mean(accs))
    return rows
