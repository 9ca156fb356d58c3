"""Brute-force loop implementations of the graph operations.

Deliberately independent of the library: plain python loops over numpy
scalars/vectors, used as oracles for the vectorized pre-activation paths.
"""

import numpy as np


def row_softmax_oracle(row, keep=None):
    row = np.asarray(row, dtype=np.float64)
    if keep is None:
        keep = np.ones(len(row), dtype=bool)
    out = np.zeros(len(row))
    hi = max(row[j] for j in range(len(row)) if keep[j])
    total = 0.0
    for j in range(len(row)):
        if keep[j]:
            out[j] = np.exp(row[j] - hi)
            total += out[j]
    return out / total


def feature_aggregation_oracle(x, u, w):
    k = x.shape[0]
    z = np.zeros((k, w.shape[0]))
    for i in range(k):
        logits = np.array([x[i] @ u @ x[j] for j in range(k)])
        a = row_softmax_oracle(logits)
        for j in range(k):
            z[i] += a[j] * (w @ x[j])
    return z


def difference_propagation_oracle(x, u, w):
    k = x.shape[0]
    z = np.zeros((k, w.shape[0]))
    if k < 2:
        return z
    for i in range(k):
        logits = np.array([x[i] @ u @ x[j] for j in range(k)])
        keep = np.ones(k, dtype=bool)
        keep[i] = False
        a = row_softmax_oracle(logits, keep)
        for j in range(k):
            if j != i:
                z[i] += a[j] * (w @ (x[i] - x[j]))
    return z


def conv1d_same_oracle(seq, kernel):
    t_len = seq.shape[0]
    k, c_out, _ = kernel.shape
    half = (k - 1) // 2
    out = np.zeros((t_len, c_out))
    for t in range(t_len):
        for tap in range(k):
            src = t + tap - half
            if 0 <= src < t_len:
                out[t] += kernel[tap] @ seq[src]
    return out


def temporal_convolution_oracle(x, frame_index, n_frames, kernel):
    k_total = x.shape[0]
    per = k_total // n_frames
    z = np.zeros((k_total, kernel.shape[1]))
    for i in range(k_total):
        seq = np.zeros((n_frames, x.shape[1]))
        for tau in range(n_frames):
            best, best_val = None, -np.inf
            for j in range(tau * per, (tau + 1) * per):
                val = float(x[i] @ x[j])
                if val > best_val:
                    best, best_val = j, val
            seq[tau] = x[best]
        z[i] = conv1d_same_oracle(seq, kernel)[frame_index[i]]
    return z


def background_incorporation_oracle(x, maps, frame_index, u_b, v_b, w_b):
    k_total = x.shape[0]
    z = np.zeros((k_total, v_b.shape[0]))
    for i in range(k_total):
        cells = maps[frame_index[i]].reshape(-1, x.shape[1])
        logits = np.array([x[i] @ u_b @ cells[j] for j in range(cells.shape[0])])
        a = row_softmax_oracle(logits)
        z_rel = v_b @ a
        z_agg = np.zeros(w_b.shape[0])
        for j in range(cells.shape[0]):
            z_agg += a[j] * (w_b @ cells[j])
        z[i] = z_rel + z_agg
    return z


def node_attention_oracle(x, positions, w_n, m_top):
    k_total = x.shape[0]
    m_eff = min(m_top, k_total - 1)
    z = np.zeros_like(x)
    weights = np.zeros(k_total)
    for i in range(k_total):
        sims = [(-(x[i] @ x[j]), j) for j in range(k_total) if j != i]
        sims.sort()
        chosen = [j for _, j in sims[:m_eff]]
        a = np.zeros(m_top)
        ds = np.zeros(3 * m_top)
        for m, j in enumerate(chosen):
            a[m] = x[i] @ x[j]
            ds[3 * m:3 * m + 3] = positions[i] - positions[j]
        feat = np.concatenate([a, ds])
        w = 1.0 / (1.0 + np.exp(-(w_n[0] @ feat)))
        weights[i] = w
        z[i] = w * x[i]
    return z, weights


def mutual_information_bits(counts):
    """Mutual information in bits of a joint count table (2-D array)."""
    counts = np.asarray(counts, dtype=np.float64)
    total = counts.sum()
    if total == 0:
        return 0.0
    p = counts / total
    px = p.sum(axis=1, keepdims=True)
    py = p.sum(axis=0, keepdims=True)
    mi = 0.0
    for i in range(p.shape[0]):
        for j in range(p.shape[1]):
            if p[i, j] > 0:
                mi += p[i, j] * np.log2(p[i, j] / (px[i, 0] * py[0, j]))
    return float(mi)
