"""Central finite-difference checking of analytic gradients.

``relative_errors`` rebuilds the loss from scratch for every perturbed
evaluation, so the numeric estimate never reuses state from the analytic
path.

The error for a coordinate is |analytic - numeric| / max(|analytic|,
|numeric|, floor). The floor matters: at step size h the central
difference carries O(h^2) truncation noise regardless of how small the
true gradient is, so coordinates far below the parameter's gradient scale
are held to the absolute budget tol * floor instead of a raw ratio.
"""

import numpy as np


def numeric_gradient(build_loss, param, h=1e-3):
    """Central differences of the scalar build_loss() w.r.t. one parameter."""
    flat = param.data.reshape(-1)
    grad = np.zeros_like(flat)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        up = build_loss().data.item()
        flat[i] = orig - h
        down = build_loss().data.item()
        flat[i] = orig
        grad[i] = (up - down) / (2.0 * h)
    return grad.reshape(param.data.shape)


def relative_errors(build_loss, params, h=1e-3, floor=0.05):
    """Per-coordinate relative error of analytic vs numeric gradients.

    build_loss must construct a fresh scalar loss Tensor on every call
    (parameters are mutated in place between calls). Returns one flat
    error array per parameter, in order.
    """
    for p in params:
        p.zero_grad()
    loss = build_loss()
    loss.backward()
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]
    errors = []
    for p, a in zip(params, analytic):
        n = numeric_gradient(build_loss, p, h=h)
        denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
        errors.append((np.abs(a - n) / denom).reshape(-1))
    return errors


def max_relative_error(build_loss, params, h=1e-3, floor=0.05):
    errs = relative_errors(build_loss, params, h=h, floor=floor)
    return max(float(e.max()) for e in errs if e.size)
