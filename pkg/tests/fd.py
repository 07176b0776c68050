"""Central finite-difference gradient checking used across the test suite."""
from __future__ import annotations

import numpy as np

from multiway.tensor import Tape, Tensor, backward, record_into, zero_grads


def analytic_grads(fn, tensors):
    """Run fn under a fresh tape and return each tensor's gradient array."""
    tape = Tape()
    with record_into(tape):
        loss = fn(*tensors)
    zero_grads(tensors)
    backward(loss, tape)
    return [t.grad for t in tensors]


def numeric_grad(fn, tensors, which: int, h: float = 1e-5) -> np.ndarray:
    """Central differences of fn wrt tensors[which], one entry at a time."""
    target = tensors[which]
    flat = target.data.reshape(-1)
    out = np.zeros_like(flat)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        up = float(fn(*tensors).data)
        flat[i] = orig - h
        down = float(fn(*tensors).data)
        flat[i] = orig
        out[i] = (up - down) / (2.0 * h)
    return out.reshape(target.data.shape)


def assert_grads_match(fn, tensors, h: float = 1e-5, rtol: float = 1e-6, atol: float = 1e-8):
    """Compare reverse-mode gradients against finite differences for every input."""
    analytic = analytic_grads(fn, tensors)
    for i, got in enumerate(analytic):
        want = numeric_grad(fn, tensors, i, h=h)
        np.testing.assert_allclose(got, want, rtol=rtol, atol=atol,
                                   err_msg=f"gradient mismatch for input {i}")


def rel_err(got: np.ndarray, want: np.ndarray) -> float:
    """max |got-want| / max(1, |want|) elementwise, as a single scalar."""
    denom = np.maximum(1.0, np.abs(want))
    return float(np.max(np.abs(got - want) / denom)) if want.size else 0.0


def sampled_worst_rel_err(fn, tensors, n_per_tensor: int = 2, h: float = 1e-5,
                          seed: int = 0) -> float:
    """Spot-check gradients of a large composition: central differences at a
    few random entries of every tensor, returning the worst relative error."""
    rng = np.random.default_rng(seed)
    analytic = analytic_grads(fn, tensors)
    worst = 0.0
    for tensor, grad in zip(tensors, analytic):
        flat = tensor.data.reshape(-1)
        grad_flat = grad.reshape(-1)
        picks = rng.choice(flat.size, size=min(n_per_tensor, flat.size), replace=False)
        for j in picks:
            orig = flat[j]
            flat[j] = orig + h
            up = float(fn(*tensors).data)
            flat[j] = orig - h
            down = float(fn(*tensors).data)
            flat[j] = orig
            numeric = (up - down) / (2.0 * h)
            denom = max(1.0, abs(grad_flat[j]))
            worst = max(worst, abs(numeric - grad_flat[j]) / denom)
    return worst
