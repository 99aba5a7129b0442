"""Shared fixtures and the finite-difference gradient harness."""

import numpy as np
import pytest

from crossmodal import tensor as T


def fd_gradcheck(make_loss, params, h=1e-5, tol=1e-4):
    """Central finite differences against recorded gradients.

    `make_loss()` must rebuild the scalar loss from the current parameter
    values each call; comparison is relative with a unit floor so near-zero
    gradients are judged absolutely.
    """
    loss = make_loss()
    for p in params:
        p.zero_grad()
    T.backward(loss, params)
    worst = 0.0
    for p in params:
        analytic = p.grad.copy()
        flat = p.data.reshape(-1)
        numeric = np.zeros(flat.size)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            up = make_loss().item()
            flat[i] = orig - h
            down = make_loss().item()
            flat[i] = orig
            numeric[i] = (up - down) / (2 * h)
        numeric = numeric.reshape(p.data.shape)
        denom = np.maximum(np.maximum(np.abs(numeric), np.abs(analytic)), 1.0)
        worst = max(worst, float(np.max(np.abs(numeric - analytic) / denom)))
    assert worst < tol, f"finite-difference mismatch: {worst:.3e}"
    return worst


@pytest.fixture
def rng():
    return np.random.default_rng(20240817)
