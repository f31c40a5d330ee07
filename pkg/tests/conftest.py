from __future__ import annotations

import numpy as np
import pytest

from lkda.data import GenConfig, generate_corpus
from lkda.model import ModelConfig

H = 1e-5
REL_TOL = 1e-4


def rel_error(analytic: float, numeric: float) -> float:
    # floor keeps coordinates with vanishing gradient from dividing by ~0
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-6)


def gradcheck(loss_fn, tensors, coords=None, h: float = H):
    """Max relative error between backward() and central differences.

    ``coords`` lists ``(tensor_index, flat_index)``; default is every entry.
    """
    for t in tensors:
        t.grad = None
    loss = loss_fn()
    loss.backward()
    analytic = [np.zeros_like(t.values) if t.grad is None else t.grad.copy() for t in tensors]
    if coords is None:
        coords = [(i, j) for i, t in enumerate(tensors) for j in range(t.values.size)]
    worst = 0.0
    for i, j in coords:
        flat = tensors[i].values.reshape(-1)
        orig = flat[j]
        flat[j] = orig + h
        up = loss_fn().item()
        flat[j] = orig - h
        down = loss_fn().item()
        flat[j] = orig
        numeric = (up - down) / (2 * h)
        worst = max(worst, rel_error(analytic[i].reshape(-1)[j], numeric))
    return worst


TINY_GEN = GenConfig(seed=5, n_train=48, n_dev=16, n_test=16, min_nodes=8, max_nodes=12)
TINY_MODEL = ModelConfig(d_model=8, d_graph=8, d_joint=8, gnn_layers=2, heads=2)


@pytest.fixture(scope="session")
def tiny_corpus():
    return generate_corpus(TINY_GEN)


@pytest.fixture(scope="session")
def small_corpus():
    return generate_corpus(GenConfig(seed=11, n_train=160, n_dev=40, n_test=40))


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "RESULTS", [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines):
            terminalreporter.write_line(line)
