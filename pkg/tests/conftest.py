"""Shared fixtures/helpers for the test suite."""

from __future__ import annotations

import numpy as np
import pytest

from anchorplan.autodiff import Tensor, gradient_check


def check_op_gradients(build_loss, leaves: dict[str, Tensor], tol: float = 1e-6) -> float:
    """Finite-difference audit of a scalar-valued graph against its leaves."""
    report = gradient_check(leaves, build_loss, tol=tol, h=1e-5)
    assert report.passed, (
        f"max rel err {report.max_rel_err:.3e} at {report.worst_param}[{report.worst_index}]"
    )
    return report.max_rel_err


def scalarize(t: Tensor, rng: np.random.Generator) -> Tensor:
    """Reduce a tensor to a scalar with fixed random weights (catches transposed grads)."""
    w = rng.normal(size=t.shape)
    return (t * w).sum()


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(42)
