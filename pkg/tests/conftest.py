import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from fusionreg.tensor import Tape, Tensor, backward


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def t64(arr, requires_grad=False):
    return Tensor(np.asarray(arr, dtype=np.float64), requires_grad=requires_grad)


def finite_diff_check(build, params, n_samples=40, h=1e-4, rtol=1e-4,
                      atol=1e-7, rng=None, masks=None):
    """Compare recorded gradients against 64-bit central differences.

    build() runs the forward pass and returns a scalar loss tensor; params is
    the list of float64 leaf tensors to probe. masks (optional, same order)
    select coordinates that are safe to perturb (away from kinks). Returns
    (checked, passed, worst_rel_err).
    """
    rng = rng or np.random.default_rng(0)
    for p in params:
        assert p.dtype == np.float64, "finite differences need float64 leaves"
        p.grad = None
    with Tape():
        loss = build()
        backward(loss)
    checked = passed = 0
    worst = 0.0
    for k, p in enumerate(params):
        grad = p.grad
        assert grad is not None, "parameter received no gradient"
        flat_ok = None
        if masks is not None and masks[k] is not None:
            flat_ok = np.flatnonzero(masks[k].ravel())
        n_here = max(1, n_samples // len(params))
        for _ in range(n_here):
            if flat_ok is not None:
                if flat_ok.size == 0:
                    continue
                idx = int(flat_ok[rng.integers(flat_ok.size)])
            else:
                idx = int(rng.integers(p.data.size))
            orig = p.data.ravel()[idx]
            p.data.ravel()[idx] = orig + h
            lp = build().item()
            p.data.ravel()[idx] = orig - h
            lm = build().item()
            p.data.ravel()[idx] = orig
            fd = (lp - lm) / (2 * h)
            an = grad.ravel()[idx]
            err = abs(an - fd)
            rel = err / max(abs(an), abs(fd), 1e-12)
            ok = err <= atol or rel <= rtol
            checked += 1
            passed += ok
            if not ok:
                worst = max(worst, rel)
    return checked, passed, worst
