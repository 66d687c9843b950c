"""Finite-difference gradient checking shared by the test modules."""

import numpy as np

from immunolab import tensor as T
from immunolab.tensor import GradientTape, Tensor

FD_STEP = 1e-5


def numeric_grad(f, x: np.ndarray, h: float = FD_STEP) -> np.ndarray:
    """Central differences of the scalar function ``f`` at ``x`` (float64)."""
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat, gflat = x.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        hi = f(x)
        flat[i] = old - h
        lo = f(x)
        flat[i] = old
        gflat[i] = (hi - lo) / (2 * h)
    return g


def rel_err(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Largest elementwise error relative to the gradient's own scale."""
    scale = max(np.abs(analytic).max(), np.abs(numeric).max(), 1e-12)
    return float(np.abs(analytic - numeric).max() / scale)


def check_grads(build, inputs: list[np.ndarray], seed: int = 0) -> float:
    """Compare tape gradients of ``sum(build(*tensors) * R)`` with central differences.

    ``R`` is a fixed random projection, so the whole Jacobian is exercised.
    Returns the worst relative error over all inputs.
    """
    with T.precision("float64"):
        ts = [Tensor(x, requires_grad=True) for x in inputs]
        with GradientTape() as tape:
            out = build(*ts)
            r = np.random.default_rng(seed + 991).standard_normal(out.shape)
            loss = T.sum(T.mul(out, Tensor(r)))
        analytic = tape.gradient(loss, ts)
        worst = 0.0
        for i, x in enumerate(inputs):

            def f(xi, i=i):
                args = [Tensor(xi if j == i else inputs[j]) for j in range(len(inputs))]
                return float(np.sum(build(*args).data * r))

            worst = max(worst, rel_err(analytic[i], numeric_grad(f, x)))
    return worst


# acceptance verdicts collected during the session, echoed in the terminal summary
ACCEPTANCE_LINES: dict[str, str] = {}


def report(criterion: str, passed: bool, detail: str) -> bool:
    line = f"{criterion} {'PASS' if passed else 'FAIL'}: {detail}"
    ACCEPTANCE_LINES[criterion] = line
    print(line)
    return passed
