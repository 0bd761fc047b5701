"""Finite-difference verification of reverse-mode gradients.

`grad_check` compares autodiff gradients of a scalar-valued function against
central differences. The per-op suite enumerates every registered op with a
small random harness so the whole operator set is verified mechanically.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad


@dataclass
class GradCheckReport:
    """Max relative error per input plus an overall verdict."""

    errors: list = field(default_factory=list)  # one float per input
    tolerance: float = 1e-4

    @property
    def max_error(self):
        return max(self.errors) if self.errors else 0.0

    @property
    def passed(self):
        return self.max_error <= self.tolerance


def _relative_error(analytic, numeric):
    scale = max(np.max(np.abs(analytic), initial=0.0), np.max(np.abs(numeric), initial=0.0))
    diff = float(np.max(np.abs(analytic - numeric), initial=0.0))
    return diff / max(scale, 1e-6)


def grad_check(fn, inputs, step=1e-5, tolerance=1e-4, max_coords=None, rng=None):
    """Check d(fn)/d(input) for each input against central differences.

    fn maps Tensors to a scalar Tensor; inputs are numpy arrays. When an
    input is large, `max_coords` caps the number of (randomly chosen)
    coordinates probed by finite differences; the autodiff side is always
    the full gradient. Reports only, never raises on mismatch.
    """
    rng = rng or np.random.default_rng(0)
    tensors = [ad.Tensor(x, requires_grad=True) for x in inputs]
    loss = fn(*tensors)
    grads = ad.backward(loss, leaves=tensors)

    def eval_at(arrays):
        with ad.no_grad():
            out = fn(*[ad.Tensor(a) for a in arrays])
        return out.item()

    report = GradCheckReport(tolerance=tolerance)
    base = [np.array(x, dtype=np.float64) for x in inputs]
    for i, x in enumerate(base):
        analytic = grads[tensors[i]]
        flat = x.ravel()
        coords = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            coords = rng.choice(flat.size, size=max_coords, replace=False)
        numeric = np.zeros(len(coords))
        for j, c in enumerate(coords):
            orig = flat[c]
            flat[c] = orig + step
            hi = eval_at(base)
            flat[c] = orig - step
            lo = eval_at(base)
            flat[c] = orig
            numeric[j] = (hi - lo) / (2.0 * step)
        report.errors.append(_relative_error(analytic.ravel()[coords], numeric))
    return report


# -- per-op harness -------------------------------------------------------------


class _WeightedScalar:
    """Reduce to a scalar with weights fixed at construction, so the harness
    function is deterministic across repeated evaluations."""

    def __init__(self, rng):
        self._rng = rng
        self._w = None

    def __call__(self, t):
        if self._w is None:
            self._w = self._rng.normal(size=t.shape)
        return (t * ad.constant(self._w)).sum()


def op_test_cases(seed=0):
    """One (name, fn, inputs) harness per registered op.

    Inputs are drawn away from non-smooth points (relu/abs kinks, div poles)
    so central differences are valid.
    """
    rng = np.random.default_rng(seed)

    def away_from_zero(shape, margin=0.2):
        x = rng.normal(size=shape)
        return x + np.sign(x) * margin

    cases = []
    weight_rng = np.random.default_rng(seed + 1)

    def case(name, fn_of, *inputs):
        reduce = _WeightedScalar(weight_rng)
        cases.append(
            (name, lambda *ts: reduce(fn_of(*ts)), [np.asarray(x, dtype=np.float64) for x in inputs])
        )

    case("add", ad.add, rng.normal(size=(4, 3)), rng.normal(size=(3,)))
    case("sub", ad.sub, rng.normal(size=(4, 3)), rng.normal(size=(4, 3)))
    case("mul", ad.mul, rng.normal(size=(4, 3)), rng.normal(size=(4, 1)))
    case("div", ad.div, rng.normal(size=(4, 3)), away_from_zero((4, 3)))
    case("matmul", ad.matmul, rng.normal(size=(4, 5)), rng.normal(size=(5, 3)))
    case("relu", ad.relu, away_from_zero((5, 4)))
    case("softplus", ad.softplus, rng.normal(size=(5, 4)))
    case("sigmoid", ad.sigmoid, rng.normal(size=(5, 4)))
    case("tanh", ad.tanh, rng.normal(size=(5, 4)))
    case("exp", ad.exp, rng.normal(size=(5, 4)))
    case("sin", ad.sin, rng.normal(size=(5, 4)))
    case("cos", ad.cos, rng.normal(size=(5, 4)))
    case("log", ad.log, rng.uniform(0.3, 3.0, size=(5, 4)))
    case("abs", ad.absolute, away_from_zero((5, 4)))
    case("sum", lambda a: ad.tensor_sum(a, axis=1), rng.normal(size=(4, 3, 2)))
    case("mean", lambda a: ad.tensor_mean(a, axis=(0, 2)), rng.normal(size=(4, 3, 2)))
    case("cumsum", lambda a: ad.cumsum(a, axis=1), rng.normal(size=(3, 5)))
    case("softmax", lambda a: ad.softmax(a, axis=-1), rng.normal(size=(4, 6)))
    case("concat", lambda a, b: ad.concat([a, b], axis=1), rng.normal(size=(3, 2)), rng.normal(size=(3, 4)))
    case("reshape", lambda a: ad.reshape(a, (6, 2)), rng.normal(size=(3, 4)))
    case("slice", lambda a: a[1:3, ::2], rng.normal(size=(4, 5)))
    case("broadcast", lambda a: ad.broadcast_to(a, (4, 3, 2)), rng.normal(size=(3, 1)))
    case("transpose", lambda a: ad.transpose(a, (1, 0, 2)), rng.normal(size=(3, 4, 2)))

    take_idx = rng.integers(0, 24, size=10)
    case("take", lambda a: ad.take(a, take_idx), rng.normal(size=(4, 6)))
    rows_idx = rng.integers(0, 5, size=7)
    case("take_rows", lambda a: ad.take_rows(a, rows_idx), rng.normal(size=(5, 3)))
    scat_idx = rng.integers(0, 4, size=6)
    case("scatter_add", lambda a: ad.scatter_add(a, scat_idx, 4), rng.normal(size=(6, 3)))
    case(
        "conv2d",
        lambda x, w: ad.conv2d(x, w, stride=2, padding=1),
        rng.normal(size=(6, 5, 2)),
        rng.normal(size=(3, 3, 2, 4)),
    )
    case(
        "conv3d",
        lambda x, w: ad.conv3d(x, w, stride=1, padding=1),
        rng.normal(size=(4, 4, 4, 2)),
        rng.normal(size=(3, 3, 3, 2, 3)),
    )
    return cases


def run_op_suite(seed=0, step=1e-5, tolerance=1e-4):
    """Run finite-difference checks for every registered op.

    Returns a list of (op name, max relative error, passed).
    """
    results = []
    for name, fn, inputs in op_test_cases(seed):
        report = grad_check(fn, inputs, step=step, tolerance=tolerance)
        results.append((name, report.max_error, report.passed))
    return results
