"""Finite-difference gradient verification.

The check runs on a float64 copy of the model so central differences at
step 1e-3 are limited by truncation error, not float32 rounding. The
finite-difference side never uses the reverse-mode machinery it checks.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field

import numpy as np

from .tensor import NonFiniteError, Tensor


@dataclass
class GradCheckReport:
    max_rel_error: float
    passed: bool
    tolerance: float
    per_param: dict = field(default_factory=dict)


def _default_loss(model, x):
    out = model(x)
    return (out * out).mean()


def grad_check(model, x, loss_fn=None, tolerance=1e-4, step=1e-3):
    """Compare backprop gradients against central finite differences.

    Returns a GradCheckReport with the worst relative error across all
    parameters. The model is deep-copied and promoted to float64; the
    original is untouched.
    """
    loss_fn = loss_fn or _default_loss
    model64 = copy.deepcopy(model).to_dtype(np.float64)
    x64 = Tensor(np.asarray(x, dtype=np.float64), dtype=np.float64)

    model64.zero_grad()
    loss = loss_fn(model64, x64)
    if not np.all(np.isfinite(loss.data)):
        raise NonFiniteError("grad_check: loss is non-finite at the evaluation point")
    loss.backward()

    def eval_loss():
        value = loss_fn(model64, x64).data
        if not np.all(np.isfinite(value)):
            raise NonFiniteError("grad_check: non-finite loss during finite differencing")
        return float(value)

    report = GradCheckReport(max_rel_error=0.0, passed=True, tolerance=tolerance)
    for name, param in model64.named_parameters():
        analytic = np.zeros_like(param.data) if param.grad is None else param.grad.copy()
        numeric = np.zeros_like(param.data)
        flat = param.data.reshape(-1)
        nflat = numeric.reshape(-1)
        for i in range(flat.size):
            saved = flat[i]
            flat[i] = saved + step
            up = eval_loss()
            flat[i] = saved - step
            down = eval_loss()
            flat[i] = saved
            nflat[i] = (up - down) / (2.0 * step)
        # relative error in the l2 norm, per parameter tensor; absolute when
        # both gradients are essentially zero
        diff = float(np.linalg.norm(analytic - numeric))
        denom = max(float(np.linalg.norm(analytic)), float(np.linalg.norm(numeric)))
        rel = diff if denom < 1e-8 else diff / denom
        report.per_param[name] = rel
        report.max_rel_error = max(report.max_rel_error, rel)
    report.passed = report.max_rel_error <= tolerance
    return report
