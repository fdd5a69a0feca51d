"""Central finite-difference verification of analytic gradients."""

from dataclasses import dataclass, field

import numpy as np


@dataclass
class GradcheckReport:
    max_rel_error: float
    per_input: dict = field(default_factory=dict)
    checked: int = 0

    def passed(self, tol):
        return self.max_rel_error <= tol


def rel_error(analytic, numeric, floor=1e-10):
    """Elementwise ``|a - n| / max(|a|, |n|, floor)``."""
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return np.abs(analytic - numeric) / denom


def gradcheck(fn, inputs, eps=1e-5, max_checks=None, seed=0, floor=1e-10):
    """Compare analytic gradients with central differences.

    Args:
        fn: callable taking no arguments that reads the arrays in ``inputs``
            (mutated in place during the check) and returns
            ``(loss, {name: grad})``.
        inputs: dict of name -> float64 array.
        eps: finite-difference step.
        max_checks: if set, check at most this many randomly chosen entries
            per input instead of all of them.
        floor: denominator floor for the relative error; gradients smaller
            than this are compared absolutely.
    """
    _, analytic = fn()
    analytic = {k: np.array(v, dtype=np.float64, copy=True) for k, v in analytic.items()}
    rng = np.random.default_rng(seed)
    report = GradcheckReport(max_rel_error=0.0)
    for name, arr in inputs.items():
        if arr.dtype != np.float64:
            raise TypeError(f"gradcheck needs float64 inputs, {name} is {arr.dtype}")
        flat = arr.reshape(-1)
        idx = np.arange(flat.size)
        if max_checks is not None and flat.size > max_checks:
            idx = np.sort(rng.choice(flat.size, size=max_checks, replace=False))
        grad = analytic[name].reshape(-1)
        worst = 0.0
        for i in idx:
            orig = flat[i]
            flat[i] = orig + eps
            plus = fn()[0]
            flat[i] = orig - eps
            minus = fn()[0]
            flat[i] = orig
            numeric = (plus - minus) / (2 * eps)
            worst = max(worst, float(rel_error(grad[i], numeric, floor)))
        report.per_input[name] = worst
        report.checked += len(idx)
        report.max_rel_error = max(report.max_rel_error, worst)
    return report
