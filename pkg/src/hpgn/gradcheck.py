"""Finite-difference verification of analytic gradients.

Checks run in float64 only: central differences at float32 resolution cannot
separate truncation error from round-off.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad


class DeterminismError(RuntimeError):
    """Two forward passes of a supposedly deterministic program differed."""


@dataclass
class ParamCheck:
    name: str
    max_rel_error: float
    passed: bool


@dataclass
class GradCheckReport:
    checks: list[ParamCheck]
    eps: float
    tol: float

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks)

    @property
    def max_rel_error(self) -> float:
        return max((c.max_rel_error for c in self.checks), default=0.0)

    def lines(self):
        for c in self.checks:
            status = "ok" if c.passed else "FAIL"
            yield f"{c.name:<28s} max_rel_err={c.max_rel_error:.3e}  {status}"


def _run(program, param_values):
    tape = ad.Tape(dtype=np.float64)
    params = [tape.parameter(v) for v in param_values]
    loss = program(tape, params)
    return tape, params, loss


def gradcheck(program, params: dict[str, np.ndarray], eps: float = 1e-5,
              tol: float = 1e-4) -> GradCheckReport:
    """Compare analytic gradients of ``program`` against central differences.

    ``program(tape, tensors)`` must build a scalar loss from the parameter
    tensors, in order matching ``params``.  Relative error per coordinate is
    |a - n| / max(|a|, |n|, 1e-8).
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    names = list(params)
    values = [np.asarray(params[n], dtype=np.float64) for n in names]

    tape, tensors, loss = _run(program, values)
    _, _, loss2 = _run(program, values)
    if loss.data != loss2.data:
        raise DeterminismError("program is not deterministic: two forward passes differ")
    grads = ad.backward(tape, loss)

    checks = []
    for name, value, tensor in zip(names, values, tensors):
        analytic = grads[tensor.node_id]
        numeric = np.zeros_like(value)
        flat = value.reshape(-1)
        nflat = numeric.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            _, _, lp = _run(program, values)
            flat[i] = orig - eps
            _, _, lm = _run(program, values)
            flat[i] = orig
            nflat[i] = (float(lp.data) - float(lm.data)) / (2.0 * eps)
        denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
        rel = float(np.max(np.abs(analytic - numeric) / denom)) if value.size else 0.0
        checks.append(ParamCheck(name, rel, rel < tol))
    return GradCheckReport(checks, eps, tol)
