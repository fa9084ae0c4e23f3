"""Central finite-difference gradient checking."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .tensor import Tape, Tensor, precision, record_branches


@dataclass
class GradCheckReport:
    max_rel_error: float
    tol: float
    checked: int
    per_input: list = field(default_factory=list)
    skipped: int = 0          # coordinates whose +-h evaluations straddled a kink

    @property
    def passed(self) -> bool:
        return bool(self.max_rel_error <= self.tol)

    def __bool__(self):
        return self.passed


def _rel_error(analytic: np.ndarray, numeric: np.ndarray, scale: float = 0.0) -> float:
    # relative to the larger gradient magnitude; elementwise ratios blow up near zero
    scale = max(np.abs(analytic).max(initial=0.0), np.abs(numeric).max(initial=0.0), scale, 1e-12)
    return float(np.abs(analytic - numeric).max(initial=0.0) / scale)


def _same_branches(a: list, b: list) -> bool:
    return len(a) == len(b) and all(np.array_equal(x, y) for x, y in zip(a, b))


def grad_check(f: Callable[..., Tensor], inputs: Sequence[np.ndarray], h: float = 1e-4,
               tol: float = 1e-5, dtype=np.float64, max_entries: int | None = None,
               seed: int = 0, skip_kinks: bool = False) -> GradCheckReport:
    """Compare backprop gradients of scalar ``f(*tensors)`` with central differences.

    The analytic pass runs in ``dtype``; finite differences always run in
    float64 so a float32 check measures the float32 backward pass, not the
    float32 rounding of the difference quotient. ``max_entries`` samples that
    many coordinates per input instead of all of them.

    With ``skip_kinks`` a coordinate is only compared when x, x+h and x-h put
    every non-smooth op (abs, relu, sampler cell) on the same branch; other
    coordinates are counted in ``skipped`` and replaced by fresh samples.
    """
    arrays = [np.asarray(a, dtype=np.float64) for a in inputs]
    with precision(dtype):
        ts = [Tensor(a, requires_grad=True) for a in arrays]
        with Tape() as tape:
            out = f(*ts)
            tape.backward(out)
        analytic = [np.zeros_like(a) if t.grad is None else t.grad.astype(np.float64) for a, t in zip(arrays, ts)]

    rng = np.random.default_rng(seed)

    def evaluate(vals):
        with precision(np.float64), record_branches() as log:
            value = float(f(*[Tensor(v) for v in vals]).data.sum())
        return value, log

    base = evaluate(arrays)[1] if skip_kinks else None
    worst = 0.0
    checked = skipped = 0
    per_input = []
    for k, a in enumerate(arrays):
        n = a.size
        want = n if max_entries is None else min(n, max_entries)
        order = np.arange(n) if want == n else rng.permutation(n)
        coords, num = [], []
        for c in order:
            if len(coords) == want:
                break
            vals = [x.copy() for x in arrays]
            flat = vals[k].reshape(-1)
            flat[c] = a.reshape(-1)[c] + h
            fp, log_p = evaluate(vals)
            flat[c] = a.reshape(-1)[c] - h
            fm, log_m = evaluate(vals)
            if skip_kinks and not (_same_branches(base, log_p) and _same_branches(base, log_m)):
                skipped += 1
                continue
            coords.append(c)
            num.append((fp - fm) / (2 * h))
        # sampled entries are measured against the whole input's gradient scale
        err = _rel_error(analytic[k].reshape(-1)[np.asarray(coords, dtype=np.int64)], np.asarray(num),
                         np.abs(analytic[k]).max(initial=0.0))
        per_input.append(err)
        worst = max(worst, err)
        checked += len(coords)
    return GradCheckReport(worst, tol, checked, per_input, skipped)
