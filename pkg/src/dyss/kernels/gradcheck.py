"""Central finite-difference gradient checker."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import Param, Tensor, backward, no_grad


@dataclass
class GradCheckReport:
    max_rel_err: float
    worst: tuple | None        # (input position, flat entry index)
    nonfinite: tuple | None    # first non-finite analytic entry, same layout
    checked: int

    def passed(self, tol: float) -> bool:
        return self.nonfinite is None and self.max_rel_err <= tol

    def describe(self) -> str:
        if self.nonfinite is not None:
            return f"non-finite analytic gradient at input {self.nonfinite[0]} entry {self.nonfinite[1]}"
        return f"max rel err {self.max_rel_err:.3e} at input/entry {self.worst} ({self.checked} entries)"


def _scalarize(out: Tensor, weights: dict) -> Tensor:
    if out.size == 1:
        return out.reshape(())
    if "w" not in weights:
        weights["w"] = np.random.default_rng(1234).standard_normal(out.shape)
    return (out * weights["w"]).sum()


def grad_check(fn, inputs, eps: float = 1e-5, max_entries: int | None = None,
               seed: int = 0, floor: float = 1e-6) -> GradCheckReport:
    """Compare analytic gradients of ``fn(*inputs)`` against central differences.

    ``inputs`` may mix arrays (wrapped into fresh leaves) and existing
    tensors/Params, which are perturbed in place and restored afterwards.
    Non-scalar outputs are reduced with a fixed random weighting.  The
    per-entry error is ``|a - n| / max(|a|, |n|, floor)``; at most
    ``max_entries`` randomly chosen entries of each input are differenced.
    """
    leaves = []
    for x in inputs:
        if isinstance(x, Tensor) and x.requires_grad:
            leaves.append(x)
        else:
            leaves.append(Tensor(np.array(x.data if isinstance(x, Tensor) else x, dtype=np.float64),
                                 requires_grad=True))
    saved = [leaf.grad for leaf in leaves]
    for leaf in leaves:
        leaf.grad = np.zeros_like(leaf.data) if isinstance(leaf, Param) else None

    weights: dict = {}
    out = _scalarize(fn(*leaves), weights)
    backward(out)
    analytic = [np.zeros_like(leaf.data) if leaf.grad is None else np.array(leaf.grad) for leaf in leaves]
    for leaf, g in zip(leaves, saved):
        leaf.grad = g

    rng = np.random.default_rng(seed)
    worst, worst_err, nonfinite, checked = None, 0.0, None, 0
    for pos, (leaf, ga) in enumerate(zip(leaves, analytic)):
        bad = np.flatnonzero(~np.isfinite(ga))
        if bad.size and nonfinite is None:
            nonfinite = (pos, int(bad[0]))
        flat = leaf.data.reshape(-1)
        entries = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            entries = np.sort(rng.choice(flat.size, size=max_entries, replace=False))
        for i in entries:
            orig = flat[i]
            with no_grad():
                flat[i] = orig + eps
                f_plus = float(_scalarize(fn(*leaves), weights).data)
                flat[i] = orig - eps
                f_minus = float(_scalarize(fn(*leaves), weights).data)
            flat[i] = orig
            num = (f_plus - f_minus) / (2.0 * eps)
            a = ga.reshape(-1)[i]
            err = abs(a - num) / max(abs(a), abs(num), floor)
            checked += 1
            if not np.isfinite(err):
                err = np.inf
            if err > worst_err or worst is None:
                worst_err, worst = err, (pos, int(i))
    return GradCheckReport(float(worst_err), worst, nonfinite, checked)
