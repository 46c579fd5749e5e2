"""Central finite-difference gradient checking."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Dict, Optional, Sequence

import numpy as np

from . import ops
from .tensor import Tape, Tensor

__all__ = ["GradcheckReport", "gradcheck"]


@dataclass
class GradcheckReport:
    name: str
    tolerance: float
    errors: Dict[str, float] = field(default_factory=dict)

    @property
    def max_error(self) -> float:
        return max(self.errors.values(), default=0.0)

    @property
    def passed(self) -> bool:
        return all(np.isfinite(e) and e < self.tolerance for e in self.errors.values())

    def lines(self):
        for key, err in self.errors.items():
            status = "ok" if err < self.tolerance else "FAIL"
            yield f"{self.name:<28} {key:<36} {err:.3e}  {status}"


def _relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    # scaled by the largest gradient magnitude so near-zero entries don't dominate
    scale = max(np.abs(analytic).max(initial=0.0), np.abs(numeric).max(initial=0.0), 1e-12)
    return float(np.abs(analytic - numeric).max(initial=0.0) / scale)


def gradcheck(
    fn: Callable[..., Tensor],
    inputs: Sequence[Tensor],
    tolerance: float = 1e-4,
    eps: float = 1e-5,
    names: Optional[Sequence[str]] = None,
    max_samples: Optional[int] = None,
    seed: int = 0,
    name: str = "fn",
    freeze_branches: bool = False,
    stencil: int = 3,
) -> GradcheckReport:
    """Compare tape gradients of ``fn(*inputs)`` against central differences.

    The output is reduced to a scalar by a fixed random projection. With
    ``max_samples`` only that many randomly chosen entries per input are
    perturbed. Inputs must be double precision.

    With ``freeze_branches`` the perturbed evaluations reuse the relu masks
    and max-reduction argmaxes of the unperturbed pass. Central differences
    then see the smooth piece the analytic gradient belongs to instead of
    straddling a kink, which matters for deep networks where almost any
    perturbation flips some unit.

    ``stencil`` is 3 for the usual central difference or 5 for the
    fourth-order central stencil at the same step, whose truncation error
    stays small on strongly curved losses.
    """
    if stencil not in (3, 5):
        raise ValueError("stencil must be 3 or 5")
    for t in inputs:
        if t.dtype != np.float64:
            raise TypeError("gradcheck requires float64 inputs")
    names = list(names) if names is not None else [f"input{i}" for i in range(len(inputs))]
    rng = np.random.default_rng(seed)
    flags = [t.requires_grad for t in inputs]
    for t in inputs:
        t.requires_grad = True

    try:
        probe = fn(*inputs)
        proj = Tensor(rng.standard_normal(probe.shape))

        with Tape() as tape:
            if freeze_branches:
                with ops.frozen_branches() as log:
                    out = fn(*inputs)
            else:
                out = fn(*inputs)
            loss = ops.sum(ops.mul(out, proj))
        tape.backward(loss, inputs)
        analytic = [t.grad.copy() for t in inputs]

        def scalar() -> float:
            if not freeze_branches:
                return float((fn(*inputs).data * proj.data).sum())
            with ops.frozen_branches(log):
                return float((fn(*inputs).data * proj.data).sum())

        report = GradcheckReport(name=name, tolerance=tolerance)
        for t, key, a in zip(inputs, names, analytic):
            flat = t.data.reshape(-1)
            idx = np.arange(flat.size)
            if max_samples is not None and flat.size > max_samples:
                idx = np.sort(rng.choice(flat.size, size=max_samples, replace=False))
            numeric = np.empty(idx.size)
            for k, i in enumerate(idx):
                orig = flat[i]

                def at(offset):
                    flat[i] = orig + offset
                    return scalar()

                if stencil == 3:
                    numeric[k] = (at(eps) - at(-eps)) / (2 * eps)
                else:
                    numeric[k] = (8 * (at(eps) - at(-eps)) - (at(2 * eps) - at(-2 * eps))) / (12 * eps)
                flat[i] = orig
            report.errors[key] = _relative_error(a.reshape(-1)[idx], numeric)
    finally:
        for t, f in zip(inputs, flags):
            t.requires_grad = f
    return report
