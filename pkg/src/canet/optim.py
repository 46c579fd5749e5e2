"""SGD with momentum and L2 weight decay folded into the gradient."""
from __future__ import annotations

from typing import Iterable

from .tensor import Parameter


def sgd_step(params: Iterable[Parameter], lr: float, momentum: float = 0.9, weight_decay: float = 1e-4) -> None:
    """One in-place SGD update.

    ``v <- momentum * v + (grad + weight_decay * value)`` then
    ``value <- value - lr * v``. Frozen parameters are skipped untouched.
    """
    for p in params:
        if not p.trainable:
            continue
        if p.grad is None:
            raise RuntimeError(f"missing gradient on trainable parameter {p!r}")
        d = p.grad + weight_decay * p.data if weight_decay else p.grad
        buf = p.momentum_buffer
        buf *= momentum
        buf += d
        p.data -= lr * buf
