"""Registry of gradient-bearing ops.

Every loss that participates in backprop is tagged with :func:`differentiable`
so the finite-difference suite can check it is covered.
"""

from typing import Callable, Dict

GRADIENT_OPS: Dict[str, Callable] = {}


def differentiable(fn: Callable) -> Callable:
    GRADIENT_OPS[f"{fn.__module__.rsplit('.', 1)[-1]}.{fn.__name__}"] = fn
    return fn
