from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterator, Mapping

import numpy as np

from .tensor import Tensor


class OptimizerError(RuntimeError):
    pass


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray


@dataclass
class ParameterGroup:
    """Named parameters optimised together, plus their Adam moments.

    The step counter is shared by the whole group and advances once per
    :func:`adam_step` call.
    """

    params: dict[str, Tensor]
    state: dict[str, AdamState] = field(default_factory=dict)
    step: int = 0

    def __post_init__(self):
        for name, p in self.params.items():
            p.requires_grad = True
            if name not in self.state:
                self.state[name] = AdamState(np.zeros_like(p.data), np.zeros_like(p.data))

    def __iter__(self) -> Iterator[tuple[str, Tensor]]:
        return iter(self.params.items())

    def __len__(self) -> int:
        return len(self.params)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    def gradients(self) -> dict[str, np.ndarray | None]:
        return {k: p.grad for k, p in self.params.items()}


def adam_step(
    group: ParameterGroup,
    gradients: Mapping[str, np.ndarray] | None = None,
    lr: float = 1e-3,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> ParameterGroup:
    """One bias-corrected Adam update applied in place to ``group``.

    ``gradients`` defaults to each parameter's ``.grad``.  Every parameter must
    have one; call ``group.zero_grad()`` before the forward pass so that
    parameters absent from the loss get an explicit zero.
    """
    grads = group.gradients() if gradients is None else dict(gradients)
    missing = [k for k in group.params if grads.get(k) is None]
    if missing:
        raise OptimizerError(f"no gradient for parameters: {', '.join(sorted(missing))}")
    group.step += 1
    t = group.step
    bc1 = 1.0 - beta1**t
    bc2 = 1.0 - beta2**t
    for name, p in group.params.items():
        g = grads[name]
        st = group.state[name]
        st.m *= beta1
        st.m += (1.0 - beta1) * g
        st.v *= beta2
        st.v += (1.0 - beta2) * (g * g)
        denom = np.sqrt(st.v / bc2) + eps
        p.data -= (lr / bc1) * st.m / denom
    return group


class Adam:
    """Stateful convenience wrapper binding hyperparameters to a group."""

    def __init__(self, group: ParameterGroup, lr: float, beta1=0.9, beta2=0.999, eps=1e-8):
        if lr <= 0:
            raise ValueError(f"learning rate must be positive, got {lr}")
        self.group = group
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps

    def zero_grad(self) -> None:
        self.group.zero_grad()

    def step(self) -> None:
        adam_step(self.group, None, self.lr, self.beta1, self.beta2, self.eps)
