"""Central finite-difference validation of backward-pass gradients."""

from __future__ import annotations

from typing import Callable, Mapping, Sequence

import numpy as np

from .tensor import Tensor


class GradCheckError(RuntimeError):
    """The loss is not a deterministic scalar, so a finite-difference check is meaningless."""


def _as_named(params) -> dict[str, Tensor]:
    if isinstance(params, Mapping):
        return dict(params)
    return {f"p{i}": p for i, p in enumerate(params)}


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> np.ndarray:
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    scale = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return np.abs(analytic - numeric) / scale


def grad_check(
    loss_fn: Callable[[], Tensor],
    params: Mapping[str, Tensor] | Sequence[Tensor],
    h: float = 1e-5,
    max_coords: int | None = None,
    seed: int = 0,
    floor: float = 1e-6,
    report: dict | None = None,
    analytic: Mapping[str, np.ndarray] | None = None,
) -> float:
    """Worst relative error between backward gradients and central differences.

    ``loss_fn`` must rebuild the loss from the current parameter values on
    each call.  With ``max_coords`` set, at most that many randomly chosen
    coordinates per parameter are perturbed.  ``analytic`` overrides the
    backward-pass gradients (used for fault injection).  Per-parameter worst
    errors are written into ``report`` when given.
    """
    named = _as_named(params)
    for p in named.values():
        p.requires_grad = True
        p.grad = None
    base = loss_fn()
    if base.data.size != 1:
        raise GradCheckError(f"loss must be scalar, got shape {base.shape}")
    again = loss_fn()
    if not np.array_equal(base.data, again.data):
        raise GradCheckError("loss is not deterministic between identical evaluations")
    for p in named.values():
        p.grad = None
    base.backward()
    grads = {
        k: (np.zeros_like(p.data) if p.grad is None else p.grad.copy()) for k, p in named.items()
    }
    if analytic is not None:
        grads.update({k: np.asarray(v) for k, v in analytic.items()})

    rng = np.random.default_rng(seed)
    worst = 0.0
    for name, p in named.items():
        flat = p.data.reshape(-1)
        coords = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            coords = np.sort(rng.choice(flat.size, size=max_coords, replace=False))
        numeric = np.empty(coords.size)
        for j, idx in enumerate(coords):
            orig = flat[idx]
            flat[idx] = orig + h
            # difference in the loss dtype so extended-precision losses keep their bits
            fp = loss_fn().data.reshape(())
            flat[idx] = orig - h
            fm = loss_fn().data.reshape(())
            flat[idx] = orig
            numeric[j] = (fp - fm) / (2.0 * h)
        err = relative_error(grads[name].reshape(-1)[coords], numeric, floor)
        local = float(err.max()) if err.size else 0.0
        if report is not None:
            report[name] = local
        worst = max(worst, local)
    return worst
