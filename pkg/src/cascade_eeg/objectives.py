"""Self-supervised losses, their weighted combination, and the fine-tuning cross-entropy."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .diffnum import ops
from .diffnum.tensor import DimensionError, Tensor, as_tensor


class EmptyBatchError(ValueError):
    pass


class LabelError(ValueError):
    pass


def recon_loss(recon: Tensor, target) -> Tensor:
    """Batch mean of per-sample squared Frobenius error (no division by C*T)."""
    target = as_tensor(target)
    if recon.shape != target.shape:
        raise DimensionError(f"reconstruction {recon.shape} vs target {target.shape}")
    diff = ops.sub(recon, target)
    return ops.mul(ops.sum(ops.square(diff)), 1.0 / recon.shape[0])


def interleave(z: Tensor, z_tilde: Tensor) -> Tensor:
    """Stack two views as rows ``z_1, z~_1, z_2, z~_2, ...`` (``2N x D``)."""
    n, d = z.shape
    pair = ops.concat([ops.reshape(z, (n, 1, d)), ops.reshape(z_tilde, (n, 1, d))], axis=1)
    return ops.reshape(pair, (2 * n, d))


def ntxent_loss(z: Tensor, z_tilde: Tensor, tau: float, reduction: str = "sum") -> Tensor:
    """NT-Xent over ``2N`` interleaved, L2-normalised views.

    Positives are the adjacent rows ``(2k, 2k+1)``; each anchor's normaliser
    runs over every other row.  ``reduction="sum"`` adds the ``2N`` anchor
    terms, ``"mean"`` divides that sum by ``2N``.
    """
    if z.shape != z_tilde.shape or z.ndim != 2:
        raise DimensionError(f"views must both be N x D, got {z.shape} and {z_tilde.shape}")
    if tau <= 0:
        raise ValueError(f"temperature must be positive, got {tau}")
    n = z.shape[0]
    if n == 0:
        raise EmptyBatchError("NT-Xent needs at least one pair")
    if reduction not in ("sum", "mean"):
        raise ValueError(f"unknown reduction {reduction!r}")
    rows = ops.l2_normalize(interleave(z, z_tilde))
    sim = ops.mul(ops.matmul(rows, ops.transpose(rows)), 1.0 / tau)
    m = 2 * n
    mask = ~np.eye(m, dtype=bool)
    logp = ops.log_softmax(sim, mask)
    positives = np.arange(m) ^ 1
    total = ops.mul(ops.sum(ops.take_along_rows(logp, positives)), -1.0)
    if reduction == "mean":
        total = ops.mul(total, 1.0 / m)
    return total


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean negative log-likelihood of integer labels under ``softmax(logits)``."""
    labels = np.asarray(labels)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise DimensionError(f"logits {logits.shape} vs labels {labels.shape}")
    k = logits.shape[1]
    if labels.size and (labels.min() < 0 or labels.max() >= k or not np.all(labels == labels.astype(int))):
        raise LabelError(f"labels must be integers in [0, {k}), got {np.unique(labels)}")
    logp = ops.log_softmax(logits)
    picked = ops.take_along_rows(logp, labels.astype(np.int64))
    return ops.mul(ops.sum(picked), -1.0 / logits.shape[0])


@dataclass
class LossReport:
    l_recon: float
    l_con_t: float
    l_con_f: float
    joint: float
    lam: float
    tau: float
    batch_size: int
    l_con_t_mean: float = 0.0
    l_con_f_mean: float = 0.0
    cross_entropy: float = float("nan")

    def as_row(self) -> dict:
        return asdict(self)


def joint_loss(
    l_con_t,
    l_con_f,
    l_recon,
    lam: float = 0.1,
    tau: float = 0.07,
    batch_size: int = 0,
) -> tuple[Tensor, LossReport]:
    """``lam * (l_con_t + l_con_f) + (1 - lam) * l_recon`` plus its scalar report.

    Any component may be a plain number (e.g. 0 for a variant without it).
    """
    if not 0.0 <= lam <= 1.0:
        raise ValueError(f"lambda must lie in [0, 1], got {lam}")
    parts = (l_con_t, l_con_f, l_recon)
    dtype = next((v.dtype for v in parts if isinstance(v, Tensor)), np.float64)
    t, f, r = (as_tensor(v, dtype=dtype) for v in parts)
    total = ops.add(ops.mul(ops.add(t, f), lam), ops.mul(r, 1.0 - lam))
    anchors = max(2 * batch_size, 1)
    report = LossReport(
        l_recon=float(r.data),
        l_con_t=float(t.data),
        l_con_f=float(f.data),
        joint=float(total.data),
        lam=lam,
        tau=tau,
        batch_size=batch_size,
        l_con_t_mean=float(t.data) / anchors,
        l_con_f_mean=float(f.data) / anchors,
    )
    return total, report
