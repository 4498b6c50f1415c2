"""Finite-difference check of the full model on a tiny 64-bit geometry.

Backward gradients are taken in float64.  The central-difference reference
is evaluated on an extended-precision mirror of the same model: the joint
loss carries a reconstruction term some 1e3 times larger than the
contrastive terms, and in float64 its rounding alone (eps*|L|/h) swamps the
projector gradients being checked.
"""

from __future__ import annotations

import numpy as np

from .augment import AugmentPolicy, augment_freq_batch, augment_time_batch
from .config import RunConfig
from .diffnum import grad_check
from .model import Geometry, ModelBundle
from .objectives import cross_entropy
from .pipeline import _select, pretrain_components, ssl_losses
from .spectrum import compute_spectrum

TINY = Geometry(channels=4, length=32, filters=4)
REFERENCE_DTYPE = np.longdouble


def _backward_grads(loss_fn, params) -> dict[str, np.ndarray]:
    for p in params.values():
        p.requires_grad = True
        p.grad = None
    loss_fn().backward()
    return {k: np.zeros_like(p.data) if p.grad is None else p.grad.copy() for k, p in params.items()}


def check_model_gradients(
    lam: float = 0.1,
    tau: float = 0.07,
    seed: int = 0,
    batch: int = 4,
    max_coords: int | None = 48,
    h: float = 1e-5,
    variant: str = "full",
    geo: Geometry = TINY,
) -> dict[str, float]:
    """Worst relative error per parameter tensor.

    Keys are ``joint:<param>`` for the self-supervised joint loss and
    ``ce:<param>`` for the classifier cross-entropy taken end to end
    through the encoders.
    """
    rng = np.random.default_rng(seed)
    model = ModelBundle(geo, variant, seed=seed, dtype=np.float64)
    mirror = ModelBundle(geo, variant, seed=seed, dtype=REFERENCE_DTYPE)
    mirror.load_arrays(model.state_arrays())
    cfg = RunConfig(lam=lam, tau=tau, dtype="float64", variant=variant, batch_size=max(batch, 2))
    x = rng.standard_normal((batch, geo.channels, geo.length))
    xf = compute_spectrum(x)
    policy = AugmentPolicy()
    xt_aug, _ = augment_time_batch(x, policy, rng)
    xf_aug, _ = augment_freq_batch(xf, policy, rng)
    labels = np.arange(batch) % 2

    def joint(bundle):
        return lambda: ssl_losses(bundle, x, xf, xt_aug, xf_aug, cfg, variant)[0]

    def ce(bundle):
        return lambda: cross_entropy(bundle.forward_prediction(x, xf), labels)

    checks = []
    names = pretrain_components(variant)
    if names is not None:
        checks.append(("joint", joint, names, True))
    ce_names = ["classifier", "enc_t"]
    if variant != "base_model":
        ce_names += ["tfr.conv_w", "tfr.conv_b"]
        if variant not in ("single_time_stream", "tfr_only"):
            ce_names.append("enc_f")
    checks.append(("ce", ce, ce_names, False))

    out: dict[str, float] = {}
    for tag, make_loss, names, training in checks:
        model.set_training(training)
        mirror.set_training(training)
        analytic = _backward_grads(make_loss(model), _select(model, names))
        report: dict[str, float] = {}
        grad_check(
            make_loss(mirror),
            _select(mirror, names),
            h=h,
            max_coords=max_coords,
            seed=seed,
            report=report,
            analytic=analytic,
        )
        out.update({f"{tag}:{k}": v for k, v in report.items()})
    return out
