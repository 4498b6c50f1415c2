"""Stochastic augmentation banks for the second contrastive view.

One method is drawn uniformly per sample from the time bank (for raw
segments) or the frequency bank (for magnitude spectra).
"""

from __future__ import annotations

from dataclasses import dataclass, fields

import numpy as np

from . import instrument

TIME_METHODS = ("jitter", "scale", "time_shift", "neighborhood_segment")
FREQ_METHODS = ("remove_components", "add_components")


class PolicyError(ValueError):
    pass


@dataclass(frozen=True)
class AugmentPolicy:
    jitter_sigma_ratio: float = 0.1
    scale_sigma: float = 0.1
    shift_max_ratio: float = 0.1
    keep_ratio: float = 0.5
    remove_prob: float = 0.1
    add_prob: float = 0.1
    add_amp_ratio: float = 0.1
    time_methods: tuple[str, ...] = TIME_METHODS
    freq_methods: tuple[str, ...] = FREQ_METHODS

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        for name in ("remove_prob", "add_prob"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise PolicyError(f"{name} must lie in [0, 1], got {v}")
        # zero is accepted as the degenerate identity setting
        for name in ("jitter_sigma_ratio", "shift_max_ratio", "add_amp_ratio"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise PolicyError(f"{name} must lie in [0, 1], got {v}")
        if not 0.0 < self.keep_ratio <= 1.0:
            raise PolicyError(f"keep_ratio must lie in (0, 1], got {self.keep_ratio}")
        if self.scale_sigma < 0:
            raise PolicyError(f"scale_sigma must be non-negative, got {self.scale_sigma}")
        if not self.time_methods or not self.freq_methods:
            raise PolicyError("augmentation banks must be non-empty")
        bad = set(self.time_methods) - set(TIME_METHODS)
        bad |= set(self.freq_methods) - set(FREQ_METHODS)
        if bad:
            raise PolicyError(f"unknown augmentation methods: {sorted(bad)}")

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}


# -- time bank -------------------------------------------------------------------


def jitter(x: np.ndarray, sigma_ratio: float, rng: np.random.Generator) -> np.ndarray:
    std = x.std(axis=-1, keepdims=True)
    return x + rng.standard_normal(x.shape) * (sigma_ratio * std)


def scale(x: np.ndarray, sigma: float, rng: np.random.Generator) -> np.ndarray:
    factors = 1.0 + sigma * rng.standard_normal(x.shape[:-1] + (1,))
    return x * factors


def time_shift(x: np.ndarray, shift: int) -> np.ndarray:
    return np.roll(x, shift, axis=-1)


def random_time_shift(x: np.ndarray, max_ratio: float, rng: np.random.Generator) -> np.ndarray:
    limit = int(max_ratio * x.shape[-1])
    return time_shift(x, int(rng.integers(-limit, limit + 1)))


def neighborhood_segment(x: np.ndarray, keep_ratio: float, rng: np.random.Generator) -> np.ndarray:
    t = x.shape[-1]
    keep = max(1, int(round(keep_ratio * t)))
    if keep >= t:
        return x.copy()
    start = int(rng.integers(0, t - keep + 1))
    out = np.zeros_like(x)
    out[..., start : start + keep] = x[..., start : start + keep]
    return out


# -- frequency bank ----------------------------------------------------------------


def symmetric_mask(shape: tuple[int, ...], prob: float, rng: np.random.Generator) -> np.ndarray:
    """Bernoulli(prob) mask over bins with bin ``k`` and ``T-k`` tied together."""
    t = shape[-1]
    half = t // 2 + 1
    drawn = rng.random(shape[:-1] + (half,)) < prob
    mask = np.zeros(shape, dtype=bool)
    mask[..., :half] = drawn
    k = np.arange(half, t)
    mask[..., k] = drawn[..., t - k]
    return mask


def remove_components(xf: np.ndarray, prob: float, rng: np.random.Generator, mask=None) -> np.ndarray:
    if mask is None:
        mask = symmetric_mask(xf.shape, prob, rng)
    return np.where(mask, 0.0, xf).astype(xf.dtype, copy=False)


def add_components(
    xf: np.ndarray, prob: float, amp_ratio: float, rng: np.random.Generator, mask=None
) -> np.ndarray:
    if mask is None:
        mask = symmetric_mask(xf.shape, prob, rng)
    peak = xf.max(axis=-1, keepdims=True)
    return (xf + mask * (amp_ratio * peak)).astype(xf.dtype, copy=False)


# -- bank dispatch -------------------------------------------------------------------


def augment_time(x: np.ndarray, policy: AugmentPolicy, rng: np.random.Generator):
    """Apply one uniformly drawn time-bank method to a whole ``C x T`` sample."""
    instrument.bump("augment")
    method = policy.time_methods[int(rng.integers(len(policy.time_methods)))]
    if method == "jitter":
        out = jitter(x, policy.jitter_sigma_ratio, rng)
    elif method == "scale":
        out = scale(x, policy.scale_sigma, rng)
    elif method == "time_shift":
        out = random_time_shift(x, policy.shift_max_ratio, rng)
    else:
        out = neighborhood_segment(x, policy.keep_ratio, rng)
    return out.astype(x.dtype, copy=False), method


def augment_freq(xf: np.ndarray, policy: AugmentPolicy, rng: np.random.Generator):
    """Apply one uniformly drawn frequency-bank method to a ``C x T`` magnitude spectrum."""
    instrument.bump("augment")
    method = policy.freq_methods[int(rng.integers(len(policy.freq_methods)))]
    if method == "remove_components":
        out = remove_components(xf, policy.remove_prob, rng)
    else:
        out = add_components(xf, policy.add_prob, policy.add_amp_ratio, rng)
    return out, method


def augment_time_batch(x: np.ndarray, policy: AugmentPolicy, rng: np.random.Generator):
    out = np.empty_like(x)
    methods = []
    for i in range(x.shape[0]):
        out[i], m = augment_time(x[i], policy, rng)
        methods.append(m)
    return out, methods


def augment_freq_batch(xf: np.ndarray, policy: AugmentPolicy, rng: np.random.Generator):
    out = np.empty_like(xf)
    methods = []
    for i in range(xf.shape[0]):
        out[i], m = augment_freq(xf[i], policy, rng)
        methods.append(m)
    return out, methods
