"""Time-to-frequency transform producing magnitude spectra of EEG segments."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import instrument


class SpectrumError(ValueError):
    pass


def compute_spectrum(x: np.ndarray) -> np.ndarray:
    """Full-length DFT magnitude along the last axis.

    ``out[..., k] = |sum_n x[..., n] exp(-2j pi k n / T)|``; the output has
    the input's shape, so both conjugate-symmetric halves are kept.
    """
    x = np.asarray(x)
    if x.shape[-1] < 2:
        raise SpectrumError(f"need at least 2 samples along time, got {x.shape[-1]}")
    if not np.all(np.isfinite(x)):
        raise SpectrumError("non-finite values in spectrum input")
    instrument.bump("fft", 1 if x.ndim <= 2 else int(np.prod(x.shape[:-2])))
    out_dtype = x.dtype if x.dtype.kind == "f" else np.float64
    return np.abs(np.fft.fft(x.astype(np.float64, copy=False), axis=-1)).astype(out_dtype)


def naive_dft_oracle(x) -> np.ndarray:
    """Direct O(T^2) DFT of a 1-D sequence, for testing only."""
    x = np.asarray(x, dtype=np.complex128).reshape(-1)
    t = x.size
    n = np.arange(t)
    out = np.empty(t, dtype=np.complex128)
    for k in range(t):
        # reduce k*n modulo t in integers so the phase stays exact for long inputs
        out[k] = np.sum(x * np.exp(-2j * np.pi * ((k * n) % t) / t))
    return out


@dataclass
class SpectrumBatch:
    values: np.ndarray
    subject_ids: np.ndarray
    trial_ids: np.ndarray
    labels: np.ndarray
    meta: dict = field(default_factory=dict)

    @classmethod
    def from_segments(cls, batch) -> "SpectrumBatch":
        return cls(
            values=compute_spectrum(batch.values),
            subject_ids=batch.subject_ids,
            trial_ids=batch.trial_ids,
            labels=batch.labels,
            meta={"dimension": getattr(batch, "dimension", None)},
        )
