"""Recordings, segmentation, label binarisation, LOSO splits and the synthetic generator.

Portable payload format (``.eeg``, version 1, little-endian)::

    magic     4 bytes  b"EEGR"
    version   uint16   1
    subject   uint16 byte length, then UTF-8
    trial     uint16 byte length, then UTF-8
    channels  uint32   C
    length    uint32   L
    rate      float64  Hz
    arousal   float64  raw rating (NaN = missing)
    valence   float64  raw rating (NaN = missing)
    samples   float32 * C * L, channel-major (all of channel 0 first)

Dataset descriptor: a UTF-8 text file of ``key = value`` lines (``#`` starts
a comment) with ``format_version = 1``, ``scheme = deap|dreamer|synthetic``
and one ``payload = <relative path>`` line per recording.
"""

from __future__ import annotations

import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

log = logging.getLogger(__name__)

SAMPLING_RATE = 128.0
PAYLOAD_MAGIC = b"EEGR"
PAYLOAD_VERSION = 1
DESCRIPTOR_VERSION = 1
SCHEMES = ("deap", "dreamer", "synthetic")
LABEL_RANGES = {"deap": (1.0, 9.0), "dreamer": (1.0, 5.0), "synthetic": (1.0, 9.0)}


class IngestionError(ValueError):
    def __init__(self, path, field_name: str, message: str):
        super().__init__(f"{path}: {field_name}: {message}")
        self.path = str(path)
        self.field = field_name


class LabelError(ValueError):
    pass


class ProtocolError(ValueError):
    pass


@dataclass
class Recording:
    subject_id: str
    trial_id: str
    samples: np.ndarray  # C x L
    sampling_rate: float
    arousal_raw: float
    valence_raw: float

    @property
    def channels(self) -> int:
        return self.samples.shape[0]

    @property
    def length(self) -> int:
        return self.samples.shape[1]


@dataclass
class SegmentBatch:
    values: np.ndarray  # N x C x T
    subject_ids: np.ndarray
    trial_ids: np.ndarray
    labels: np.ndarray
    dimension: str = "arousal"
    offsets: np.ndarray | None = None

    def __len__(self) -> int:
        return self.values.shape[0]

    @property
    def subjects(self) -> list[str]:
        return sorted(set(self.subject_ids.tolist()))

    def subset(self, idx) -> "SegmentBatch":
        idx = np.asarray(idx, dtype=np.int64)
        return SegmentBatch(
            self.values[idx],
            self.subject_ids[idx],
            self.trial_ids[idx],
            self.labels[idx],
            self.dimension,
            None if self.offsets is None else self.offsets[idx],
        )


@dataclass
class LosoSplit:
    held_out_subject: str
    train: np.ndarray
    test: np.ndarray


# ---------------------------------------------------------------------------
# payload + descriptor I/O
# ---------------------------------------------------------------------------


def _pack_str(s: str) -> bytes:
    b = s.encode("utf-8")
    return struct.pack("<H", len(b)) + b


def encode_recording(rec: Recording) -> bytes:
    samples = np.ascontiguousarray(rec.samples, dtype="<f4")
    c, length = samples.shape
    head = PAYLOAD_MAGIC + struct.pack("<H", PAYLOAD_VERSION)
    head += _pack_str(rec.subject_id) + _pack_str(rec.trial_id)
    head += struct.pack("<IIddd", c, length, rec.sampling_rate, rec.arousal_raw, rec.valence_raw)
    return head + samples.tobytes()


def decode_recording(buf: bytes, path="<bytes>") -> Recording:
    pos = 0

    def take(n: int, what: str) -> bytes:
        nonlocal pos
        if pos + n > len(buf):
            raise IngestionError(path, what, "truncated file")
        chunk = buf[pos : pos + n]
        pos += n
        return chunk

    if take(4, "magic") != PAYLOAD_MAGIC:
        raise IngestionError(path, "magic", "not an EEGR payload")
    (version,) = struct.unpack("<H", take(2, "version"))
    if version != PAYLOAD_VERSION:
        raise IngestionError(path, "version", f"unsupported payload version {version}")
    strings = []
    for what in ("subject", "trial"):
        (n,) = struct.unpack("<H", take(2, what))
        try:
            strings.append(take(n, what).decode("utf-8"))
        except UnicodeDecodeError as exc:
            raise IngestionError(path, what, "invalid UTF-8") from exc
    c, length, rate, arousal, valence = struct.unpack("<IIddd", take(32, "header"))
    if c == 0 or length == 0:
        raise IngestionError(path, "shape", f"empty recording ({c} x {length})")
    expected = 4 * c * length
    payload = take(expected, "samples")
    if pos != len(buf):
        raise IngestionError(path, "samples", f"{len(buf) - pos} trailing bytes")
    samples = np.frombuffer(payload, dtype="<f4").reshape(c, length).astype(np.float32)
    return Recording(strings[0], strings[1], samples, rate, arousal, valence)


def write_recording(path, rec: Recording) -> None:
    Path(path).write_bytes(encode_recording(rec))


def read_recording(path) -> Recording:
    return decode_recording(Path(path).read_bytes(), path)


def write_dataset(directory, recordings: Sequence[Recording], scheme: str) -> Path:
    """Write payloads plus a descriptor into ``directory``; returns the descriptor path."""
    if scheme not in SCHEMES:
        raise ValueError(f"unknown scheme {scheme!r}")
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    lines = [
        "# cascade-eeg dataset descriptor",
        f"format_version = {DESCRIPTOR_VERSION}",
        f"scheme = {scheme}",
    ]
    for rec in recordings:
        name = f"{rec.subject_id}__{rec.trial_id}.eeg"
        write_recording(directory / name, rec)
        lines.append(f"payload = {name}")
    descriptor = directory / "dataset.desc"
    descriptor.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return descriptor


def read_descriptor(path) -> tuple[str, list[Path]]:
    path = Path(path)
    if not path.exists():
        raise IngestionError(path, "descriptor", "file not found")
    scheme = None
    version = None
    payloads: list[Path] = []
    for lineno, raw in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise IngestionError(path, f"line {lineno}", "expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        if key == "format_version":
            version = value
        elif key == "scheme":
            scheme = value
        elif key == "payload":
            payloads.append(path.parent / value)
        else:
            raise IngestionError(path, f"line {lineno}", f"unknown key {key!r}")
    if version != str(DESCRIPTOR_VERSION):
        raise IngestionError(path, "format_version", f"expected {DESCRIPTOR_VERSION}, got {version}")
    if scheme not in SCHEMES:
        raise IngestionError(path, "scheme", f"expected one of {SCHEMES}, got {scheme!r}")
    if not payloads:
        raise IngestionError(path, "payload", "descriptor lists no payload files")
    return scheme, payloads


def validate_recording(rec: Recording, scheme: str, path="<memory>") -> None:
    if rec.sampling_rate != SAMPLING_RATE:
        raise IngestionError(path, "rate", f"expected {SAMPLING_RATE:g} Hz, got {rec.sampling_rate:g}")
    if not np.all(np.isfinite(rec.samples)):
        raise IngestionError(path, "samples", "non-finite sample values")
    lo, hi = LABEL_RANGES[scheme]
    for name in ("arousal_raw", "valence_raw"):
        v = getattr(rec, name)
        if not np.isfinite(v):
            raise IngestionError(path, name, "missing label")
        if not lo <= v <= hi:
            raise IngestionError(path, name, f"{v:g} outside [{lo:g}, {hi:g}] for {scheme}")


def ingest(descriptor) -> tuple[str, list[Recording]]:
    """Read and validate every payload named by a descriptor.

    Returns the scheme and the recordings ordered by (subject, trial).
    """
    scheme, payloads = read_descriptor(descriptor)
    recordings = []
    for p in payloads:
        if not p.exists():
            raise IngestionError(p, "payload", "file not found")
        rec = read_recording(p)
        validate_recording(rec, scheme, p)
        recordings.append(rec)
    recordings.sort(key=lambda r: (r.subject_id, r.trial_id))
    return scheme, recordings


# ---------------------------------------------------------------------------
# labels and segmentation
# ---------------------------------------------------------------------------


def binarize_label(raw: float, scheme: str) -> int:
    """Low (0) / high (1) split: above 5 on the 1-9 scale, above 3 on the 1-5 scale."""
    if scheme in ("deap", "synthetic"):
        if not 1.0 <= raw <= 9.0:
            raise LabelError(f"{scheme} rating {raw} outside [1, 9]")
        return int(raw > 5.0)
    if scheme == "dreamer":
        if raw not in (1, 2, 3, 4, 5):
            raise LabelError(f"dreamer rating {raw} not in 1..5")
        return int(raw > 3)
    raise LabelError(f"unknown label scheme {scheme!r}")


def zscore(x: np.ndarray, eps: float = 1e-8) -> np.ndarray:
    mu = x.mean(axis=-1, keepdims=True)
    sd = x.std(axis=-1, keepdims=True)
    return (x - mu) / np.maximum(sd, eps)


def segment(
    recording: Recording,
    window_s: float,
    stride_s: float,
    normalize: bool = True,
    skip_s: float = 0.0,
) -> np.ndarray:
    """Cut ``recording`` into windows fully inside the trial (``K x C x W``).

    ``skip_s`` drops a leading baseline before windowing.  Each window is
    z-scored per channel when ``normalize`` is set.
    """
    rate = recording.sampling_rate
    w = int(round(window_s * rate))
    s = int(round(stride_s * rate))
    if w <= 0 or s <= 0:
        raise ValueError("window and stride must be positive")
    x = recording.samples[:, int(round(skip_s * rate)) :]
    length = x.shape[1]
    if w > length:
        log.warning(
            "window of %d samples longer than trial %s/%s (%d samples); no segments",
            w,
            recording.subject_id,
            recording.trial_id,
            length,
        )
        return np.empty((0, x.shape[0], w), dtype=np.float32)
    count = (length - w) // s + 1
    out = np.stack([x[:, i * s : i * s + w] for i in range(count)]).astype(np.float32)
    if normalize:
        out = zscore(out.astype(np.float64)).astype(np.float32)
    return out


@dataclass(frozen=True)
class SegmentationConfig:
    window_s: float
    stride_s: float
    skip_s: float = 0.0

    @classmethod
    def for_scheme(cls, scheme: str) -> "SegmentationConfig":
        if scheme == "deap":
            return cls(4.0, 4.0, 3.0)
        if scheme == "dreamer":
            return cls(9.0, 1.0, 0.0)
        return cls(1.0, 1.0, 0.0)


def build_segments(
    recordings: Sequence[Recording],
    scheme: str,
    dimension: str = "arousal",
    seg: SegmentationConfig | None = None,
) -> SegmentBatch:
    """Segment every recording and attach binarised labels, ordered by (subject, trial, offset)."""
    if dimension not in ("arousal", "valence"):
        raise ValueError(f"dimension must be arousal or valence, got {dimension!r}")
    seg = seg or SegmentationConfig.for_scheme(scheme)
    values, subjects, trials, labels, offsets = [], [], [], [], []
    for rec in sorted(recordings, key=lambda r: (r.subject_id, r.trial_id)):
        windows = segment(rec, seg.window_s, seg.stride_s, skip_s=seg.skip_s)
        raw = rec.arousal_raw if dimension == "arousal" else rec.valence_raw
        label = binarize_label(raw, scheme)
        k = windows.shape[0]
        values.append(windows)
        subjects += [rec.subject_id] * k
        trials += [rec.trial_id] * k
        labels += [label] * k
        offsets += list(range(k))
    if not values:
        raise ProtocolError("no recordings to segment")
    return SegmentBatch(
        np.concatenate(values),
        np.array(subjects),
        np.array(trials),
        np.array(labels, dtype=np.int64),
        dimension,
        np.array(offsets, dtype=np.int64),
    )


# ---------------------------------------------------------------------------
# splits and subsampling
# ---------------------------------------------------------------------------


def make_loso_splits(segments: SegmentBatch) -> list[LosoSplit]:
    subjects = segments.subjects
    if len(subjects) < 2:
        raise ProtocolError(f"leave-one-subject-out needs >= 2 subjects, got {len(subjects)}")
    splits = []
    for s in subjects:
        held = segments.subject_ids == s
        splits.append(LosoSplit(s, np.flatnonzero(~held), np.flatnonzero(held)))
    return splits


def limited_label_subsample(segments: SegmentBatch, fraction: float, seed: int = 0) -> np.ndarray:
    """Indices keeping ``fraction`` of the segments of every (subject, trial) stratum.

    Per stratum ``round_half_up(n * fraction)`` segments are drawn without
    replacement, at least one per non-empty stratum.  Returned sorted.
    """
    if not 0.0 < fraction <= 1.0:
        raise ValueError(f"fraction must lie in (0, 1], got {fraction}")
    rng = np.random.default_rng(seed)
    keys = np.char.add(np.char.add(segments.subject_ids.astype(str), "\x00"), segments.trial_ids.astype(str))
    keep = []
    for key in sorted(set(keys.tolist())):
        members = np.flatnonzero(keys == key)
        n_keep = max(1, int(np.floor(members.size * fraction + 0.5)))
        n_keep = min(n_keep, members.size)
        keep.append(np.sort(rng.choice(members, size=n_keep, replace=False)))
    return np.sort(np.concatenate(keep))


# ---------------------------------------------------------------------------
# synthetic multi-subject generator
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SynthSpec:
    """Knobs of the synthetic generator; defaults are the pinned validation set."""

    segments_per_trial: int = 6
    cue_amplitude: float = 0.3
    high_band: tuple[float, float] = (4.0, 8.0)
    low_band: tuple[float, float] = (18.0, 26.0)
    rhythm_band: tuple[float, float] = (9.0, 13.0)
    rhythm_amplitude: float = 2.0
    mixing_strength: float = 0.5
    gain_sigma: float = 0.3
    n_components: int = 3
    extra: dict = field(default_factory=dict)


def pink_noise(rng: np.random.Generator, shape: tuple[int, int], alpha: np.ndarray) -> np.ndarray:
    """Unit-variance noise with a 1/f^alpha power spectrum per row."""
    c, length = shape
    spec = rng.standard_normal((c, length // 2 + 1)) + 1j * rng.standard_normal((c, length // 2 + 1))
    freqs = np.fft.rfftfreq(length, d=1.0 / SAMPLING_RATE)
    freqs[0] = freqs[1]
    spec *= freqs[None, :] ** (-np.asarray(alpha)[:, None] / 2.0)
    spec[:, 0] = 0.0
    out = np.fft.irfft(spec, n=length, axis=1)
    return out / out.std(axis=1, keepdims=True)


def _band_oscillation(rng, band, n_components, length, t_axis):
    freqs = rng.uniform(band[0], band[1], size=n_components)
    phases = rng.uniform(0, 2 * np.pi, size=n_components)
    sig = np.zeros(length)
    for f, ph in zip(freqs, phases):
        sig += np.sin(2 * np.pi * f * t_axis + ph)
    return sig / np.sqrt(n_components / 2.0)


def synth_generate(
    n_subjects: int,
    trials_per_subject: int,
    channels: int,
    segment_length: int,
    seed: int,
    spec: SynthSpec | None = None,
) -> list[Recording]:
    """Class-conditional multi-subject recordings at 128 Hz.

    High-label trials carry a low-frequency band oscillation, low-label trials
    a higher band, both on a hemisphere-asymmetric channel subset.  Each
    subject applies its own channel mixing, per-channel gain, 1/f noise
    exponent and an individual alpha-like rhythm, so raw signals cluster by
    subject while the class cue stays spectral.
    """
    if channels % 2:
        raise ValueError(f"channel count must be even, got {channels}")
    spec = spec or SynthSpec()
    root = np.random.SeedSequence(seed)
    length = segment_length * spec.segments_per_trial
    t_axis = np.arange(length) / SAMPLING_RATE
    half = channels // 2
    # left hemisphere rows carry the cue at full strength, right at a third
    topo = np.concatenate([np.ones(half), np.full(channels - half, 1.0 / 3.0)])
    recordings = []
    for s, child in enumerate(root.spawn(n_subjects)):
        rng = np.random.default_rng(child)
        mixing = np.eye(channels) + spec.mixing_strength * rng.standard_normal(
            (channels, channels)
        ) / np.sqrt(channels)
        gains = np.exp(spec.gain_sigma * rng.standard_normal(channels))
        alpha = rng.uniform(0.8, 1.6, size=channels)
        rhythm_freq = rng.uniform(*spec.rhythm_band)
        rhythm_topo = rng.uniform(0.2, 1.0, size=channels)
        labels = np.array([i % 2 for i in range(trials_per_subject)])
        rng.shuffle(labels)
        for j, label in enumerate(labels):
            source = pink_noise(rng, (channels, length), alpha)
            band = spec.high_band if label == 1 else spec.low_band
            cue = np.stack(
                [_band_oscillation(rng, band, spec.n_components, length, t_axis) for _ in range(channels)]
            )
            source += spec.cue_amplitude * topo[:, None] * cue
            phase = rng.uniform(0, 2 * np.pi)
            source += (
                spec.rhythm_amplitude
                * rhythm_topo[:, None]
                * np.sin(2 * np.pi * rhythm_freq * t_axis + phase)[None, :]
            )
            x = gains[:, None] * (mixing @ source)
            rating = 7.0 if label == 1 else 3.0
            recordings.append(
                Recording(f"s{s:02d}", f"t{j:02d}", x.astype(np.float32), SAMPLING_RATE, rating, rating)
            )
    return recordings


def band_power_features(values: np.ndarray, bands=((1, 4), (4, 8), (8, 13), (13, 18), (18, 26), (26, 40))) -> np.ndarray:
    """Log mean spectral power per (channel, band); the oracle features for probes."""
    spec = np.abs(np.fft.rfft(values, axis=-1)) ** 2
    freqs = np.fft.rfftfreq(values.shape[-1], d=1.0 / SAMPLING_RATE)
    feats = []
    for lo, hi in bands:
        sel = (freqs >= lo) & (freqs < hi)
        feats.append(np.log(spec[..., sel].mean(axis=-1) + 1e-12))
    return np.stack(feats, axis=-1).reshape(values.shape[0], -1)
