"""Self-supervised pretraining, classifier fine-tuning and LOSO evaluation."""

from __future__ import annotations

import csv
import io
import json
import logging
from collections import Counter
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import __version__
from .augment import augment_freq_batch, augment_time_batch
from .config import RunConfig
from .dataio import (
    ProtocolError,
    SegmentationConfig,
    SegmentBatch,
    build_segments,
    ingest,
    limited_label_subsample,
    SynthSpec,
    make_loso_splits,
    synth_generate,
)
from .diffnum import Adam, ParameterGroup, Tensor, no_grad
from .model import Geometry, ModelBundle
from .objectives import LossReport, cross_entropy, joint_loss, ntxent_loss, recon_loss
from .spectrum import compute_spectrum

log = logging.getLogger(__name__)

LOSS_LOG_FIELDS = (
    "fold",
    "phase",
    "epoch",
    "step",
    "l_recon",
    "l_con_t",
    "l_con_f",
    "joint",
    "cross_entropy",
)


class NumericError(FloatingPointError):
    """A loss became non-finite; ``snapshot`` holds the offending batch."""

    def __init__(self, message: str, snapshot: dict | None = None):
        super().__init__(message)
        self.snapshot = snapshot or {}


# ---------------------------------------------------------------------------
# guarded data access
# ---------------------------------------------------------------------------


class AccessGuard:
    """Counts every segment read per (phase, subject) so protocol purity can be audited."""

    def __init__(self, segments: SegmentBatch):
        self.segments = segments
        self.reads: Counter = Counter()

    def view(self, indices, phase: str) -> "GuardedView":
        return GuardedView(self, np.asarray(indices, dtype=np.int64), phase)

    def reads_of(self, subject: str, phases: Sequence[str]) -> int:
        return sum(self.reads[(p, subject)] for p in phases)


class GuardedView:
    def __init__(self, guard: AccessGuard, indices: np.ndarray, phase: str):
        self._guard = guard
        self._idx = indices
        self.phase = phase

    def __len__(self) -> int:
        return self._idx.size

    def _record(self, local) -> np.ndarray:
        rows = self._idx[np.asarray(local, dtype=np.int64)]
        subjects = self._guard.segments.subject_ids[rows]
        for s, n in zip(*np.unique(subjects, return_counts=True)):
            self._guard.reads[(self.phase, str(s))] += int(n)
        return rows

    def take(self, local) -> np.ndarray:
        return self._guard.segments.values[self._record(local)]

    def take_labeled(self, local) -> tuple[np.ndarray, np.ndarray]:
        rows = self._record(local)
        return self._guard.segments.values[rows], self._guard.segments.labels[rows]

    def subview(self, local, phase: str | None = None) -> "GuardedView":
        return GuardedView(self._guard, self._idx[np.asarray(local, dtype=np.int64)], phase or self.phase)

    def metadata(self) -> SegmentBatch:
        """Subject/trial ids without sample values (not counted as a read)."""
        seg = self._guard.segments
        return SegmentBatch(
            np.empty((len(self), 0, 0), dtype=np.float32),
            seg.subject_ids[self._idx],
            seg.trial_ids[self._idx],
            np.zeros(len(self), dtype=np.int64),
            seg.dimension,
        )


def open_view(segments: SegmentBatch, phase: str = "all") -> GuardedView:
    return AccessGuard(segments).view(np.arange(len(segments)), phase)


# ---------------------------------------------------------------------------
# dataset + model construction
# ---------------------------------------------------------------------------


def load_segments(config: RunConfig) -> SegmentBatch:
    if config.scheme == "synthetic" and not config.data:
        recordings = synth_generate(
            config.synth_subjects,
            config.synth_trials,
            config.synth_channels,
            config.synth_length,
            config.synth_seed,
            SynthSpec(
                segments_per_trial=config.synth_segments_per_trial,
                cue_amplitude=config.synth_cue_amplitude,
            ),
        )
        scheme = "synthetic"
    else:
        scheme, recordings = ingest(config.data)
        if scheme != config.scheme:
            raise ProtocolError(f"descriptor scheme {scheme!r} != config scheme {config.scheme!r}")
    seg = SegmentationConfig.for_scheme(scheme)
    if scheme == "synthetic":
        seg = SegmentationConfig(config.synth_length / 128.0, config.synth_length / 128.0)
    seg = SegmentationConfig(
        config.window_s if config.window_s is not None else seg.window_s,
        config.stride_s if config.stride_s is not None else seg.stride_s,
        config.skip_s if config.skip_s is not None else seg.skip_s,
    )
    return build_segments(recordings, scheme, config.dimension, seg)


def geometry_for(segments: SegmentBatch, config: RunConfig) -> Geometry:
    _, c, t = segments.values.shape
    return Geometry(c, t, filters=config.filters, leaky_slope=config.leaky_slope)


def new_bundle(geo: Geometry, config: RunConfig, seed: int, variant: str | None = None) -> ModelBundle:
    return ModelBundle(geo, variant or config.variant, seed=seed, dtype=np.dtype(config.dtype))


def pretrain_components(variant: str) -> list[str] | None:
    """Parameter names trained by the self-supervised stage (None: no stage)."""
    tfr_enc = ["tfr.conv_w", "tfr.conv_b"]
    tfr_dec = ["tfr.dec_w", "tfr.dec_b"]
    streams = ["enc_t", "enc_f", "proj_t", "proj_f"]
    return {
        "full": tfr_enc + tfr_dec + streams,
        "tt_recon": tfr_enc + tfr_dec + streams,
        "no_recon": tfr_enc + streams,
        "single_time_stream": tfr_enc + ["enc_t", "proj_t"],
        "tfr_only": tfr_enc + tfr_dec,
        "base_model": None,
    }[variant]


def _select(bundle: ModelBundle, names: Sequence[str]) -> dict:
    params = bundle.parameters()
    out = {}
    for name in names:
        if name in params:
            out[name] = params[name]
        else:
            out.update({k: v for k, v in params.items() if k.startswith(name + ".")})
    return out


# ---------------------------------------------------------------------------
# self-supervised stage
# ---------------------------------------------------------------------------


def ssl_losses(bundle: ModelBundle, x, xf, xt_aug, xf_aug, config: RunConfig, variant: str):
    """Joint self-supervised loss of one batch for ``variant``; returns (loss, report)."""
    n = x.shape[0]
    zero = 0.0
    l_con_t = l_con_f = l_rec = zero
    r = bundle.encode_tfr(x)
    if variant in ("full", "tt_recon", "tfr_only"):
        recon = bundle.decode_tfr(r)
        target = x if variant == "tt_recon" else xf
        l_rec = recon_loss(recon, target)
    if variant != "tfr_only":
        r_aug = bundle.encode_tfr(xt_aug)
        z = bundle.project(bundle.encode_stream(r, "time"), "time")
        z_aug = bundle.project(bundle.encode_stream(r_aug, "time"), "time")
        l_con_t = ntxent_loss(z, z_aug, config.tau, config.ntxent_reduction)
    if variant in ("full", "tt_recon", "no_recon"):
        zf = bundle.project(bundle.encode_stream(xf, "frequency"), "frequency")
        zf_aug = bundle.project(bundle.encode_stream(xf_aug, "frequency"), "frequency")
        l_con_f = ntxent_loss(zf, zf_aug, config.tau, config.ntxent_reduction)
    loss, report = joint_loss(l_con_t, l_con_f, l_rec, config.lam, config.tau, n)
    if config.ntxent_reduction == "mean":
        report.l_con_t_mean, report.l_con_f_mean = report.l_con_t, report.l_con_f
    return loss, report


def pretrain(
    bundle: ModelBundle,
    train: GuardedView,
    config: RunConfig,
    seed: int = 0,
    fold: str = "",
) -> list[dict]:
    """Self-supervised training of ``bundle`` in place; returns the per-step loss log."""
    names = pretrain_components(bundle.variant)
    if names is None or config.epochs_pretrain == 0:
        return []
    n = len(train)
    if n < 2:
        raise ProtocolError(f"pretraining needs at least 2 segments, got {n}")
    batch = min(config.batch_size, n)
    group = ParameterGroup(_select(bundle, names))
    opt = Adam(group, config.pretrain_lr)
    rng = np.random.default_rng(seed)
    dtype = np.dtype(config.dtype)
    x_all = train.take(np.arange(n)).astype(dtype)
    needs_freq = bundle.variant in ("full", "tt_recon", "no_recon", "tfr_only")
    xf_all = compute_spectrum(x_all) if needs_freq else None
    bundle.set_training(True)
    rows = []
    step = 0
    for epoch in range(config.epochs_pretrain):
        order = rng.permutation(n)
        for b in range(n // batch):
            idx = order[b * batch : (b + 1) * batch]
            x = x_all[idx]
            xf = xf_all[idx] if xf_all is not None else None
            xt_aug = xf_aug = None
            if bundle.variant != "tfr_only":
                xt_aug, _ = augment_time_batch(x, config.augment, rng)
            if bundle.variant in ("full", "tt_recon", "no_recon"):
                xf_aug, _ = augment_freq_batch(xf, config.augment, rng)
            opt.zero_grad()
            loss, report = ssl_losses(bundle, x, xf, xt_aug, xf_aug, config, bundle.variant)
            if not np.isfinite(report.joint):
                raise NumericError(
                    f"non-finite pretraining loss at epoch {epoch} step {step}",
                    {"epoch": epoch, "step": step, "indices": idx, "x": x, "report": report.as_row()},
                )
            loss.backward()
            opt.step()
            rows.append(_log_row(fold, "pretrain", epoch, step, report))
            step += 1
    return rows


def _log_row(fold, phase, epoch, step, report: LossReport | None = None, ce: float | None = None):
    row = {"fold": fold, "phase": phase, "epoch": epoch, "step": step}
    for k in ("l_recon", "l_con_t", "l_con_f", "joint"):
        row[k] = getattr(report, k) if report is not None else ""
    row["cross_entropy"] = ce if ce is not None else ""
    return row


# ---------------------------------------------------------------------------
# classifier stage
# ---------------------------------------------------------------------------


def extract_representations(bundle: ModelBundle, view: GuardedView, chunk: int = 256):
    """Frozen, eval-mode classifier inputs for every segment in ``view``."""
    bundle.set_training(False)
    feats, labels = [], []
    with no_grad():
        for start in range(0, len(view), chunk):
            x, y = view.take_labeled(np.arange(start, min(start + chunk, len(view))))
            feats.append(bundle.representation(x.astype(bundle.dtype)).data)
            labels.append(y)
    return np.concatenate(feats), np.concatenate(labels)


def finetune(
    bundle: ModelBundle,
    labeled: GuardedView,
    config: RunConfig,
    seed: int = 0,
    fold: str = "",
) -> list[dict]:
    """Train the classifier on labeled segments with cross-entropy.

    Encoders stay frozen unless ``config.finetune_encoders`` is set or the
    variant is ``base_model`` (trained end-to-end from scratch).
    """
    n = len(labeled)
    if n == 0:
        raise ProtocolError("no labeled segments to fine-tune on")
    end_to_end = config.finetune_encoders or bundle.variant == "base_model"
    rng = np.random.default_rng(seed)
    batch = min(config.batch_size, n)
    rows = []
    if end_to_end:
        names = ["classifier", "enc_t"]
        if bundle.variant != "base_model":
            names += ["tfr.conv_w", "tfr.conv_b"]
            if bundle.variant not in ("single_time_stream", "tfr_only"):
                names.append("enc_f")
        group = ParameterGroup(_select(bundle, names))
        lr = config.supervised_lr
        x_all, y_all = labeled.take_labeled(np.arange(n))
        x_all = x_all.astype(bundle.dtype)
        xf_all = compute_spectrum(x_all) if "enc_f" in names else None
    else:
        group = ParameterGroup(bundle.classifier.named_parameters("classifier"))
        lr = config.lr_classifier
        feats, y_all = extract_representations(bundle, labeled)
    opt = Adam(group, lr)
    step = 0
    for epoch in range(config.epochs_classifier):
        order = rng.permutation(n)
        for start in range(0, n, batch):
            idx = order[start : start + batch]
            opt.zero_grad()
            if end_to_end:
                xf = xf_all[idx] if xf_all is not None else None
                logits = bundle.forward_prediction(x_all[idx], xf)
            else:
                logits = bundle.classify(Tensor(feats[idx]))
            loss = cross_entropy(logits, y_all[idx])
            value = float(loss.data)
            if not np.isfinite(value):
                raise NumericError(
                    f"non-finite classifier loss at epoch {epoch} step {step}",
                    {"epoch": epoch, "step": step, "indices": idx},
                )
            loss.backward()
            opt.step()
            rows.append(_log_row(fold, "finetune", epoch, step, ce=value))
            step += 1
    return rows


def predict(bundle: ModelBundle, view: GuardedView) -> tuple[np.ndarray, np.ndarray]:
    feats, labels = extract_representations(bundle, view)
    with no_grad():
        logits = bundle.classify(Tensor(feats)).data
    return logits.argmax(axis=1), labels


def accuracy(bundle: ModelBundle, view: GuardedView) -> float:
    pred, labels = predict(bundle, view)
    return float((pred == labels).mean() * 100.0)


# ---------------------------------------------------------------------------
# LOSO evaluation
# ---------------------------------------------------------------------------


@dataclass
class LosoReport:
    per_subject: dict[str, float]
    mean: float
    std: float
    metadata: dict = field(default_factory=dict)

    @classmethod
    def from_accuracies(cls, per_subject: dict[str, float], metadata: dict | None = None):
        acc = np.array(list(per_subject.values()), dtype=np.float64)
        return cls(dict(per_subject), float(acc.mean()), float(acc.std()), dict(metadata or {}))

    def check(self, tol: float = 1e-9) -> bool:
        acc = np.array(list(self.per_subject.values()), dtype=np.float64)
        return abs(acc.mean() - self.mean) <= tol and abs(acc.std() - self.std) <= tol

    def to_json(self) -> str:
        doc = {
            "per_subject": self.per_subject,
            "mean": self.mean,
            "std": self.std,
            "metadata": self.metadata,
        }
        return json.dumps(doc, indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "LosoReport":
        doc = json.loads(text)
        return cls(doc["per_subject"], doc["mean"], doc["std"], doc.get("metadata", {}))

    def per_subject_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["subject", "accuracy"])
        for s, a in self.per_subject.items():
            w.writerow([s, f"{a:.6f}"])
        return buf.getvalue()


def fold_seeds(seed: int, fold_index: int) -> dict[str, int]:
    ss = np.random.SeedSequence([seed, fold_index])
    init, pre, fine, sub = (int(v) for v in ss.generate_state(4))
    return {"init": init, "pretrain": pre, "finetune": fine, "subsample": sub}


@dataclass
class FoldResult:
    held_out: str
    accuracy: dict[float, float]
    loss_rows: list[dict]
    reads: dict


def run_fold(
    segments: SegmentBatch,
    train_idx: np.ndarray,
    test_idx: np.ndarray,
    held_out: str,
    fold_index: int,
    config: RunConfig,
    fractions: Sequence[float] = (1.0,),
) -> FoldResult:
    """Pretrain, fine-tune and test one LOSO fold.

    The self-supervised stage sees every training segment; each fraction
    then fine-tunes a freshly initialised classifier on its labeled subset.
    """
    guard = AccessGuard(segments)
    seeds = fold_seeds(config.seed, fold_index)
    geo = geometry_for(segments, config)
    bundle = new_bundle(geo, config, seeds["init"])
    rows = pretrain(bundle, guard.view(train_idx, "pretrain"), config, seeds["pretrain"], held_out)
    initial_classifier = {k: v.data.copy() for k, v in bundle.classifier.params.items()}
    initial_encoders = {k: v.data.copy() for k, v in bundle.parameters().items()}
    train_meta = segments.subset(train_idx)
    acc = {}
    for fraction in fractions:
        bundle.load_arrays(initial_encoders)
        for k, v in bundle.classifier.params.items():
            v.data[...] = initial_classifier[k]
        if fraction < 1.0:
            local = limited_label_subsample(train_meta, fraction, seeds["subsample"])
        else:
            local = np.arange(train_idx.size)
        labeled = guard.view(train_idx[local], "finetune")
        fine = finetune(bundle, labeled, config, seeds["finetune"], held_out)
        rows += [dict(r, fraction=fraction) for r in fine] if len(fractions) > 1 else fine
        acc[fraction] = accuracy(bundle, guard.view(test_idx, "test"))
    reads = {f"{p}|{s}": n for (p, s), n in sorted(guard.reads.items())}
    return FoldResult(held_out, acc, rows, reads)


def _run_fold_args(args):
    return run_fold(*args)


def evaluate_loso(
    segments: SegmentBatch,
    config: RunConfig,
    fractions: Sequence[float] | None = None,
    jobs: int | None = None,
) -> tuple[dict[float, LosoReport], list[dict], list[FoldResult]]:
    """Leave-one-subject-out evaluation for every requested labeled fraction.

    Returns one report per fraction, the concatenated loss log and the raw
    fold results (which carry per-phase read counts for auditing).
    """
    splits = make_loso_splits(segments)
    fractions = tuple(fractions or (config.fraction,))
    tasks = [
        (segments, sp.train, sp.test, sp.held_out_subject, i, config, fractions)
        for i, sp in enumerate(splits)
    ]
    jobs = jobs or config.jobs
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_run_fold_args, tasks))
    else:
        results = [run_fold(*t) for t in tasks]
    rows = [r for res in results for r in res.loss_rows]
    reports = {}
    for fraction in fractions:
        per_subject = {res.held_out: res.accuracy[fraction] for res in results}
        meta = {
            "config_hash": config.with_overrides(fraction=fraction).hash(),
            "seed": config.seed,
            "variant": config.variant,
            "fraction": fraction,
            "version": __version__,
            "n_segments": len(segments),
        }
        reports[fraction] = LosoReport.from_accuracies(per_subject, meta)
    return reports, rows, results


def run_variant(variant: str, segments: SegmentBatch, config: RunConfig, jobs: int | None = None):
    from .model import VARIANTS, ConfigurationError

    if variant not in VARIANTS:
        raise ConfigurationError(f"unknown variant {variant!r}; choose from {VARIANTS}")
    cfg = config.with_overrides(variant=variant)
    reports, rows, results = evaluate_loso(segments, cfg, jobs=jobs)
    return reports[cfg.fraction], rows, results


def loss_log_csv(rows: list[dict]) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=LOSS_LOG_FIELDS, lineterminator="\n", extrasaction="ignore")
    w.writeheader()
    for row in rows:
        w.writerow({k: _fmt(row[k]) for k in LOSS_LOG_FIELDS})
    return buf.getvalue()


def _fmt(v):
    if isinstance(v, float):
        return repr(v)
    return v


# ---------------------------------------------------------------------------
# separability
# ---------------------------------------------------------------------------


class MetricError(ValueError):
    pass


def centroid_dispersion(features: np.ndarray, subject_ids: np.ndarray) -> float:
    """Mean pairwise distance between per-subject centroids, in units of within-subject spread.

    Features are standardised per dimension first so that spaces of
    different scale and width are comparable.
    """
    x = np.asarray(features, dtype=np.float64)
    sd = x.std(axis=0)
    keep = sd > 1e-12
    if not keep.any():
        return 0.0
    x = (x[:, keep] - x[:, keep].mean(axis=0)) / sd[keep]
    subjects = sorted(set(np.asarray(subject_ids).tolist()))
    cents = np.stack([x[subject_ids == s].mean(axis=0) for s in subjects])
    resid = np.concatenate([x[subject_ids == s] - c for s, c in zip(subjects, cents)])
    spread = np.sqrt((resid**2).sum(axis=1).mean())
    if len(subjects) < 2 or spread == 0:
        return 0.0
    d = [np.linalg.norm(cents[i] - cents[j]) for i in range(len(cents)) for j in range(i + 1, len(cents))]
    return float(np.mean(d) / spread)


def separability_metrics(features: np.ndarray, labels: np.ndarray, subject_ids: np.ndarray) -> dict:
    """Cross-subject linear-probe accuracy, class silhouette, and centroid dispersion."""
    from sklearn.linear_model import LogisticRegression
    from sklearn.metrics import silhouette_score
    from sklearn.preprocessing import StandardScaler

    features = np.asarray(features, dtype=np.float64).reshape(len(labels), -1)
    labels = np.asarray(labels)
    subject_ids = np.asarray(subject_ids)
    if np.unique(labels).size < 2:
        raise MetricError("separability metrics need both classes present")
    subjects = sorted(set(subject_ids.tolist()))
    if len(subjects) >= 2:
        correct = 0
        for s in subjects:
            test = subject_ids == s
            train = ~test
            if np.unique(labels[train]).size < 2:
                continue
            scaler = StandardScaler().fit(features[train])
            clf = LogisticRegression(max_iter=2000, C=1.0)
            clf.fit(scaler.transform(features[train]), labels[train])
            correct += int((clf.predict(scaler.transform(features[test])) == labels[test]).sum())
        probe = 100.0 * correct / len(labels)
    else:
        probe = float("nan")
    sd = features.std(axis=0)
    keep = sd > 1e-12
    if keep.any():
        z = (features[:, keep] - features[:, keep].mean(axis=0)) / sd[keep]
        silhouette = float(silhouette_score(z, labels))
    else:
        silhouette = 0.0
    return {
        "probe_accuracy": probe,
        "silhouette": silhouette,
        "dispersion": centroid_dispersion(features, subject_ids),
    }
