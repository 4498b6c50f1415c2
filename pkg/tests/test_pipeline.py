import json
from pathlib import Path

import numpy as np
import pytest

from cascade_eeg import instrument
from cascade_eeg.config import RunConfig, load_config
from cascade_eeg.dataio import ProtocolError, SegmentBatch, make_loso_splits
from cascade_eeg.model import VARIANTS, ConfigurationError
from cascade_eeg.pipeline import (
    AccessGuard,
    LOSS_LOG_FIELDS,
    LosoReport,
    MetricError,
    NumericError,
    accuracy,
    centroid_dispersion,
    evaluate_loso,
    finetune,
    fold_seeds,
    geometry_for,
    load_segments,
    loss_log_csv,
    new_bundle,
    open_view,
    pretrain,
    run_variant,
    separability_metrics,
)

TINY = dict(
    synth_subjects=3,
    synth_trials=4,
    synth_channels=4,
    synth_length=32,
    synth_segments_per_trial=2,
    filters=4,
    batch_size=4,
    epochs_pretrain=2,
    epochs_classifier=3,
    lr_pretrain=1e-3,
    lr_classifier=1e-3,
)


def tiny_config(**kw):
    return RunConfig(**{**TINY, **kw})


@pytest.fixture(scope="module")
def segments():
    return load_segments(tiny_config())


def bundle_for(segments, cfg, seed=0):
    return new_bundle(geometry_for(segments, cfg), cfg, seed)


class TestAccessGuard:
    def test_counts_reads_per_phase_and_subject(self, segments):
        guard = AccessGuard(segments)
        view = guard.view(np.flatnonzero(segments.subject_ids == "s01"), "pretrain")
        view.take([0, 1, 2])
        view.take_labeled([0])
        assert guard.reads == {("pretrain", "s01"): 4}
        assert guard.reads_of("s01", ["finetune"]) == 0

    def test_metadata_is_free(self, segments):
        guard = AccessGuard(segments)
        meta = guard.view(np.arange(5), "pretrain").metadata()
        assert len(meta) == 5 and not guard.reads

    def test_subview_changes_phase(self, segments):
        guard = AccessGuard(segments)
        guard.view(np.arange(len(segments)), "pretrain").subview([0], "test").take([0])
        assert guard.reads == {("test", str(segments.subject_ids[0])): 1}


class TestLoadSegments:
    def test_synthetic_shape(self, segments):
        assert segments.values.shape == (3 * 4 * 2, 4, 32)
        assert sorted(set(segments.subject_ids)) == ["s00", "s01", "s02"]

    def test_window_override(self):
        seg = load_segments(tiny_config(window_s=0.125, stride_s=0.125))
        assert seg.values.shape == (3 * 4 * 4, 4, 16)


class TestPretrain:
    def test_one_log_row_per_step(self, segments):
        cfg = tiny_config(epochs_pretrain=3, batch_size=5)
        b = bundle_for(segments, cfg)
        rows = pretrain(b, open_view(segments), cfg, seed=1)
        # 24 segments in batches of 5: the partial batch is dropped
        assert len(rows) == 3 * (24 // 5)
        assert [r["step"] for r in rows] == list(range(len(rows)))
        for r in rows:
            assert r["joint"] == pytest.approx(0.1 * (r["l_con_t"] + r["l_con_f"]) + 0.9 * r["l_recon"])

    def test_same_seed_same_checkpoint(self, segments):
        cfg = tiny_config()
        states = []
        for _ in range(2):
            b = bundle_for(segments, cfg, seed=4)
            pretrain(b, open_view(segments), cfg, seed=2)
            states.append(b.state_arrays())
        for k, v in states[0].items():
            np.testing.assert_array_equal(states[1][k], v)

    def test_touches_only_ssl_parameters(self, segments):
        cfg = tiny_config()
        b = bundle_for(segments, cfg)
        before = b.state_arrays()
        pretrain(b, open_view(segments), cfg)
        after = b.state_arrays()
        changed = {k for k in before if not np.array_equal(before[k], after[k])}
        assert not any(k.startswith("classifier.") for k in changed)
        assert {"tfr.conv_w", "tfr.dec_w"} <= changed

    def test_nan_aborts_with_snapshot(self, segments):
        cfg = tiny_config()
        b = bundle_for(segments, cfg)
        b.tfr.params["dec_w"].data[:] = np.nan
        with pytest.raises(NumericError) as err:
            pretrain(b, open_view(segments), cfg)
        assert err.value.snapshot["step"] == 0 and err.value.snapshot["x"].shape == (4, 4, 32)

    def test_base_model_has_no_stage(self, segments):
        cfg = tiny_config(variant="base_model")
        assert pretrain(bundle_for(segments, cfg), open_view(segments), cfg) == []

    def test_too_few_segments(self, segments):
        cfg = tiny_config()
        with pytest.raises(ProtocolError):
            pretrain(bundle_for(segments, cfg), open_view(segments).subview([0]), cfg)


class TestFinetune:
    def test_frozen_encoders_bitwise_unchanged(self, segments):
        cfg = tiny_config()
        b = bundle_for(segments, cfg)
        before = b.state_arrays()
        rows = finetune(b, open_view(segments), cfg)
        after = b.state_arrays()
        for k, v in before.items():
            if k.startswith("classifier."):
                continue
            np.testing.assert_array_equal(after[k], v, err_msg=k)
        assert any(not np.array_equal(after[k], before[k]) for k in before if k.startswith("classifier."))
        # 24 segments, batch 4, 3 epochs
        assert len(rows) == 18 and all(r["phase"] == "finetune" for r in rows)

    def test_encoder_finetuning_flag(self, segments):
        cfg = tiny_config(finetune_encoders=True)
        b = bundle_for(segments, cfg)
        before = b.enc_t.params["tf_w"].data.copy()
        finetune(b, open_view(segments), cfg)
        assert not np.array_equal(b.enc_t.params["tf_w"].data, before)

    def test_empty_labeled_set(self, segments):
        cfg = tiny_config()
        with pytest.raises(ProtocolError):
            finetune(bundle_for(segments, cfg), open_view(segments).subview([]), cfg)


class TestLoso:
    def test_purity_and_shape(self, segments):
        reports, rows, results = evaluate_loso(segments, tiny_config())
        rep = reports[1.0]
        assert list(rep.per_subject) == ["s00", "s01", "s02"] and rep.check()
        for res in results:
            for key, n in res.reads.items():
                phase, subject = key.split("|")
                if subject == res.held_out:
                    assert phase == "test" and n == 8
                else:
                    assert phase in ("pretrain", "finetune")

    def test_loss_log_completeness(self, segments):
        cfg = tiny_config()
        _, rows, _ = evaluate_loso(segments, cfg)
        # per fold: 16 training segments -> 4 pretrain steps/epoch, 4 finetune steps/epoch
        assert len(rows) == 3 * (2 * 4 + 3 * 4)
        text = loss_log_csv(rows)
        assert text.splitlines()[0] == ",".join(LOSS_LOG_FIELDS)
        assert len(text.splitlines()) == len(rows) + 1

    def test_reproducible(self, segments):
        a, _, _ = evaluate_loso(segments, tiny_config(seed=3))
        b, _, _ = evaluate_loso(segments, tiny_config(seed=3))
        assert a[1.0].to_json() == b[1.0].to_json()

    def test_parallel_matches_serial(self, segments):
        a, _, _ = evaluate_loso(segments, tiny_config(), jobs=1)
        b, _, _ = evaluate_loso(segments, tiny_config(), jobs=2)
        assert a[1.0].per_subject == b[1.0].per_subject

    def test_base_model_skips_ssl_machinery(self, segments):
        instrument.reset()
        evaluate_loso(segments, tiny_config(variant="base_model"))
        counts = instrument.snapshot()
        assert counts.get("fft", 0) == 0 and counts.get("augment", 0) == 0

    def test_fractions_share_pretraining(self, segments):
        reports, rows, results = evaluate_loso(segments, tiny_config(), fractions=(0.5, 1.0))
        assert set(reports) == {0.5, 1.0}
        pre = [r for r in rows if r["phase"] == "pretrain"]
        assert len(pre) == 3 * 2 * 4
        for res in results:
            # 8 labeled at 50% plus 16 at 100%, read once each for features
            assert sum(n for k, n in res.reads.items() if k.startswith("finetune|")) == 8 + 16

    @pytest.mark.parametrize("variant", VARIANTS)
    def test_every_variant_runs(self, segments, variant):
        rep, _, _ = run_variant(variant, segments, tiny_config(epochs_pretrain=1, epochs_classifier=1))
        assert rep.metadata["variant"] == variant and len(rep.per_subject) == 3

    def test_unknown_variant(self, segments):
        with pytest.raises(ConfigurationError):
            run_variant("bogus", segments, tiny_config())

    def test_single_subject(self, segments):
        with pytest.raises(ProtocolError):
            evaluate_loso(segments.subset(np.flatnonzero(segments.subject_ids == "s00")), tiny_config())

    def test_fold_seeds_distinct(self):
        seeds = [fold_seeds(0, i) for i in range(4)] + [fold_seeds(1, 0)]
        flat = [v for s in seeds for v in s.values()]
        assert len(set(flat)) == len(flat)
        assert fold_seeds(0, 2) == fold_seeds(0, 2)

    def test_splits_match_dataio(self, segments):
        _, _, results = evaluate_loso(segments, tiny_config(epochs_pretrain=0, epochs_classifier=1))
        assert [r.held_out for r in results] == [s.held_out_subject for s in make_loso_splits(segments)]


class TestLosoReport:
    def test_population_std(self):
        rep = LosoReport.from_accuracies({"a": 50.0, "b": 100.0})
        assert rep.mean == 75.0 and rep.std == 25.0 and rep.check()

    def test_check_detects_tampering(self):
        rep = LosoReport.from_accuracies({"a": 50.0, "b": 70.0, "c": 90.0})
        rep.mean += 1e-6
        assert not rep.check()

    def test_json_roundtrip(self):
        rep = LosoReport.from_accuracies({"s1": 62.5, "s0": 80.0}, {"seed": 1})
        back = LosoReport.from_json(rep.to_json())
        assert back == rep and json.loads(rep.to_json())["metadata"]["seed"] == 1

    def test_csv(self):
        rep = LosoReport.from_accuracies({"s0": 62.5, "s1": 100.0})
        assert rep.per_subject_csv() == "subject,accuracy\ns0,62.500000\ns1,100.000000\n"


class TestSeparability:
    def test_identical_representations(self):
        rng = np.random.default_rng(0)
        base = rng.standard_normal((10, 3))
        feats = np.concatenate([base, base])
        labels = np.repeat([0, 1], 10)
        subjects = np.tile(np.repeat(["a", "b"], 5), 2)
        m = separability_metrics(feats, labels, subjects)
        # each point's twin sits in the other class: b = (n-1)/n * a, so s = -1/n -> 0
        assert m["silhouette"] == pytest.approx(-0.1, abs=1e-9)
        assert m["probe_accuracy"] == pytest.approx(50.0, abs=15.0)

    def test_separable_classes(self):
        rng = np.random.default_rng(1)
        labels = np.repeat([0, 1], 30)
        feats = rng.standard_normal((60, 4)) * 0.1 + labels[:, None] * 3.0
        subjects = np.tile(np.repeat(["a", "b", "c"], 10), 2)
        m = separability_metrics(feats, labels, subjects)
        assert m["probe_accuracy"] == 100.0 and m["silhouette"] > 0.8

    def test_single_class(self):
        with pytest.raises(MetricError):
            separability_metrics(np.zeros((4, 2)), np.zeros(4, int), np.array(["a", "a", "b", "b"]))

    def test_dispersion_oracle(self):
        # one feature, subjects at -1 +- 0.5 and +1 +- 0.5: centroid gap 2, rms spread 0.5,
        # global sd sqrt(1.25) cancels in the ratio
        feats = np.array([[-1.5], [-0.5], [0.5], [1.5]])
        assert centroid_dispersion(feats, np.array(["a", "a", "b", "b"])) == pytest.approx(4.0)

    def test_dispersion_scale_invariant(self):
        rng = np.random.default_rng(2)
        feats = rng.standard_normal((30, 5))
        subj = np.repeat(["a", "b", "c"], 10)
        assert centroid_dispersion(feats * [1, 10, 100, 0.1, 3], subj) == pytest.approx(centroid_dispersion(feats, subj))

    def test_flattens_segments(self):
        seg = SegmentBatch(np.random.default_rng(3).standard_normal((8, 2, 4)), np.repeat(["a", "b"], 4), np.array(["t"] * 8), np.tile([0, 1], 4))
        m = separability_metrics(seg.values, seg.labels, seg.subject_ids)
        assert set(m) == {"probe_accuracy", "silhouette", "dispersion"}


class TestPinnedSynthetic:
    """Reference run on configs/synth.cfg, seed 0: joint 1.21e5 -> 4.09e4 (ratio 0.34), train accuracy 100%."""

    @pytest.fixture(scope="class")
    def trained(self):
        cfg = load_config(Path(__file__).resolve().parents[1] / "configs" / "synth.cfg")
        seg = load_segments(cfg)
        b = bundle_for(seg, cfg)
        rows = pretrain(b, open_view(seg), cfg, 0)
        return cfg, seg, b, rows

    def test_joint_loss_halves(self, trained):
        cfg, _, _, rows = trained
        last_epoch = [r["joint"] for r in rows if r["epoch"] == cfg.epochs_pretrain - 1]
        assert np.mean(last_epoch) < 0.5 * rows[0]["joint"]

    def test_training_accuracy(self, trained):
        cfg, seg, b, _ = trained
        finetune(b, open_view(seg), cfg, 0)
        assert accuracy(b, open_view(seg)) > 90.0
