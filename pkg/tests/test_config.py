from pathlib import Path

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cascade_eeg.augment import AugmentPolicy
from cascade_eeg.config import ConfigError, RunConfig, dump_config, load_config, parse_config

SYNTH_CFG = Path(__file__).resolve().parents[1] / "configs" / "synth.cfg"


class TestDefaults:
    def test_default_hyperparameters(self):
        cfg = RunConfig()
        assert (cfg.lam, cfg.tau, cfg.batch_size, cfg.lr_classifier) == (0.1, 0.07, 128, 1e-5)
        assert (cfg.epochs_pretrain, cfg.epochs_classifier) == (40, 100)

    @pytest.mark.parametrize("scheme,lr", [("deap", 1e-4), ("dreamer", 8e-5)])
    def test_scheme_pretrain_lr(self, scheme, lr):
        assert RunConfig(scheme=scheme, data="x.desc").pretrain_lr == lr

    def test_explicit_lr_wins(self):
        assert RunConfig(lr_pretrain=3e-3).pretrain_lr == 3e-3

    def test_supervised_lr_falls_back(self):
        assert RunConfig(lr_classifier=2e-4).supervised_lr == 2e-4
        assert RunConfig(lr_supervised=1e-3).supervised_lr == 1e-3


class TestValidation:
    @pytest.mark.parametrize(
        "kw",
        [
            {"batch_size": 1},
            {"lr_classifier": 0.0},
            {"lr_pretrain": -1e-4},
            {"lam": 1.5},
            {"tau": 0.0},
            {"variant": "bogus"},
            {"dimension": "dominance"},
            {"scheme": "deap"},
            {"fraction": 0.0},
            {"synth_channels": 7},
            {"ntxent_reduction": "max"},
        ],
    )
    def test_rejects(self, kw):
        with pytest.raises(ConfigError):
            RunConfig(**kw)


class TestParse:
    def test_coerces_types(self):
        cfg = parse_config(
            "batch_size = 16\nlam = 0.25\nfinetune_encoders = yes\nlr_pretrain = none\n"
            "window_s = 2.5\nvariant = tt_recon  # trailing comment\n"
        )
        assert cfg.batch_size == 16 and isinstance(cfg.batch_size, int)
        assert cfg.lam == 0.25 and cfg.finetune_encoders is True
        assert cfg.lr_pretrain is None and cfg.window_s == 2.5 and cfg.variant == "tt_recon"

    def test_augment_keys(self):
        cfg = parse_config("augment.remove_prob = 0.3\naugment.time_methods = jitter, scale\n")
        assert cfg.augment.remove_prob == 0.3 and cfg.augment.time_methods == ("jitter", "scale")

    @pytest.mark.parametrize(
        "text,match",
        [
            ("bacth_size = 4\n", "unknown key"),
            ("augment.warp = 1\n", "unknown key"),
            ("seed = 1\nseed = 2\n", "duplicate"),
            ("augment.add_prob = 0.1\naugment.add_prob = 0.2\n", "duplicate"),
            ("seed\n", "key = value"),
            ("seed = one\n", "cannot parse"),
            ("augment.remove_prob = 2\n", "remove_prob"),
            ("finetune_encoders = maybe\n", "cannot parse"),
        ],
    )
    def test_errors(self, text, match):
        with pytest.raises(ConfigError, match=match):
            parse_config(text)

    def test_line_number_in_message(self):
        with pytest.raises(ConfigError, match="cfg:3"):
            parse_config("# c\nseed = 1\nnope = 2\n", "cfg")

    def test_roundtrip(self):
        cfg = RunConfig(lam=0.3, lr_supervised=1e-3, window_s=4.0, augment=AugmentPolicy(freq_methods=("add_components",)))
        assert parse_config(dump_config(cfg)) == cfg

    @settings(max_examples=30, deadline=None)
    @given(lam=st.floats(0, 1), bs=st.integers(2, 512), seed=st.integers(0, 2**31))
    def test_roundtrip_property(self, lam, bs, seed):
        cfg = RunConfig(lam=lam, batch_size=bs, seed=seed)
        back = parse_config(dump_config(cfg))
        assert back == cfg and back.hash() == cfg.hash()


class TestHash:
    def test_stable_and_sensitive(self):
        assert RunConfig().hash() == RunConfig().hash()
        assert RunConfig().hash() != RunConfig(seed=1).hash()
        assert RunConfig().hash() != RunConfig(augment=AugmentPolicy(add_prob=0.2)).hash()


class TestLoad:
    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigError, match="not found"):
            load_config(tmp_path / "nope.cfg")

    def test_relative_data_path(self, tmp_path):
        (tmp_path / "c.cfg").write_text("scheme = deap\ndata = sub/dataset.desc\n")
        cfg = load_config(tmp_path / "c.cfg")
        assert Path(cfg.data) == (tmp_path / "sub" / "dataset.desc").resolve()

    def test_shipped_synthetic_config(self):
        cfg = load_config(SYNTH_CFG)
        assert (cfg.synth_subjects, cfg.synth_channels, cfg.synth_length, cfg.synth_seed) == (8, 8, 128, 7)
        assert (cfg.lam, cfg.tau) == (0.1, 0.07)
