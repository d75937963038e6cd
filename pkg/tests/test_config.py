"""Config files: parsing, fail-closed keys, overrides, dataset building."""

import numpy as np
import pytest

from lsqnet.config import ConfigError, build_datasets, load_config

BASE = """
[model]
arch = "mlp"
input_dim = 16
hidden = [8]
classes = 4
bits = 2

[trainer]
epochs = 2
seed = 3

[data]
kind = "blobs"
n_samples = 60
n_test = 20

[output]
dir = "out/test"
"""


@pytest.fixture
def cfg_path(tmp_path):
    path = tmp_path / "run.toml"
    path.write_text(BASE)
    return str(path)


class TestLoadConfig:
    def test_basic_parse(self, cfg_path):
        cfg = load_config(cfg_path)
        assert cfg.model.bits == 2
        assert cfg.model.hidden == (8,)
        assert cfg.trainer.epochs == 2
        assert cfg.trainer.bits == 2
        assert cfg.out_dir == "out/test"

    def test_precision_dependent_defaults(self, cfg_path):
        cfg = load_config(cfg_path)
        assert cfg.trainer.lr0 == 0.01  # 2-bit default
        assert cfg.trainer.weight_decay == 2.5e-5

    def test_8bit_defaults_to_one_epoch(self, tmp_path):
        path = tmp_path / "r.toml"
        path.write_text('[model]\nbits = 8\n')
        assert load_config(str(path)).trainer.epochs == 1

    def test_fp_spelled_out(self, tmp_path):
        path = tmp_path / "r.toml"
        path.write_text('[model]\nbits = "fp"\n')
        cfg = load_config(str(path))
        assert cfg.model.bits is None
        assert cfg.trainer.lr0 == 0.1

    def test_unknown_key_fails_closed(self, tmp_path):
        path = tmp_path / "r.toml"
        path.write_text('[trainer]\nlearning_rate = 0.1\n')
        with pytest.raises(ConfigError, match="learning_rate"):
            load_config(str(path))

    def test_unknown_section_fails_closed(self, tmp_path):
        path = tmp_path / "r.toml"
        path.write_text('[optimizer]\nlr = 0.1\n')
        with pytest.raises(ConfigError, match="optimizer"):
            load_config(str(path))

    def test_invalid_toml(self, tmp_path):
        path = tmp_path / "r.toml"
        path.write_text('[model\nbits = 2')
        with pytest.raises(ConfigError):
            load_config(str(path))

    def test_bad_bits_value(self, tmp_path):
        path = tmp_path / "r.toml"
        path.write_text('[model]\nbits = 5\n')
        with pytest.raises(ConfigError):
            load_config(str(path))

    def test_override(self, cfg_path):
        cfg = load_config(cfg_path, ["trainer.lr0=0.001", "model.bits=4"])
        assert cfg.trainer.lr0 == 0.001
        assert cfg.model.bits == 4

    def test_override_bad_format(self, cfg_path):
        with pytest.raises(ConfigError):
            load_config(cfg_path, ["lr0=0.1"])

    def test_override_subject_to_key_check(self, cfg_path):
        with pytest.raises(ConfigError):
            load_config(cfg_path, ["trainer.bogus=1"])

    def test_lsq_out_prefixes_output(self, cfg_path, monkeypatch):
        monkeypatch.setenv("LSQ_OUT", "/elsewhere")
        cfg = load_config(cfg_path)
        assert cfg.out_dir == "/elsewhere/out/test"

    def test_hash_stable(self, cfg_path):
        assert load_config(cfg_path).hash == load_config(cfg_path).hash
        changed = load_config(cfg_path, ["trainer.seed=4"])
        assert changed.hash != load_config(cfg_path).hash


class TestBuildDatasets:
    def test_blobs_mlp(self, cfg_path):
        cfg = load_config(cfg_path)
        tr, te = build_datasets(cfg)
        assert tr.x.shape == (60, 16)
        assert te.x.shape == (20, 16)

    def test_blobs_cnn_shape(self, tmp_path):
        path = tmp_path / "r.toml"
        path.write_text('[model]\narch = "cnn"\nbits = 2\n'
                        '[data]\nn_samples = 30\nn_test = 10\n')
        tr, _ = build_datasets(load_config(str(path)))
        assert tr.x.shape == (30, 1, 8, 8)

    def test_blobs_deterministic(self, cfg_path):
        tr1, _ = build_datasets(load_config(cfg_path))
        tr2, _ = build_datasets(load_config(cfg_path))
        assert np.array_equal(tr1.x, tr2.x)

    def test_idx_missing_key(self, tmp_path):
        path = tmp_path / "r.toml"
        path.write_text('[data]\nkind = "idx"\n')
        with pytest.raises(ConfigError, match="missing required key"):
            build_datasets(load_config(str(path)))

    def test_unknown_kind(self, tmp_path):
        path = tmp_path / "r.toml"
        path.write_text('[data]\nkind = "parquet"\n')
        with pytest.raises(ConfigError):
            load_config(str(path))

    def test_csv_datasets(self, tmp_path):
        train = tmp_path / "train.csv"
        test = tmp_path / "test.csv"
        train.write_text("0.1,0.2,0\n0.3,0.4,1\n")
        test.write_text("0.5,0.6,1\n")
        path = tmp_path / "r.toml"
        path.write_text(f'[data]\nkind = "csv"\n'
                        f'train_path = "{train}"\ntest_path = "{test}"\n')
        tr, te = build_datasets(load_config(str(path)))
        assert len(tr) == 2 and len(te) == 1
