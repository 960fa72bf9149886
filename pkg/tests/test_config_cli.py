import hashlib
from pathlib import Path

import pytest

from joined.cli import main
from joined.config import ConfigError, RunConfig, load_config, render_config


def tree_digest(root: Path) -> str:
    h = hashlib.sha256()
    for path in sorted(root.rglob("*")):
        if path.is_file():
            h.update(str(path.relative_to(root)).encode())
            h.update(path.read_bytes())
    return h.hexdigest()


class TestRunConfig:
    def test_published_defaults(self):
        c = RunConfig()
        assert c.lr == 2e-4
        assert c.coarse_epochs == 300
        assert (c.tau0, c.tau1) == (50, 100)
        assert (c.lambda0, c.lambda1) == (1.0, 1.0)
        assert c.sigma_divisor == 100.0
        assert (c.seg_crop_size, c.loc_crop_size) == (448, 128)
        assert c.coarse_resolution == 256

    def test_file_overrides(self, tmp_path):
        cfg = tmp_path / "run.toml"
        cfg.write_text("lr = 0.001\nbase_width = 8\naugment = false\n")
        c = load_config(cfg)
        assert c.lr == 0.001
        assert c.base_width == 8
        assert c.augment is False

    def test_unknown_key_named(self, tmp_path):
        cfg = tmp_path / "run.toml"
        cfg.write_text("learning_rate = 0.1\n")
        with pytest.raises(ConfigError, match="learning_rate"):
            load_config(cfg)

    def test_type_error_named(self, tmp_path):
        cfg = tmp_path / "run.toml"
        cfg.write_text("coarse_epochs = \"many\"\n")
        with pytest.raises(ConfigError, match="coarse_epochs"):
            load_config(cfg)

    def test_flag_overrides_beat_file(self, tmp_path):
        cfg = tmp_path / "run.toml"
        cfg.write_text("seed = 1\n")
        c = load_config(cfg, overrides={"seed": 99})
        assert c.seed == 99

    def test_invalid_choice_rejected(self):
        with pytest.raises(ConfigError, match="consistency_backprop"):
            load_config(None, overrides={"consistency_backprop": "sometimes"})

    def test_render_round_trips(self, tmp_path):
        text = render_config(RunConfig(seed=123, augment=False))
        cfg = tmp_path / "echo.toml"
        cfg.write_text(text)
        c = load_config(cfg)
        assert c.seed == 123
        assert c.augment is False

    def test_workers_env_cap(self, monkeypatch):
        monkeypatch.setenv("JOINED_NUM_WORKERS", "2")
        assert RunConfig(workers=8).effective_workers() == 2
        monkeypatch.setenv("JOINED_NUM_WORKERS", "abc")
        with pytest.raises(ConfigError, match="JOINED_NUM_WORKERS"):
            RunConfig(workers=8).effective_workers()


class TestCli:
    def test_synth_deterministic_trees(self, tmp_path):
        a, b = tmp_path / "a", tmp_path / "b"
        assert main(["synth", "--n", "4", "--seed", "7", "--out", str(a)]) == 0
        assert main(["synth", "--n", "4", "--seed", "7", "--out", str(b)]) == 0
        assert tree_digest(a) == tree_digest(b)

    def test_print_config_echoes_defaults(self, capsys):
        assert main(["synth", "--print-config"]) == 0
        out = capsys.readouterr().out
        assert "lr = 0.0002" in out
        assert "tau0 = 50" in out
        assert "seg_crop_size = 448" in out

    def test_gen_targets_writes_blobs(self, tmp_path):
        data = tmp_path / "data"
        main(["synth", "--n", "2", "--seed", "3", "--out", str(data)])
        out = tmp_path / "targets"
        assert main(["gen-targets", "--data", str(data), "--out", str(out)]) == 0
        assert (out / "synth_0000.dist.jnd").exists()
        assert (out / "synth_0000.heat.jnd").exists()
        assert (out / "synth_0001.onehot.jnd").exists()

    def test_eval_gt_as_predictions(self, tmp_path, capsys):
        from joined import data_io, metrics
        from joined.targets import od_center_from_mask

        data = tmp_path / "data"
        main(["synth", "--n", "2", "--seed", "5", "--out", str(data)])
        manifest = data_io.build_manifest(data)
        pred = tmp_path / "pred"
        for s in data_io.load_dataset(manifest):
            data_io.save_prediction(
                pred,
                data_io.PredictionRecord(
                    image_id=s.image_id,
                    mask=s.mask,
                    fovea_xy=s.annot.fovea,
                    od_center_xy=od_center_from_mask(s.mask),
                    vcdr=metrics.vcdr(s.mask),
                ),
            )
        assert main(["eval", "--pred", str(pred), "--data", str(data), "--out", str(tmp_path / "r")]) == 0
        out = capsys.readouterr().out
        assert "100.00" in out  # Dice column in percent
        assert (tmp_path / "r" / "report.csv").exists()
        assert (tmp_path / "r" / "report.md").exists()

    def test_bad_config_key_exits_nonzero(self, tmp_path, capsys):
        cfg = tmp_path / "bad.toml"
        cfg.write_text("nonsense = 1\n")
        assert main(["synth", "--config", str(cfg)]) == 1
        assert "error" in capsys.readouterr().err

    def test_missing_dataset_exits_nonzero(self, tmp_path, capsys):
        assert main(["train-coarse", "--data", str(tmp_path / "void"), "--out", str(tmp_path)]) == 1
        assert "error" in capsys.readouterr().err
