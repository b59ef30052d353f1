import json
import os

import pytest
import torch

from msode.cli import main
from msode.synth import read_dataset
from msode.volume import read_mv01, write_mv01


def run_cli(*argv):
    return main(list(argv))


@pytest.fixture()
def small_dataset(tmp_path):
    out = tmp_path / "ds"
    code = run_cli("simulate", "--kind", "rigid", "--rot-deg", "4", "--trans-mm", "1",
                   "--dims", "16", "--pairs", "2", "--seed", "3", "--out", str(out))
    assert code == 0
    return out


class TestSimulate:
    def test_preset_encodes_ranges(self, tmp_path):
        out = tmp_path / "ds"
        code = run_cli("simulate", "--preset", "rigid-full", "--dims", "16",
                       "--pairs", "1", "--seed", "1", "--out", str(out))
        assert code == 0
        meta = json.loads((out / "index.json").read_text())
        assert meta["motion"]["rot_range_deg"] == 75.0
        assert meta["motion"]["trans_range_mm"] == 20.0

    def test_zero_pairs_valid_index(self, tmp_path):
        out = tmp_path / "empty"
        assert run_cli("simulate", "--preset", "deform-8mm", "--dims", "16",
                       "--pairs", "0", "--out", str(out)) == 0
        ds = read_dataset(out)
        assert ds.n_pairs == 0

    def test_same_seed_identical_dirs(self, tmp_path):
        for name in ("a", "b"):
            assert run_cli("simulate", "--kind", "rigid", "--rot-deg", "2",
                           "--dims", "16", "--pairs", "1", "--seed", "9",
                           "--out", str(tmp_path / name)) == 0
        fa = (tmp_path / "a" / "pair_0000" / "moving.mv01").read_bytes()
        fb = (tmp_path / "b" / "pair_0000" / "moving.mv01").read_bytes()
        assert fa == fb

    def test_usage_error_without_kind_or_preset(self, tmp_path):
        assert run_cli("simulate", "--pairs", "1", "--out", str(tmp_path / "x")) == 2


class TestTrainReg:
    def test_smoke_train_writes_model_and_config(self, small_dataset, tmp_path):
        out = tmp_path / "run"
        cfg = tmp_path / "cfg.json"
        cfg.write_text(json.dumps({"kind": "rigid", "schedule": "F(0.5)-F(0.5)",
                                   "T": 2.0, "L": 2, "iters": 1, "metric": "l2"}))
        code = run_cli("train-reg", "--dataset", str(small_dataset), "--out", str(out),
                       "--config", str(cfg), "--seed", "0")
        assert code == 0
        assert (out / "model" / "model.json").exists()
        echoed = json.loads((out / "config.json").read_text())
        assert echoed["schedule"] == "F(0.5)-F(0.5)"
        assert (out / "reg_losses.png").exists()

    def test_missing_dataset_exits_3(self, tmp_path):
        code = run_cli("train-reg", "--dataset", str(tmp_path / "nope"),
                       "--out", str(tmp_path / "o"), "--iters", "1")
        assert code == 3

    def test_bad_config_key_exits_3(self, small_dataset, tmp_path):
        cfg = tmp_path / "cfg.json"
        cfg.write_text(json.dumps({"bogus_key": 1}))
        code = run_cli("train-reg", "--dataset", str(small_dataset),
                       "--out", str(tmp_path / "o"), "--config", str(cfg))
        assert code == 3


class TestRegisterAndEvaluate:
    @pytest.fixture()
    def trained_model(self, small_dataset, tmp_path):
        out = tmp_path / "run"
        cfg = tmp_path / "cfg.json"
        cfg.write_text(json.dumps({"kind": "rigid", "schedule": "F(0.5)-F(0.5)",
                                   "T": 2.0, "L": 2, "iters": 1, "metric": "l2"}))
        assert run_cli("train-reg", "--dataset", str(small_dataset), "--out", str(out),
                       "--config", str(cfg)) == 0
        return out / "model"

    def test_register_outputs_parse_back(self, small_dataset, trained_model, tmp_path):
        pair_dir = small_dataset / "pair_0000"
        out = tmp_path / "reg"
        code = run_cli("register", "--model", str(trained_model),
                       "--moving", str(pair_dir / "moving.mv01"),
                       "--fixed", str(pair_dir / "fixed.mv01"),
                       "--out", str(out))
        assert code == 0
        from msode.transforms import load_params
        params = load_params(out / "params.json")
        warped = read_mv01(out / "warped.mv01")
        trace = json.loads((out / "trace.json").read_text())
        assert warped.dims == (16, 16, 16)
        assert trace["nfe_per_scale"] == [2, 2]
        assert trace["wall_time_s"] > 0

    def test_register_schedule_override_changes_nfe(self, small_dataset, trained_model, tmp_path):
        pair_dir = small_dataset / "pair_0000"
        out = tmp_path / "reg2"
        code = run_cli("register", "--model", str(trained_model),
                       "--moving", str(pair_dir / "moving.mv01"),
                       "--fixed", str(pair_dir / "fixed.mv01"),
                       "--out", str(out), "--schedule", "F(0.25)-F(0.25)")
        assert code == 0
        trace = json.loads((out / "trace.json").read_text())
        assert trace["nfe_per_scale"] == [4, 4]

    def test_register_missing_volume_exits_3(self, trained_model, tmp_path):
        code = run_cli("register", "--model", str(trained_model),
                       "--moving", str(tmp_path / "no.mv01"),
                       "--fixed", str(tmp_path / "no.mv01"),
                       "--out", str(tmp_path / "o"))
        assert code == 3

    def test_evaluate_identity_unmoved(self, tmp_path):
        ds = tmp_path / "unmoved"
        assert run_cli("simulate", "--kind", "rigid", "--dims", "16", "--pairs", "2",
                       "--seed", "4", "--out", str(ds)) == 0
        out = tmp_path / "eval"
        code = run_cli("evaluate", "--dataset", str(ds), "--identity",
                       "--out", str(out), "--plot")
        assert code == 0
        csv_text = (out / "report.csv").read_text()
        assert "identity" in csv_text
        rows = json.loads((out / "report.json").read_text())
        assert rows[0]["aggregate"]["dice_mean"] == pytest.approx(1.0)
        assert (out / "metrics.png").exists()

    def test_evaluate_model_plus_identity_rows(self, small_dataset, trained_model, tmp_path):
        out = tmp_path / "eval2"
        code = run_cli("evaluate", "--dataset", str(small_dataset),
                       "--model", str(trained_model), "--identity", "--out", str(out))
        assert code == 0
        rows = json.loads((out / "report.json").read_text())
        assert len(rows) == 2                     # methods x motion types
        assert {r["method"] for r in rows} == {"msodenet-rigid6", "identity"}
        for r in rows:
            assert r["rows"][0]["nfe_per_scale"] in ([], [2, 2])

    def test_evaluate_needs_a_method(self, small_dataset, tmp_path):
        assert run_cli("evaluate", "--dataset", str(small_dataset),
                       "--out", str(tmp_path / "o")) == 2


class TestTrainI2I:
    def test_smoke_train_writes_checkpoint(self, tmp_path):
        ds = tmp_path / "xmodal"
        assert run_cli("simulate", "--kind", "rigid", "--rot-deg", "2", "--dims", "16",
                       "--pairs", "2", "--seed", "5", "--cross-modal",
                       "--out", str(ds)) == 0
        out = tmp_path / "i2i"
        cfg = tmp_path / "cfg.json"
        cfg.write_text(json.dumps({"iters": 1, "n_critic": 1, "batch": 2, "n_slices": 3}))
        code = run_cli("train-i2i", "--dataset", str(ds), "--out", str(out),
                       "--config", str(cfg), "--seed", "0")
        assert code == 0
        assert (out / "i2i.json").exists()
        assert (out / "config.json").exists()
        assert (out / "i2i_losses.png").exists()
        from msode.i2i import I2IModels
        models = I2IModels.load(out)
        assert models.n_slices == 3

    def test_missing_dataset_exits_3(self, tmp_path):
        assert run_cli("train-i2i", "--dataset", str(tmp_path / "none"),
                       "--out", str(tmp_path / "o"), "--iters", "1") == 3


class TestUsage:
    def test_no_command_exits_2(self):
        assert run_cli() == 2

    def test_unknown_flag_exits_2(self):
        assert run_cli("simulate", "--nope") == 2

    def test_thread_env_var(self, tmp_path, monkeypatch):
        monkeypatch.setenv("MSODE_NUM_THREADS", "1")
        out = tmp_path / "ds"
        assert run_cli("simulate", "--kind", "rigid", "--dims", "16", "--pairs", "0",
                       "--out", str(out)) == 0
        assert torch.get_num_threads() == 1
