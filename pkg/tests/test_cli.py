import csv
import json

import numpy as np
import pytest

from icer.cli import icer_config_from_dict, main
from icer.errors import InvalidConfig


def write_json(path, obj):
    path.write_text(json.dumps(obj))
    return str(path)


@pytest.fixture
def scenario_file(tmp_path):
    out = tmp_path / "scn.json"
    cfg = write_json(tmp_path / "gen.json", {"scenario": {"r": 3, "m": 16, "n_candidates": 5, "n_held_out": 2}})
    assert main(["generate", "--config", cfg, "--seed", "1", "--out", str(out)]) == 0
    return out


class TestExitCodes:
    def test_no_command(self, capsys):
        assert main([]) == 2

    def test_unknown_command(self, capsys):
        assert main(["frobnicate"]) == 2
        assert "usage" in capsys.readouterr().err

    def test_bad_flag_value(self):
        assert main(["verify", "--suite", "nope"]) == 2

    def test_missing_file(self, tmp_path):
        assert main(["invert", "--scenario", str(tmp_path / "absent.json")]) == 2

    def test_invalid_config(self, tmp_path, scenario_file):
        cfg = write_json(tmp_path / "c.json", {"icer": {"no_such_knob": 1}})
        assert main(["invert", "--scenario", str(scenario_file), "--config", cfg]) == 2

    def test_help(self, capsys):
        assert main(["--help"]) == 0


class TestConfig:
    def test_defaults(self):
        cfg, abl = icer_config_from_dict({})
        assert abl is None and cfg.lambda_cond is None

    def test_ablation_a1(self):
        cfg, _ = icer_config_from_dict({"ablation": "A1", "icer": {"lambda_cond": 3.0}})
        assert cfg.lambda_cond == 0.0 and cfg.lock_weights

    def test_ablation_a3(self):
        cfg, _ = icer_config_from_dict({"ablation": "A3", "loss": {"lambda_id": 2.0}})
        assert cfg.loss.lambda_id == 0.0

    @pytest.mark.parametrize("bad", [{"ablation": "A9"}, {"extra": {}}, {"loss": {"nope": 1}}])
    def test_rejects(self, bad):
        with pytest.raises(InvalidConfig):
            icer_config_from_dict(bad)


class TestVerify:
    def test_trace_det(self, tmp_path, capsys):
        out = tmp_path / "v.json"
        assert main(["verify", "--suite", "trace-det", "--n", "1000", "--out", str(out)]) == 0
        assert capsys.readouterr().out.startswith("PASS trace-det")
        doc = json.loads(out.read_text())
        assert doc["schema"] == "icer.verify/1"
        assert doc["suites"][0]["passes"] == 1000 and doc["passed"]

    def test_logdet_grad_small(self, tmp_path):
        assert main(["verify", "--suite", "logdet-grad", "--n", "20", "--out", str(tmp_path / "v.json")]) == 0


class TestPipeline:
    def test_invert_evaluate(self, tmp_path, scenario_file):
        res = tmp_path / "run" / "res.json"
        assert main(["invert", "--scenario", str(scenario_file), "--out", str(res)]) == 0
        doc = json.loads(res.read_text())
        assert doc["schema"] == "icer.result/1"
        assert sum(doc["weights_final"]) == pytest.approx(doc["config"]["icer"]["budget"], abs=1e-9)
        met = tmp_path / "m.json"
        assert main(["evaluate", "--scenario", str(scenario_file), "--result", str(res), "--out", str(met)]) == 0
        assert json.loads(met.read_text())["code_error"] == doc["metrics"]["code_error"]

        with open(tmp_path / "run" / "res_rounds.csv") as fh:
            rows = list(csv.reader(fh))
        assert rows[0][:3] == ["round", "icer_objective", "logdet"]
        assert rows[0][3:] == [f"w_{i}" for i in doc["frame_ids"]]
        with open(tmp_path / "run" / "res_fit.csv") as fh:
            assert next(csv.reader(fh)) == ["round", "iteration", "objective", "grad_norm", "eta"]

    def test_full_run_deterministic(self, tmp_path):
        outs = []
        for k in range(2):
            d = tmp_path / str(k)
            assert main(["generate", "--seed", "3", "--out", str(d / "s.json")]) == 0
            assert main(["invert", "--scenario", str(d / "s.json"), "--out", str(d / "r.json")]) == 0
            outs.append([(d / n).read_bytes() for n in ("s.json", "r.json", "r_rounds.csv", "r_fit.csv")])
        assert outs[0] == outs[1]

    def test_out_dir_env(self, tmp_path, monkeypatch, scenario_file):
        monkeypatch.setenv("ICER_OUT_DIR", str(tmp_path / "env"))
        assert main(["design", "--scenario", str(scenario_file)]) == 0
        doc = json.loads((tmp_path / "env" / "design.json").read_text())
        assert len(doc["config"]["frozen_losses"]) == 5

    def test_design_from_result(self, tmp_path, scenario_file):
        res = tmp_path / "r.json"
        assert main(["invert", "--scenario", str(scenario_file), "--out", str(res)]) == 0
        d = tmp_path / "d.json"
        assert main(["design", "--scenario", str(scenario_file), "--result", str(res), "--out", str(d)]) == 0
        doc = json.loads(d.read_text())
        assert len(doc["config"]["frozen_losses"]) == 5
        np.testing.assert_array_equal(doc["v_final"], json.loads(res.read_text())["v_final"])

    def test_ablation_a1_keeps_uniform(self, tmp_path, scenario_file):
        res = tmp_path / "r.json"
        assert main(["invert", "--scenario", str(scenario_file), "--ablation", "A1", "--out", str(res)]) == 0
        w = np.array(json.loads(res.read_text())["weights_final"])
        np.testing.assert_allclose(w, w[0], rtol=1e-12)

    def test_ablation_a3(self, tmp_path, scenario_file):
        res = tmp_path / "r.json"
        assert main(["invert", "--scenario", str(scenario_file), "--ablation", "A3", "--out", str(res)]) == 0
        assert json.loads(res.read_text())["config"]["icer"]["loss"]["lambda_id"] == 0.0

    def test_a2_needs_decoder_model(self, tmp_path, scenario_file):
        assert main(["invert", "--scenario", str(scenario_file), "--ablation", "A2",
                     "--out", str(tmp_path / "r.json")]) == 2


class TestPretrain:
    def test_writes_decoder(self, tmp_path):
        out = tmp_path / "dec.json"
        cfg = write_json(tmp_path / "p.json", {"n_pairs": 20, "feature_dim": 12, "r": 2})
        assert main(["pretrain", "--config", cfg, "--seed", "2", "--out", str(out)]) == 0
        doc = json.loads(out.read_text())
        assert doc["schema"] == "icer.decoder/1"
        assert np.asarray(doc["decoder"]["basis"]).shape == (12, 2)
        assert doc["reconstruction_error"] < 1e-8

    def test_unknown_key(self, tmp_path):
        cfg = write_json(tmp_path / "p.json", {"rank": 2})
        assert main(["pretrain", "--config", cfg, "--out", str(tmp_path / "d.json")]) == 2

    def test_decoder_scenario_and_a2(self, tmp_path):
        dec = tmp_path / "dec.json"
        assert main(["pretrain", "--out", str(dec)]) == 0
        gen = write_json(tmp_path / "g.json", {"kind": "decoder_composed", "m": 40, "decoder_file": str(dec),
                                               "n_candidates": 5, "n_held_out": 3, "held_out": [6, 7, 8]})
        scn = tmp_path / "s.json"
        assert main(["generate", "--config", gen, "--out", str(scn)]) == 0
        res = tmp_path / "r.json"
        assert main(["invert", "--scenario", str(scn), "--ablation", "A2", "--out", str(res)]) == 0
        doc = json.loads(res.read_text())
        assert doc["model"]["kind"] == "decoder_composed"
        assert doc["metrics"]["code_error"] is None
