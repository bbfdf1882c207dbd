import json

import numpy as np
import pytest
from numpy.testing import assert_allclose

import fbpose
from src.modules.experiment import (
    DEFAULT_CONFIG, dump_images, load_config, read_pgm, run_experiment, validate_config, write_pgm,
)
from src.modules.feedback import LoopState
from src.modules.metrics import MetricReport
from src.modules.utils import SEED_ENV, ConfigError, MissingArtifactError


def small_config(tmp_path, **overrides):
    config = {
        "name": "tiny",
        "seed": 3,
        "stages": ["gen-data", "fit-prior"],
        "data": {"train": 6, "test": 2, "scene": {"width": 160, "height": 120, "noise_sigma": 0.0}},
        "prior": {"k": 3},
    }
    config.update(overrides)
    path = tmp_path / "config.json"
    path.write_text(json.dumps(config))
    return str(path)


@pytest.fixture(autouse=True)
def no_seed_override(monkeypatch):
    monkeypatch.delenv(SEED_ENV, raising=False)


class TestConfig:
    def test_defaults_are_merged(self):
        config = validate_config({"seed": 4, "loop": {"iterations": 1}})
        assert config["seed"] == 4
        assert config["loop"]["iterations"] == 1
        assert config["loop"]["parallel"] is DEFAULT_CONFIG["loop"]["parallel"]
        assert config["stages"] == DEFAULT_CONFIG["stages"]

    @pytest.mark.parametrize("config", [
        {"seeds": 1},
        {"seed": -1},
        {"seed": True},
        {"mode": "object"},
        {"stages": ["gen-data", "render"]},
        {"data": {"train": 0}},
        {"loop": {"iterations": "two"}},
        {"baseline": {"method": "newton"}},
        {"audit": {"radii": []}},
        {"train": {"lam": 1.5}},
        {"data": {"scene": {"colour": "red"}}},
        {"data": {"scene": {"object": "teapot"}}},
        {"mode": "joint", "data": {"scene": {"object": None}}},
    ])
    def test_invalid_configs(self, config):
        with pytest.raises(ConfigError):
            validate_config(config)

    def test_joint_mode_with_object(self):
        config = validate_config({"mode": "joint", "data": {"scene": {"object": "bottle"}}})
        assert config["data"]["scene"]["object"] == "bottle"

    def test_missing_config_file(self, tmp_path):
        with pytest.raises(MissingArtifactError):
            load_config(str(tmp_path / "absent.json"))


class TestPipeline:
    def test_missing_stage_input(self, tmp_path):
        path = small_config(tmp_path, stages=["fit-prior"])
        with pytest.raises(MissingArtifactError) as info:
            run_experiment(path, str(tmp_path / "run"))
        assert info.value.stage == "fit-prior"

    def test_data_and_prior_are_reproducible(self, tmp_path):
        path = small_config(tmp_path)
        first = run_experiment(path, str(tmp_path / "a"))
        second = run_experiment(path, str(tmp_path / "b"))
        for name in ("prior.json", "data/train/manifest.json", "data/test/manifest.json"):
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
        assert first.endswith("a") and second.endswith("b")

    def test_seed_override_from_environment(self, tmp_path, monkeypatch):
        monkeypatch.setenv(SEED_ENV, "11")
        out = run_experiment(small_config(tmp_path, stages=["gen-data"]), str(tmp_path / "run"))
        assert json.loads((tmp_path / "run" / "config.json").read_text())["seed"] == 11
        assert out == str(tmp_path / "run")


class TestImageDumps:
    def test_pgm_roundtrip_keeps_16_bits(self, tmp_path):
        image = np.array([[0, 255, 256], [1000, 40000, 65535]], dtype=np.uint16)
        write_pgm(tmp_path / "x.pgm", image)
        assert np.array_equal(read_pgm(tmp_path / "x.pgm"), image)

    def test_dump_triplets(self, tmp_path):
        pose = np.zeros((14, 3))
        state = LoopState(observed=np.zeros((4, 4)), crop_z=500.0, half_range=150.0)
        state.record(pose, synthesized=np.full((4, 4), 0.2))
        state.record(pose + 1.0, synthesized=np.full((4, 4), -0.1))
        written = dump_images(state, str(tmp_path / "dump"))
        assert len(written) == 8
        assert_allclose(read_pgm(tmp_path / "dump" / "observed_00.pgm"), 500)
        assert_allclose(read_pgm(tmp_path / "dump" / "synthesized_00.pgm"), 530)
        assert_allclose(read_pgm(tmp_path / "dump" / "difference_01.pgm"), 15)
        sidecar = json.loads((tmp_path / "dump" / "pose_01.json").read_text())
        assert sidecar["iteration"] == 1
        assert_allclose(sidecar["hand_pose"], pose + 1.0)


class TestCommandLine:
    def test_gen_data(self, tmp_path):
        out = tmp_path / "data"
        assert fbpose.main(["gen-data", "--n", "2", "--noise", "0", "--out", str(out), "--quiet"]) == 0
        assert json.loads((out / "manifest.json").read_text())["count"] == 2

    def test_missing_input_fails(self, tmp_path):
        assert fbpose.main(["fit-prior", "--data_path", str(tmp_path / "none"), "--quiet"]) == 1
        assert fbpose.main(["experiment", str(tmp_path / "none.json"), "--quiet"]) == 1

    def test_eval_prints_summaries(self, tmp_path, capsys):
        path = tmp_path / "loop.json"
        path.write_text(json.dumps({"hand": [MetricReport("hand-joint-error@0", [4.0, 6.0]).to_dict()]}))
        assert fbpose.main(["eval", str(path)]) == 0
        assert "mean 5.00 mm" in capsys.readouterr().out

    def test_eval_rejects_tampered_report(self, tmp_path):
        entry = MetricReport("hand-joint-error@0", [4.0, 6.0]).to_dict()
        entry["median"] = 1.0
        path = tmp_path / "loop.json"
        path.write_text(json.dumps({"hand": [entry]}))
        assert fbpose.main(["eval", str(path)]) == 1
