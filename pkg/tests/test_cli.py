import json

import pytest

from ctnarrate.cli import main
from ctnarrate.config import PipelineConfig
from ctnarrate.errors import ConfigError, MissingUpstreamArtifact
from ctnarrate.pipeline import run_stage

from e2e_fixture import write_fixture


@pytest.fixture(scope="module")
def fixture_config(tmp_path_factory):
    root = tmp_path_factory.mktemp("e2e")
    return write_fixture(root)


class TestConfig:
    def test_defaults_standalone(self):
        cfg = PipelineConfig()
        assert cfg.storyboard.fps == 10.0
        assert cfg.storyboard.resolution == [1280, 720]
        assert cfg.storyboard.max_duration == 180.0
        assert cfg.narration.wpm == 150.0
        cfg.window_table()  # defaults resolve

    def test_round_trip_identity(self):
        cfg = PipelineConfig()
        cfg.paths.output = "somewhere/video"
        cfg.providers.llm = "http"
        cfg.providers.llm_base_url = "http://llm.example"
        text = cfg.to_toml()
        import tomli

        reparsed = PipelineConfig.from_dict(tomli.loads(text))
        assert reparsed.to_dict() == cfg.to_dict()

    def test_unknown_section_rejected(self):
        with pytest.raises(ConfigError):
            PipelineConfig.from_dict({"paethz": {}})

    def test_unknown_key_rejected(self):
        with pytest.raises(ConfigError):
            PipelineConfig.from_dict({"storyboard": {"fsp": 10}})

    def test_override_types(self):
        cfg = PipelineConfig()
        cfg.override("storyboard.fps", "24")
        assert cfg.storyboard.fps == 24.0
        cfg.override("media.captions", "false")
        assert cfg.media.captions is False
        cfg.override("storyboard.resolution", "640,360")
        assert cfg.storyboard.resolution == [640, 360]

    def test_missing_input_named_in_error(self, tmp_path):
        cfg = PipelineConfig()
        cfg.paths.query_volume = str(tmp_path / "q.nii")
        with pytest.raises(ConfigError) as err:
            cfg.validate_for_run()
        assert "query_volume" in str(err.value)

    def test_invalid_window_reference_rejected(self):
        cfg = PipelineConfig()
        cfg.windows.families = [["lung", "nonexistent_preset"]]
        with pytest.raises(ConfigError):
            cfg.window_table()


class TestStoryboardCommand:
    def test_dry_run_deterministic_and_ordered(self, fixture_config, capsys):
        assert main(["--config", str(fixture_config), "storyboard"]) == 0
        first = capsys.readouterr().out
        assert main(["--config", str(fixture_config), "storyboard"]) == 0
        second = capsys.readouterr().out
        assert first == second
        doc = json.loads(first)
        assert len(doc["segments"]) == 6
        order = [(s["finding_id"], s["phase"]) for s in doc["segments"]]
        assert order == [("f1", 1), ("f1", 2), ("f1", 3),
                         ("f2", 1), ("f2", 2), ("f2", 3)]

    def test_config_error_exit_code(self, tmp_path, capsys):
        missing = tmp_path / "nope.toml"
        assert main(["--config", str(missing), "storyboard"]) == 2
        record = json.loads(capsys.readouterr().err.strip().splitlines()[-1])
        assert record["error"] == "ConfigError"

    def test_invalid_window_table_is_config_error(self, fixture_config, capsys):
        code = main([
            "--config", str(fixture_config),
            "--set", "windows.default=missing_preset",
            "storyboard",
        ])
        assert code == 2

    def test_provider_error_exit_code(self, fixture_config, tmp_path, capsys):
        empty_mock = tmp_path / "empty.json"
        empty_mock.write_text("{}")
        code = main([
            "--config", str(fixture_config),
            "--set", f"providers.llm_mock_fixture={empty_mock}",
            "--set", f"paths.cache_dir={tmp_path / 'fresh_cache'}",
            "storyboard",
        ])
        assert code == 3


class TestStageCommand:
    def test_mesh_without_masks_is_missing_upstream(self, tmp_path, capsys):
        config = write_fixture(tmp_path / "fx")
        code = main(["--config", str(config), "stage", "mesh"])
        assert code == 4
        record = json.loads(capsys.readouterr().err.strip().splitlines()[-1])
        assert record["error"] == "MissingUpstreamArtifact"

    def test_findings_then_segment_then_mesh(self, tmp_path, capsys):
        config = write_fixture(tmp_path / "fx")
        assert main(["--config", str(config), "stage", "findings"]) == 0
        findings_path = capsys.readouterr().out.split(": ", 1)[1].strip()
        doc = json.loads(open(findings_path).read())
        organs = sorted(o for f in doc for o in f["organs"])
        assert organs == ["left lung", "right lung lower lobe"]
        assert main(["--config", str(config), "stage", "segment"]) == 0
        capsys.readouterr()
        assert main(["--config", str(config), "stage", "mesh"]) == 0
        mesh_dir = capsys.readouterr().out.split(": ", 1)[1].strip()
        stls = list(__import__("pathlib").Path(mesh_dir).glob("*.stl"))
        assert len(stls) == 2

    def test_register_stage_writes_six_parameter_record(self, tmp_path, capsys):
        from ctnarrate.config import PipelineConfig

        config = write_fixture(tmp_path / "fx")
        cfg = PipelineConfig.from_toml(config)
        cfg.override("registration.max_sweeps_per_level", "30")
        path = run_stage(cfg, "register")
        record = json.loads(path.read_text())
        assert len(record["rotation_rad"]) == 3
        assert len(record["translation_mm"]) == 3

    def test_segment_requires_findings(self, tmp_path):
        config = write_fixture(tmp_path / "fx")
        cfg = PipelineConfig.from_toml(config)
        with pytest.raises(MissingUpstreamArtifact):
            run_stage(cfg, "segment")
