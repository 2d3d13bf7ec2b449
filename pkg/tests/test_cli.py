import json

import numpy as np
import pytest

from synthguard.cli import (
    ConfigError,
    PipelineConfig,
    example_config_text,
    main,
    release_safety_scan,
    stage_seed,
)
from conftest import numeric_dataset
from synthguard.tabular import Kind, dump_schema, load_csv, write_csv

HEIGHT_MODEL = {"N": 1500, "mean": 170, "sd": 12, "values": [178], "n": 25}


def quick_config(**overrides):
    """The bundled config with Monte Carlo and permutation effort turned down."""
    cfg = json.loads(example_config_text())
    cfg["noise"].update(replicates=40, mc_samples=20000)
    cfg["assess"]["pmse"].update(permutations=2, pair_permutations=1, pair_variables=["AGE", "SEVERITY", "JOB"])
    cfg.update(overrides)
    return cfg


def write_config(tmp_path, cfg, name="config.json"):
    path = tmp_path / name
    path.write_text(json.dumps(cfg))
    return str(path)


@pytest.fixture(scope="module")
def quick_run(tmp_path_factory):
    root = tmp_path_factory.mktemp("quick")
    config = write_config(root, quick_config())
    code = main(["pipeline", "--config", config, "--out", str(root / "out"), "--threads", "1"])
    return code, root, config


class TestStageSeed:
    def test_distinct_and_stable(self):
        assert stage_seed(1, "synth") == stage_seed(1, "synth")
        assert stage_seed(1, "synth") != stage_seed(1, "filter")
        assert stage_seed(1, "synth") != stage_seed(2, "synth")


class TestPipeline:
    def test_exit_code_and_layout(self, quick_run):
        code, root, _ = quick_run
        out = root / "out"
        assert code == 0
        for rel in (
            "manifest.json",
            "release/synthetic.csv",
            "release/noise_manifest.json",
            "release/utility_report.json",
            "private/train.csv",
            "private/control.csv",
            "private/stages/synthetic_unfiltered.csv",
            "private/stages/synthetic_filtered.csv",
            "private/filter_report.json",
            "private/ecap_report.json",
            "private/privacy_report.json",
            "private/plots/ecap_curves.csv",
            "private/plots/gtcap_rows.csv",
            "private/plots/marginals.csv",
            "private/plots/pmse_pair_ratios.csv",
        ):
            assert (out / rel).is_file(), rel

    def test_manifest(self, quick_run):
        _, root, _ = quick_run
        manifest = json.loads((root / "out" / "manifest.json").read_text())
        assert manifest["seed"] == 2024
        assert set(manifest["timings"]) == {"split", "synth", "filter", "noise-calibrate", "noise-apply", "assess"}
        assert "release/synthetic.csv" in manifest["inventory"]
        assert set(manifest["noise"]["noise"]) == {"AGE", "N.CHILDREN", "N.SIBLINGS"}

    def test_split_sizes(self, quick_run, prison):
        _, root, _ = quick_run
        train = load_csv(root / "out" / "private" / "train.csv", prison.schema)
        control = load_csv(root / "out" / "private" / "control.csv", prison.schema)
        assert (train.n_rows, control.n_rows) == (600, 199)

    def test_release_is_clean(self, quick_run, prison):
        _, root, _ = quick_run
        assert release_safety_scan(root / "out" / "release", prison) == []

    def test_public_noise_manifest_minimal(self, quick_run):
        _, root, _ = quick_run
        noise = json.loads((root / "out" / "release" / "noise_manifest.json").read_text())
        for spec in noise["noise"].values():
            assert set(spec) == {"law", "mean", "sigma"}
        assert noise["exempt"] == ["DUR.INTERV"]

    def test_exempt_column_untouched(self, quick_run, prison):
        _, root, _ = quick_run
        out = root / "out"
        filtered = load_csv(out / "private" / "stages" / "synthetic_filtered.csv", prison.schema)
        release = load_csv(out / "release" / "synthetic.csv", prison.schema)
        np.testing.assert_array_equal(filtered["DUR.INTERV"], release["DUR.INTERV"])
        assert not np.array_equal(filtered["AGE"], release["AGE"])

    def test_deterministic_across_threads(self, quick_run, tmp_path, monkeypatch):
        _, root, config = quick_run
        monkeypatch.setenv("SYNTHGUARD_THREADS", "3")
        assert main(["pipeline", "--config", config, "--out", str(tmp_path / "out")]) == 0
        for name in ("synthetic.csv", "noise_manifest.json", "utility_report.json"):
            a = (root / "out" / "release" / name).read_bytes()
            b = (tmp_path / "out" / "release" / name).read_bytes()
            assert a == b, name

    def test_stage_by_stage_matches_pipeline(self, quick_run, tmp_path):
        _, root, config = quick_run
        for stage in ("split", "synth", "filter", "noise-calibrate", "noise-apply", "assess"):
            assert main([stage, "--config", config, "--out", str(tmp_path / "out")]) == 0
        a = (root / "out" / "release" / "synthetic.csv").read_bytes()
        assert (tmp_path / "out" / "release" / "synthetic.csv").read_bytes() == a


class TestStageIsolation:
    def test_without_filter_and_noise_release_is_synth(self, tmp_path):
        cfg = quick_config()
        del cfg["filter"], cfg["noise"]
        cfg["split"] = {"k": 700}
        config = write_config(tmp_path, cfg)
        out = tmp_path / "out"
        for stage in ("split", "synth", "noise-apply"):
            assert main([stage, "--config", config, "--out", str(out)]) == 0
        assert (out / "release" / "synthetic.csv").read_bytes() == (
            out / "private" / "stages" / "synthetic_unfiltered.csv"
        ).read_bytes()
        assert not (out / "private" / "stages" / "synthetic_filtered.csv").exists()

    def test_missing_upstream_stage_is_input_error(self, tmp_path):
        config = write_config(tmp_path, quick_config())
        assert main(["filter", "--config", config, "--out", str(tmp_path / "out")]) == 1

    def test_seed_override_changes_output(self, tmp_path):
        cfg = quick_config()
        del cfg["filter"], cfg["noise"]
        config = write_config(tmp_path, cfg)
        texts = []
        for seed, sub in ((1, "a"), (2, "b"), (1, "c")):
            out = tmp_path / sub
            assert main(["split", "--config", config, "--out", str(out), "--seed", str(seed)]) == 0
            assert main(["synth", "--config", config, "--out", str(out), "--seed", str(seed)]) == 0
            texts.append((out / "private" / "stages" / "synthetic_unfiltered.csv").read_bytes())
        assert texts[0] == texts[2] != texts[1]


class TestNoiseCalibrateOnly:
    def test_model_with_explicit_values(self, tmp_path):
        cfg = {"seed": 7, "paths": {"output": "out"}, "noise": {"target_ecap": 0.2, "models": {"HEIGHT": HEIGHT_MODEL}}}
        config = write_config(tmp_path, cfg)
        assert main(["noise-calibrate", "--config", config]) == 0
        out = tmp_path / "out"
        public = json.loads((out / "release" / "noise_manifest.json").read_text())
        assert set(public["noise"]["HEIGHT"]) == {"law", "mean", "sigma"}
        assert 0.05 <= public["noise"]["HEIGHT"]["sigma"] <= 0.12
        private = json.loads((out / "private" / "ecap_report.json").read_text())
        assert private["publishable"] is False
        assert private["variables"]["HEIGHT"]["n"] == 25
        assert release_safety_scan(out / "release", numeric_dataset([[0.0]])) == []

    def test_unreachable_target_exit_two(self, tmp_path):
        cfg = {"seed": 7, "paths": {"output": "out"}, "noise": {"target_ecap": 1e-4, "models": {"HEIGHT": HEIGHT_MODEL}}}
        assert main(["noise-calibrate", "--config", write_config(tmp_path, cfg)]) == 2


class TestExitCodes:
    def test_unknown_variable_no_outputs(self, tmp_path):
        cfg = quick_config()
        cfg["filter"]["exclude"] = ["NOPE"]
        out = tmp_path / "out"
        assert main(["pipeline", "--config", write_config(tmp_path, cfg), "--out", str(out)]) == 1
        assert not out.exists()

    @pytest.mark.parametrize(
        "mutate",
        [
            lambda c: c.pop("seed"),
            lambda c: c["synth"].update(bogus=1),
            lambda c: c["noise"]["models"].pop("AGE"),
            lambda c: c["noise"]["models"].update(JOB={"N": 10, "mean": 0, "sd": 1}),
            lambda c: c["assess"]["gtcap"].update(radii={}),
            lambda c: c["split"].update(k=0),
        ],
        ids=["no-seed", "unknown-key", "unmodelled-quantitative", "model-on-nominal", "no-radius", "bad-k"],
    )
    def test_invalid_config(self, tmp_path, mutate):
        cfg = quick_config()
        mutate(cfg)
        with pytest.raises(ConfigError):
            PipelineConfig.load(write_config(tmp_path, cfg))
        assert main(["split", "--config", str(tmp_path / "config.json"), "--out", str(tmp_path / "o")]) == 1

    def test_not_json(self, tmp_path):
        path = tmp_path / "c.json"
        path.write_text("{")
        assert main(["split", "--config", str(path)]) == 1
        assert main(["split", "--config", str(tmp_path / "missing.json")]) == 1

    def test_bad_thread_env(self, tmp_path, monkeypatch):
        monkeypatch.setenv("SYNTHGUARD_THREADS", "many")
        assert main(["split", "--config", write_config(tmp_path, quick_config())]) == 1

    def test_near_singular_exit_two(self, tmp_path):
        rng = np.random.default_rng(0)
        x = rng.normal(size=300)
        data = numeric_dataset(np.column_stack([x, 2 * x + 1]), ["a", "b"])
        write_csv(data, tmp_path / "data.csv")
        dump_schema(data.schema, tmp_path / "schema.json")
        cfg = {
            "seed": 1,
            "paths": {"input": "data.csv", "schema": "schema.json", "output": "out"},
            "synth": {},
            "filter": {},
            "noise": {"exempt": ["a", "b"]},
        }
        config = write_config(tmp_path, cfg)
        assert main(["synth", "--config", config]) == 0
        assert main(["filter", "--config", config]) == 2


class TestSafetyScan:
    def test_flags_copies_and_keys(self, tmp_path):
        data = numeric_dataset([[1.0, 2.0], [3.0, np.nan]])
        write_csv(data.take([1]), tmp_path / "synthetic.csv")
        (tmp_path / "report.json").write_text(json.dumps({"rows": [{"nearest_distance": 1}], "max_ecap": 0.1}))
        problems = release_safety_scan(tmp_path, data)
        assert any("row 1" in p for p in problems)
        assert sum("key" in p for p in problems) == 2


class TestExampleConfig:
    def test_prints_loadable_config(self, tmp_path, capsys):
        assert main(["example-config"]) == 0
        text = capsys.readouterr().out
        cfg = PipelineConfig.load(write_config(tmp_path, json.loads(text)))
        assert cfg.seed == 2024
        assert cfg.schema["JOB"].kind is Kind.NOMINAL
