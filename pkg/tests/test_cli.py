"""End-to-end CLI tests on a miniature synthetic market."""

import json
import os

import pytest

from prism_vq import cli
from prism_vq.config import ConfigKeyError, parse_config_file, resolve_config
from prism_vq.manifest import file_digest

TINY = ["--set", "gen.n_stocks=20", "--set", "gen.n_dates=90",
        "--set", "gen.n_clusters=2", "--set", "gen.n_factors=2",
        "--set", "gen.n_features=8", "--set", "gen.n_signal_features=2",
        "--set", "gen.n_cluster_features=4", "--set", "data.lookback=8",
        "--set", "data.prior_window=5", "--set", "data.n_horizons=5",
        "--set", "spatial.latent_dim=6", "--set", "spatial.codebook_size=4",
        "--set", "spatial.decoder_channels=4",
        "--set", "spatial.decoder_base_len=2",
        "--set", "temporal.temporal_dim=8", "--set", "temporal.ffn_dim=16",
        "--set", "temporal.expert_dim=6", "--set", "temporal.trend_window=3",
        "--set", "train.learning_rate=1e-3", "--set", "train.max_epochs=1",
        "--set", "train.patience=1", "--set", "backtest.top_k=3",
        "--set", "backtest.n_drop=1"]


def run(args):
    return cli.main(args)


@pytest.fixture(scope="module")
def pipeline_dir(tmp_path_factory):
    out = str(tmp_path_factory.mktemp("pipeline"))
    assert run(["gen-data", "--seed", "0", "--out", out] + TINY) == 0
    assert run(["train", "--stage", "1", "--seed", "0", "--out", out] + TINY) == 0
    assert run(["train", "--stage", "2", "--seed", "0", "--out", out] + TINY) == 0
    assert run(["predict", "--seed", "0", "--out", out] + TINY) == 0
    assert run(["ensemble", "--seed", "0", "--out", out] + TINY) == 0
    assert run(["evaluate", "--seed", "0", "--out", out] + TINY) == 0
    assert run(["backtest", "--seed", "0", "--out", out] + TINY) == 0
    assert run(["sweep", "--mode", "costs", "--seed", "0", "--out", out] + TINY) == 0
    scores = os.path.join(out, "predictions_seed0.csv")
    for what in ("codes", "exposures", "experts"):
        assert run(["analyze", "--what", what, "--scores", scores,
                    "--seed", "0", "--out", out,
                    "--set", "analysis.min_obs=5",
                    "--set", "analysis.transition_horizons=1,5"] + TINY) == 0
    return out


class TestPipeline:
    def test_every_declared_artifact_exists(self, pipeline_dir):
        for name in ("features.csv", "prices.csv", "priors.csv", "truth.csv",
                     "truth_ic.csv", "stage1_seed0.npz", "stage2_seed0.npz",
                     "train_log_stage1_seed0.csv", "train_log_stage2_seed0.csv",
                     "predictions_seed0.csv", "predictions_ensemble.csv",
                     "metrics.csv", "ic_daily.csv", "daily.csv", "summary.csv",
                     "sweep.csv", "transitions_1.csv", "transitions_5.csv",
                     "persistence.csv", "exposures.csv",
                     "expert_activation.csv", "spikes.csv", "wilcoxon.csv"):
            assert os.path.exists(os.path.join(pipeline_dir, name)), name

    def test_manifests_record_artifacts_that_exist(self, pipeline_dir):
        manifests = [f for f in os.listdir(pipeline_dir)
                     if f.startswith("manifest_")]
        assert len(manifests) >= 8
        for mf in manifests:
            record = json.load(open(os.path.join(pipeline_dir, mf)))
            for artifact, digest in record["output_digests"].items():
                assert os.path.exists(artifact)
                assert len(digest) == 64

    def test_commands_do_not_mutate_inputs(self, pipeline_dir):
        features = os.path.join(pipeline_dir, "features.csv")
        before = file_digest(features)
        assert run(["evaluate", "--seed", "0", "--out", pipeline_dir] + TINY) == 0
        assert file_digest(features) == before

    def test_sweep_emits_exactly_six_cost_regimes(self, pipeline_dir):
        with open(os.path.join(pipeline_dir, "sweep.csv")) as fh:
            lines = fh.read().strip().splitlines()
        assert len(lines) == 7  # header + six regimes
        regimes = [line.split(",")[0] for line in lines[1:]]
        assert regimes == ["NoCost", "Low", "Default", "High", "VeryHigh",
                           "Extreme"]

    def test_gen_data_deterministic_across_runs(self, tmp_path):
        a, b = str(tmp_path / "a"), str(tmp_path / "b")
        for out in (a, b):
            assert run(["gen-data", "--seed", "3", "--out", out] + TINY) == 0
        for name in ("features.csv", "prices.csv", "priors.csv", "truth.csv"):
            assert (file_digest(os.path.join(a, name))
                    == file_digest(os.path.join(b, name))), name


class TestErrors:
    def test_stage2_without_stage1_is_usage_error(self, tmp_path, capsys):
        out = str(tmp_path / "fresh")
        assert run(["gen-data", "--seed", "0", "--out", out] + TINY) == 0
        code = run(["train", "--stage", "2", "--seed", "0", "--out", out] + TINY)
        assert code == 2
        err = capsys.readouterr().err
        assert err.startswith("error:usage:")
        assert "train --stage 1" in err  # remediation text

    def test_unknown_config_key_rejected(self, tmp_path, capsys):
        code = run(["gen-data", "--out", str(tmp_path), "--set",
                    "gen.bogus_knob=1"])
        assert code == 2
        assert "error:usage" in capsys.readouterr().err

    def test_missing_input_file_reported(self, tmp_path, capsys):
        code = run(["evaluate", "--out", str(tmp_path / "empty")] + TINY)
        assert code == 2
        assert "not found" in capsys.readouterr().err

    def test_empty_score_file_is_data_error(self, tmp_path, capsys, pipeline_dir):
        import shutil
        out = str(tmp_path / "empties")
        os.makedirs(out)
        for name in ("features.csv", "prices.csv", "priors.csv"):
            shutil.copy(os.path.join(pipeline_dir, name), out)
        empty = os.path.join(out, "scores.csv")
        with open(empty, "w") as fh:
            fh.write("date,ticker,score\n")
        code = run(["backtest", "--scores", empty, "--out", out] + TINY)
        assert code == 3
        assert "error:data" in capsys.readouterr().err


class TestConfig:
    def test_file_and_flag_layering(self, tmp_path):
        cfg_file = tmp_path / "run.cfg"
        cfg_file.write_text("# comment\nbacktest.top_k = 10\n"
                            "train.max_epochs = 7  # inline comment\n")
        values = parse_config_file(str(cfg_file))
        cfg = resolve_config(values, {"backtest.top_k": "12"})
        assert cfg["backtest.top_k"] == 12       # flag wins over file
        assert cfg["train.max_epochs"] == 7      # file wins over default
        assert cfg["backtest.n_drop"] == 5       # default preserved

    def test_market_presets(self):
        sp = resolve_config(market="sp-style")
        assert sp["temporal.heads"] == 4
        assert sp["temporal.n_experts"] == 8
        assert sp["temporal.top_k"] == 4
        assert sp["temporal.balance_weight"] == pytest.approx(1e-3)
        csi = resolve_config(market="csi-style")
        assert csi["temporal.n_experts"] == 2
        assert csi["temporal.top_k"] == 1

    def test_type_coercion_errors(self):
        with pytest.raises(ConfigKeyError):
            resolve_config({"train.max_epochs": "many"})
        with pytest.raises(ConfigKeyError):
            resolve_config({"no.such.key": "1"})
