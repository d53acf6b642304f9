import json
from pathlib import Path

import numpy as np
import pytest
from click.testing import CliRunner

from s2vc import dsp
from s2vc.cli import load_config_file, main, resolve_train_config
from s2vc.cli import ConfigError
from s2vc.dsp import MelConfig
from s2vc.features import Manifest, load_feature_file
from s2vc.model import S2VCModel, read_trace, save_checkpoint
from toycorpus import tiny_model_config


@pytest.fixture
def runner():
    return CliRunner()


@pytest.fixture(scope="module")
def corpus_root(corpus_manifest):
    return Path(corpus_manifest).parent


@pytest.fixture(scope="module")
def tiny_checkpoint(tmp_path_factory):
    path = tmp_path_factory.mktemp("ckpt") / "model.s2vc"
    save_checkpoint(S2VCModel(tiny_model_config(), seed=0), path,
                    mel_config=MelConfig())
    return path


def write_tiny_config(path):
    path.write_text(
        "# desk-scale settings\n"
        "[train]\n"
        "learning_rate = 0.001\n"
        "batch_size = 1\n"
        "checkpoint_every = 0\n"
        "[model]\n"
        "d_model = 32\n"
        "source_feature_kind = mel\n"
        "target_feature_kind = mel\n"
        "conformer_ff_dim = 64\n"
        "conformer_conv_kernel = 7\n")
    return path


class TestConfigFile:
    def test_sections_and_types(self, tmp_path):
        cfg = tmp_path / "c.cfg"
        cfg.write_text("[train]\nmax_steps = 5\nlearning_rate = 1e-3\n"
                       "[model]\nuse_sap = false\nsource_feature_kind = \"mel\"\n")
        values = load_config_file(cfg)
        assert values == {"train.max_steps": 5, "train.learning_rate": 1e-3,
                          "model.use_sap": False,
                          "model.source_feature_kind": "mel"}

    def test_bad_line_reports_position(self, tmp_path):
        cfg = tmp_path / "c.cfg"
        cfg.write_text("[train]\nmax_steps\n")
        with pytest.raises(ConfigError, match=":2"):
            load_config_file(cfg)

    def test_layering_flags_beat_file(self, tmp_path):
        cfg = tmp_path / "c.cfg"
        cfg.write_text("[train]\nmax_steps = 5\nseed = 9\n")
        out = resolve_train_config(cfg, {"train.max_steps": 77})
        assert out.max_steps == 77
        assert out.seed == 9

    def test_unknown_key_rejected(self, tmp_path):
        cfg = tmp_path / "c.cfg"
        cfg.write_text("[train]\nlearnig_rate = 1e-3\n")
        with pytest.raises(ConfigError, match="unknown config key"):
            resolve_train_config(cfg)


class TestFeats:
    def test_extracts_and_writes_manifest(self, runner, corpus_root, tmp_path):
        out = tmp_path / "feats"
        res = runner.invoke(main, ["feats", str(corpus_root / "wav"), str(out)])
        assert res.exit_code == 0, res.output
        man = Manifest.load(out / "manifest.jsonl")
        assert len(man) == 12
        assert sorted(man.speakers()) == ["spkA", "spkB"]
        seq = load_feature_file(man.entries[0].features["mel"])
        assert seq.kind.name == "mel"
        assert seq.dim == 80

    def test_idempotent(self, runner, corpus_root, tmp_path):
        out = tmp_path / "feats"
        runner.invoke(main, ["feats", str(corpus_root / "wav"), str(out)])
        first = (out / "manifest.jsonl").read_bytes()
        files = {p.name: p.read_bytes() for p in out.glob("*.s2vf")}
        runner.invoke(main, ["feats", str(corpus_root / "wav"), str(out)])
        assert (out / "manifest.jsonl").read_bytes() == first
        for p in out.glob("*.s2vf"):
            assert p.read_bytes() == files[p.name]

    def test_missing_dir_usage_error(self, runner, tmp_path):
        res = runner.invoke(main, ["feats", str(tmp_path / "nope"),
                                   str(tmp_path / "out")])
        assert res.exit_code == 2

    def test_non_mel_kind_usage_error(self, runner, corpus_root, tmp_path):
        res = runner.invoke(main, ["feats", str(corpus_root / "wav"),
                                   str(tmp_path / "out"), "--kind", "cpc"])
        assert res.exit_code == 2

    def test_corrupt_wav_collected(self, runner, tmp_path):
        wav_dir = tmp_path / "wav"
        wav_dir.mkdir()
        dsp.write_wav(wav_dir / "spkA_good.wav",
                      dsp.AudioBuffer(np.zeros(16000), 16000))
        (wav_dir / "spkB_bad.wav").write_bytes(b"not a wav")
        res = runner.invoke(main, ["feats", str(wav_dir), str(tmp_path / "out")])
        assert res.exit_code == 1
        assert "spkB_bad" in res.stderr
        assert len(Manifest.load(tmp_path / "out" / "manifest.jsonl")) == 1


class TestTrain:
    def test_show_config_resolves_layers(self, runner, tmp_path):
        cfg = write_tiny_config(tmp_path / "c.cfg")
        res = runner.invoke(main, ["train", "--config", str(cfg),
                                   "--max-steps", "3", "--show-config"])
        assert res.exit_code == 0, res.output
        resolved = json.loads(res.output)
        assert resolved["max_steps"] == 3
        assert resolved["model"]["d_model"] == 32
        assert resolved["learning_rate"] == 0.001

    def test_seed_env_fallback(self, runner, tmp_path):
        cfg = write_tiny_config(tmp_path / "c.cfg")
        res = runner.invoke(main, ["train", "--config", str(cfg), "--show-config"],
                            env={"S2VC_SEED": "42"})
        assert json.loads(res.output)["seed"] == 42

    def test_ablation_flag_maps_names(self, runner, tmp_path):
        cfg = write_tiny_config(tmp_path / "c.cfg")
        res = runner.invoke(main, ["train", "--config", str(cfg),
                                   "--ablation", "no-bottleneck", "--show-config"])
        assert json.loads(res.output)["model"]["use_bottleneck"] is False
        res = runner.invoke(main, ["train", "--config", str(cfg),
                                   "--ablation", "no_cross_attention",
                                   "--show-config"])
        assert json.loads(res.output)["model"]["use_cross_attention"] is False

    def test_unknown_ablation_usage_error(self, runner, tmp_path):
        cfg = write_tiny_config(tmp_path / "c.cfg")
        res = runner.invoke(main, ["train", "--config", str(cfg),
                                   "--ablation", "no-decoder"])
        assert res.exit_code == 2
        assert "unknown ablation" in res.stderr

    def test_missing_manifest_usage_error(self, runner, tmp_path):
        cfg = write_tiny_config(tmp_path / "c.cfg")
        res = runner.invoke(main, ["train", "--config", str(cfg),
                                   "--manifest", str(tmp_path / "nope.jsonl")])
        assert res.exit_code == 2

    def test_short_run_writes_checkpoint(self, runner, corpus_manifest, tmp_path):
        cfg = write_tiny_config(tmp_path / "c.cfg")
        out = tmp_path / "run"
        res = runner.invoke(main, ["train", "--config", str(cfg),
                                   "--manifest", str(corpus_manifest),
                                   "--out-dir", str(out), "--max-steps", "1"])
        assert res.exit_code == 0, res.output
        assert (out / "checkpoint_final.s2vc").exists()
        assert "step 1 loss" in res.output


class TestConvert:
    def test_writes_wav_and_trace(self, runner, corpus_manifest, tiny_checkpoint,
                                  tmp_path):
        man = Manifest.load(corpus_manifest)
        by_spk = man.speakers()
        src = by_spk["spkA"][0].features["mel"]
        tgts = [e.features["mel"] for e in by_spk["spkB"][:5]]
        out_wav = tmp_path / "out.wav"
        trace_path = tmp_path / "trace.s2vt"
        res = runner.invoke(main, ["convert", str(tiny_checkpoint), src, *tgts,
                                   "--out", str(out_wav), "--gl-iters", "3",
                                   "--dump-trace", str(trace_path)])
        assert res.exit_code == 0, res.output
        assert dsp.read_wav(out_wav).sample_rate == 16000
        trace = read_trace(trace_path)
        assert trace.q.shape[1] == 4
        assert trace.v.shape[1] == 64

    def test_few_targets_warns(self, runner, corpus_manifest, tiny_checkpoint,
                               tmp_path):
        man = Manifest.load(corpus_manifest)
        by_spk = man.speakers()
        res = runner.invoke(main, ["convert", str(tiny_checkpoint),
                                   by_spk["spkA"][0].features["mel"],
                                   by_spk["spkB"][0].features["mel"],
                                   "--out", str(tmp_path / "o.wav"),
                                   "--gl-iters", "2"])
        assert res.exit_code == 0
        assert "warning" in res.stderr

    def test_no_targets_usage_error(self, runner, corpus_manifest,
                                    tiny_checkpoint, tmp_path):
        man = Manifest.load(corpus_manifest)
        res = runner.invoke(main, ["convert", str(tiny_checkpoint),
                                   man.entries[0].features["mel"],
                                   "--out", str(tmp_path / "o.wav")])
        assert res.exit_code == 2

    def test_kind_mismatch_runtime_error(self, runner, corpus_manifest, tmp_path):
        ckpt = tmp_path / "cpc_model.s2vc"
        save_checkpoint(S2VCModel(tiny_model_config(source_feature_kind="cpc",
                                                    source_dim=256), seed=0),
                        ckpt, mel_config=MelConfig())
        man = Manifest.load(corpus_manifest)
        by_spk = man.speakers()
        res = runner.invoke(main, ["convert", str(ckpt),
                                   by_spk["spkA"][0].features["mel"],
                                   *[e.features["mel"] for e in by_spk["spkB"][:5]],
                                   "--out", str(tmp_path / "o.wav")])
        assert res.exit_code == 1
        assert "kind mismatch" in res.stderr


class TestEval:
    def test_report_schema(self, runner, corpus_manifest, tiny_checkpoint,
                           tmp_path):
        out = tmp_path / "eval"
        res = runner.invoke(main, ["eval", str(tiny_checkpoint),
                                   str(corpus_manifest), "--n-pairs", "4",
                                   "--seed", "0", "--out-dir", str(out)])
        assert res.exit_code == 0, res.output
        report = json.loads((out / "report.json").read_text())
        row = report["results"][0]
        for key in ("scenario", "n_pairs", "seed", "sv_accuracy", "eer",
                    "threshold", "recon_l1"):
            assert key in row
        assert row["n_pairs"] == 4
        assert 0.0 <= row["sv_accuracy"] <= 1.0
        assert report["model_config"]["d_model"] == 64
        assert (out / "report.txt").exists()

    def test_missing_manifest_usage_error(self, runner, tiny_checkpoint, tmp_path):
        res = runner.invoke(main, ["eval", str(tiny_checkpoint),
                                   str(tmp_path / "nope.jsonl")])
        assert res.exit_code == 2


class TestProbeCommand:
    def test_probe_json(self, runner, corpus_manifest, tiny_checkpoint, tmp_path):
        out_json = tmp_path / "probe.json"
        res = runner.invoke(main, ["probe", str(tiny_checkpoint),
                                   str(corpus_manifest), "--site", "Q",
                                   "--seed", "0", "--out", str(out_json)])
        assert res.exit_code == 0, res.output
        data = json.loads(out_json.read_text())
        assert data["site"] == "Q"
        assert 0.0 <= data["dev_accuracy"] <= 1.0


class TestAblate:
    def test_grid_and_skip(self, runner, corpus_manifest, tmp_path):
        cfg = write_tiny_config(tmp_path / "c.cfg")
        out = tmp_path / "abl"
        args = ["ablate", "--config", str(cfg), "--manifest",
                str(corpus_manifest), "--out-dir", str(out),
                "--max-steps", "1", "--n-pairs", "2", "--seed", "0"]
        res = runner.invoke(main, args)
        assert res.exit_code == 0, res.output
        report = json.loads((out / "ablation_report.json").read_text())
        rows = report["results"]
        assert [r["row"] for r in rows] == [f"({c})" for c in "abcdefg"]
        assert all("sv_accuracy" in r for r in rows)

        res = runner.invoke(main, args)
        assert res.exit_code == 0, res.output
        assert res.output.count("skipping") == 7
