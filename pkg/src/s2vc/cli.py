"""Command-line entry point.

Subcommands: feats, train, convert, eval, probe, ablate.  Configuration is
layered: built-in defaults < config file < command-line flags.  The resolved
snapshot is embedded in every checkpoint and report the run produces.

Exit codes: 0 success, 1 runtime/evaluation failure, 2 usage or config error.
"""

from __future__ import annotations

import json
import os
import sys
from dataclasses import replace
from pathlib import Path

import click
import numpy as np

from . import dsp, evaluate, features, model as model_mod, training
from .dsp import MelConfig
from .features import Manifest, ManifestEntry
from .model import ModelConfig
from .training import TrainConfig

EXIT_RUNTIME = 1
EXIT_USAGE = 2


class ConfigError(Exception):
    pass


def _parse_value(text):
    text = text.strip()
    lowered = text.lower()
    if lowered in ("true", "false"):
        return lowered == "true"
    try:
        return int(text)
    except ValueError:
        pass
    try:
        return float(text)
    except ValueError:
        pass
    return text.strip("\"'")


def load_config_file(path):
    """Parse a flat TOML-like ``section.key = value`` file."""
    values = {}
    section = ""
    with open(path, "r", encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if line.startswith("[") and line.endswith("]"):
                section = line[1:-1].strip()
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{line_no}: expected 'key = value'")
            key, val = line.split("=", 1)
            full = f"{section}.{key.strip()}" if section else key.strip()
            values[full] = _parse_value(val)
    return values


def resolve_train_config(config_file=None, overrides=None):
    """defaults < config file < flag overrides."""
    values = {}
    if config_file:
        values.update(load_config_file(config_file))
    if overrides:
        values.update({k: v for k, v in overrides.items() if v is not None})

    def section(prefix):
        return {k[len(prefix) + 1:]: v for k, v in values.items()
                if k.startswith(prefix + ".")}

    try:
        model_cfg = replace(ModelConfig(), **section("model"))
        mel_cfg = replace(MelConfig(), **section("mel"))
        cfg = replace(TrainConfig(model=model_cfg, mel=mel_cfg), **section("train"))
    except TypeError as e:
        raise ConfigError(f"unknown config key: {e}") from e
    return cfg


def _global_seed(seed):
    if seed is not None:
        return int(seed)
    env = os.environ.get("S2VC_SEED")
    return int(env) if env else 0


ABLATION_NAMES = {name: overrides for _, name, overrides in training.ABLATION_ROWS}
ABLATION_NAMES.update({
    "no-sap": {"use_sap": False},
    "no-bottleneck": {"use_bottleneck": False},
    "no-instance-norm": {"use_instance_norm": False},
    "no-cross-attention": {"use_cross_attention": False},
})


@click.group()
def main():
    """Any-to-any voice conversion: features, training, conversion, evaluation."""


def _fail(message, code):
    click.echo(f"error: {message}", err=True)
    sys.exit(code)


@main.command("feats")
@click.argument("wav_dir", type=click.Path())
@click.argument("out_dir", type=click.Path())
@click.option("--kind", default="mel", show_default=True)
@click.option("--manifest", default=None, help="Manifest path to write/update.")
def cmd_feats(wav_dir, out_dir, kind, manifest):
    """Extract features from WAV files; one feature file per utterance.

    Speaker ids come from the first '_'-separated token of each filename.
    """
    if kind != "mel":
        _fail(f"kind {kind!r} must be exported externally; only 'mel' is "
              "extracted natively", EXIT_USAGE)
    wav_dir = Path(wav_dir)
    if not wav_dir.is_dir():
        _fail(f"wav directory not found: {wav_dir}", EXIT_USAGE)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    manifest_path = Path(manifest) if manifest else out / "manifest.jsonl"

    entries = []
    failures = []
    for wav in sorted(wav_dir.glob("*.wav")):
        utt = wav.stem
        speaker = utt.split("_", 1)[0]
        try:
            buf = dsp.read_wav(wav)
            if buf.sample_rate != 16000:
                buf = dsp.resample(buf, 16000)
            seq = features.extract_mel(buf, utterance_id=utt, speaker_id=speaker)
            feat_path = out / f"{utt}.mel.s2vf"
            features.write_feature_file(feat_path, seq)
            entries.append(ManifestEntry(utterance_id=utt, speaker_id=speaker,
                                         wav=str(wav),
                                         features={"mel": str(feat_path)}))
        except Exception as e:  # collect, keep going
            failures.append(f"{wav.name}: {e}")
    Manifest(entries).save(manifest_path)
    click.echo(f"wrote {len(entries)} feature files, manifest {manifest_path}")
    if failures:
        for f in failures:
            click.echo(f"failed: {f}", err=True)
        sys.exit(EXIT_RUNTIME)


@main.command("train")
@click.option("--config", "config_file", type=click.Path(), default=None)
@click.option("--manifest", default=None)
@click.option("--out-dir", default=None)
@click.option("--max-steps", type=int, default=None)
@click.option("--seed", type=int, default=None)
@click.option("--source-kind", default=None)
@click.option("--target-kind", default=None)
@click.option("--ablation", default=None,
              help="Named ablation, e.g. no-bottleneck or no_cross_attention.")
@click.option("--resume", type=click.Path(), default=None)
@click.option("--show-config", is_flag=True)
def cmd_train(config_file, manifest, out_dir, max_steps, seed, source_kind,
              target_kind, ablation, resume, show_config):
    """Train a model by self-reconstruction."""
    overrides = {
        "train.manifest": manifest,
        "train.out_dir": out_dir,
        "train.max_steps": max_steps,
        "train.seed": _global_seed(seed),
        "model.source_feature_kind": source_kind,
        "model.target_feature_kind": target_kind,
    }
    try:
        cfg = resolve_train_config(config_file, overrides)
        if ablation:
            key = ablation.replace("_", "-")
            alt = ablation.replace("-", "_")
            flags = ABLATION_NAMES.get(key) or ABLATION_NAMES.get(alt)
            if flags is None:
                raise ConfigError(f"unknown ablation {ablation!r}; options: "
                                  + ", ".join(sorted(ABLATION_NAMES)))
            cfg = replace(cfg, model=replace(cfg.model, **flags))
    except (ConfigError, FileNotFoundError) as e:
        _fail(str(e), EXIT_USAGE)
    if show_config:
        click.echo(json.dumps(cfg.to_dict(), indent=2, sort_keys=True))
        return
    if not cfg.manifest or not Path(cfg.manifest).exists():
        _fail(f"manifest not found: {cfg.manifest!r}", EXIT_USAGE)
    try:
        path = training.run_training(cfg, resume_from=resume,
                                     log_fn=lambda l: click.echo(
                                         f"step {l['step']} loss {l['loss']:.4f}"))
    except training.TrainingError as e:
        _fail(str(e), EXIT_RUNTIME)
    click.echo(f"final checkpoint: {path}")


@main.command("convert")
@click.argument("checkpoint", type=click.Path())
@click.argument("source", type=click.Path())
@click.argument("targets", nargs=-1, type=click.Path())
@click.option("--out", "out_wav", required=True, type=click.Path())
@click.option("--dump-trace", type=click.Path(), default=None)
@click.option("--gl-iters", type=int, default=60, show_default=True)
def cmd_convert(checkpoint, source, targets, out_wav, dump_trace, gl_iters):
    """Convert SOURCE (a feature file) toward the speaker of TARGETS.

    Five target feature files are the standard protocol; fewer are accepted
    with a warning.
    """
    if not targets:
        _fail("at least one target feature file required", EXIT_USAGE)
    if len(targets) < 5:
        click.echo(f"warning: only {len(targets)} target utterances "
                   "(five is the standard protocol)", err=True)
    try:
        mdl, mel_cfg, _, _ = model_mod.load_checkpoint(checkpoint)
        src = features.load_feature_file(source)
        if src.kind.name != mdl.config.source_feature_kind:
            _fail(f"source kind mismatch: expected "
                  f"{mdl.config.source_feature_kind!r}, got {src.kind.name!r}",
                  EXIT_RUNTIME)
        tgts = [features.load_feature_file(t) for t in targets]
        for t in tgts:
            if t.kind.name != mdl.config.target_feature_kind:
                _fail(f"target kind mismatch: expected "
                      f"{mdl.config.target_feature_kind!r}, got {t.kind.name!r}",
                      EXIT_RUNTIME)
        mel_pred, trace = mdl.forward(src, tgts, train=False)
        spec = dsp.Spectrogram(frames=mel_pred.data.astype(np.float32),
                               config=mel_cfg, kind="log_mel")
        audio = dsp.griffin_lim(spec, mel_cfg, n_iter=gl_iters)
        dsp.write_wav(out_wav, audio)
        if dump_trace:
            model_mod.write_trace(dump_trace, trace)
    except (model_mod.CheckpointError, features.FeatureError, dsp.DspError,
            model_mod.ModelError) as e:
        _fail(str(e), EXIT_RUNTIME)
    click.echo(f"wrote {out_wav}")


def _run_eval(mdl, mel_cfg, manifest, scenario, n_pairs, seed, out_dir,
              embedder=None, pairs=None):
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if pairs is None:
        pairs = evaluate.sample_pairs(manifest, n=n_pairs, scenario=scenario,
                                      seed=seed)
    mels = {}
    for e in manifest.entries:
        mels[e.utterance_id] = (evaluate._load_seq(e, "mel").frames, e.speaker_id)
    if embedder is None:
        embedder = evaluate.train_speaker_embedder(list(mels.values()), seed=seed)
    by_spk = {}
    for frames, spk in mels.values():
        by_spk.setdefault(spk, []).append(embedder.embed(frames))
    threshold, eer = evaluate.calibrate_threshold(by_spk, seed=seed)

    scores = []
    recon_l1 = []
    for pair in pairs:
        src_seq = evaluate._load_seq(pair.source, mdl.config.source_feature_kind)
        tgts = [evaluate._load_seq(t, mdl.config.target_feature_kind)
                for t in pair.targets]
        mel_pred, _ = mdl.forward(src_seq, tgts, train=False)
        conv_emb = embedder.embed(mel_pred.data)
        tgt_embs = np.stack([embedder.embed(mels[t.utterance_id][0])
                             for t in pair.targets])
        centroid = tgt_embs.mean(axis=0)
        centroid /= np.linalg.norm(centroid)
        scores.append(evaluate.cosine_similarity(conv_emb, centroid))

        # quality proxy: self-reconstruction error on the source utterance
        self_tgt = evaluate._load_seq(pair.source, mdl.config.target_feature_kind)
        self_pred, _ = mdl.forward(src_seq, [self_tgt], train=False)
        gt = mels[pair.source.utterance_id][0]
        t = min(self_pred.shape[0], gt.shape[0])
        recon_l1.append(float(np.mean(np.abs(self_pred.data[:t] - gt[:t]))))

    result = {
        "scenario": scenario,
        "n_pairs": len(pairs),
        "seed": seed,
        "sv_accuracy": evaluate.sv_accuracy(scores, threshold),
        "eer": eer,
        "threshold": threshold,
        "recon_l1": float(np.mean(recon_l1)),
        "model_config": mdl.config.to_dict(),
    }
    evaluate.render_report([{k: v for k, v in result.items()
                             if k != "model_config"}],
                           out_dir / "report.json", out_dir / "report.txt")
    with open(out_dir / "report.json", "r+", encoding="utf-8") as fh:
        payload = json.load(fh)
        payload["model_config"] = result["model_config"]
        fh.seek(0)
        fh.truncate()
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return result


@main.command("eval")
@click.argument("checkpoint", type=click.Path())
@click.argument("manifest_path", type=click.Path())
@click.option("--scenario", type=click.Choice(["s2s", "u2u"]), default="s2s",
              show_default=True)
@click.option("--n-pairs", type=int, default=400, show_default=True)
@click.option("--seed", type=int, default=None)
@click.option("--out-dir", default="eval_out", show_default=True)
def cmd_eval(checkpoint, manifest_path, scenario, n_pairs, seed, out_dir):
    """Objective evaluation: SV accuracy plus a reconstruction-error proxy."""
    if not Path(manifest_path).exists():
        _fail(f"manifest not found: {manifest_path}", EXIT_USAGE)
    try:
        mdl, mel_cfg, _, _ = model_mod.load_checkpoint(checkpoint)
        manifest = Manifest.load(manifest_path)
        result = _run_eval(mdl, mel_cfg, manifest, scenario, n_pairs,
                           _global_seed(seed), out_dir)
    except (evaluate.EvalError, model_mod.CheckpointError,
            features.FeatureError) as e:
        _fail(str(e), EXIT_RUNTIME)
    click.echo(json.dumps({k: v for k, v in result.items()
                           if k != "model_config"}, indent=2, sort_keys=True))


@main.command("probe")
@click.argument("checkpoint", type=click.Path())
@click.argument("manifest_path", type=click.Path())
@click.option("--site", type=click.Choice(["Q", "K", "V"]), required=True)
@click.option("--seed", type=int, default=None)
@click.option("--out", "out_json", default=None)
def cmd_probe(checkpoint, manifest_path, site, seed, out_json):
    """Linear speaker-information probe on an attention site."""
    if not Path(manifest_path).exists():
        _fail(f"manifest not found: {manifest_path}", EXIT_USAGE)
    try:
        mdl, _, _, _ = model_mod.load_checkpoint(checkpoint)
        manifest = Manifest.load(manifest_path)
        res = evaluate.probe_speaker_info(mdl, manifest, site,
                                          seed=_global_seed(seed))
    except (evaluate.EvalError, model_mod.CheckpointError,
            features.FeatureError) as e:
        _fail(str(e), EXIT_RUNTIME)
    text = json.dumps(res.to_dict(), indent=2, sort_keys=True)
    if out_json:
        Path(out_json).write_text(text + "\n", encoding="utf-8")
    click.echo(text)


@main.command("ablate")
@click.option("--config", "config_file", type=click.Path(), default=None)
@click.option("--manifest", required=True)
@click.option("--out-dir", default="ablation", show_default=True)
@click.option("--max-steps", type=int, default=None)
@click.option("--n-pairs", type=int, default=20, show_default=True)
@click.option("--seed", type=int, default=None)
def cmd_ablate(config_file, manifest, out_dir, max_steps, n_pairs, seed):
    """Train and evaluate all 7 ablation configurations on shared seeds/pairs.

    Completed runs (an existing report.json) are skipped on rerun.
    """
    seed = _global_seed(seed)
    overrides = {"train.manifest": manifest, "train.out_dir": out_dir,
                 "train.max_steps": max_steps, "train.seed": seed}
    try:
        base = resolve_train_config(config_file, overrides)
    except (ConfigError, FileNotFoundError) as e:
        _fail(str(e), EXIT_USAGE)
    if not Path(manifest).exists():
        _fail(f"manifest not found: {manifest}", EXIT_USAGE)

    man = Manifest.load(manifest)
    pairs = evaluate.sample_pairs(man, n=n_pairs, scenario="s2s", seed=seed)
    mels = {e.utterance_id: (evaluate._load_seq(e, "mel").frames, e.speaker_id)
            for e in man.entries}
    embedder = evaluate.train_speaker_embedder(list(mels.values()), seed=seed)

    rows = []
    try:
        for row, name, run_cfg in training.ablation_suite(base):
            run_dir = Path(run_cfg.out_dir)
            report_path = run_dir / "report.json"
            if report_path.exists():
                with open(report_path, encoding="utf-8") as fh:
                    prior = json.load(fh)["results"][0]
                rows.append({"row": f"({row})", "name": name, **prior})
                click.echo(f"({row}) {name}: already done, skipping")
                continue
            click.echo(f"({row}) {name}: training {run_cfg.max_steps} steps")
            ckpt = training.run_training(run_cfg)
            mdl, mel_cfg, _, _ = model_mod.load_checkpoint(ckpt)
            result = _run_eval(mdl, mel_cfg, man, "s2s", n_pairs, seed,
                               run_dir, embedder=embedder, pairs=pairs)
            rows.append({"row": f"({row})", "name": name,
                         **{k: v for k, v in result.items()
                            if k != "model_config"}})
    except (training.TrainingError, evaluate.EvalError) as e:
        _fail(str(e), EXIT_RUNTIME)

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    evaluate.render_report(rows, out / "ablation_report.json",
                           out / "ablation_report.txt")
    click.echo(f"ablation grid written to {out / 'ablation_report.txt'}")


if __name__ == "__main__":
    main()
