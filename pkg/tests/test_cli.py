"""End-to-end tests for the command-line pipeline.

A module-scoped workspace runs every command once on a miniature corpus
(gen-corpus, augment, pretrain-bert, train-stage1, train-stage2,
evaluate); the tests assert on the written artifacts, the exit codes of
the error paths, and the checkpoint hash chain. Commands that would
mutate the shared workspace run on a copy.
"""

import json
import shutil
from pathlib import Path

import numpy as np
import pytest

from alvtts.checkpoint import file_hash, load_checkpoint
from alvtts.cli import main
from alvtts.config import config_hash, load_run_config

CONFIG_TEMPLATE = """\
corpus:
  lexicon_size: 8
  sentence_count: 40
  words_per_sentence: [2, 3]
  divergent_fraction: 0.5
  speakers:
    - {{speaker_id: spkA, native_dialect: DLA, log_f0_offset: 0.12, duration_scale: 1.0}}
    - {{speaker_id: spkB, native_dialect: DLB, log_f0_offset: -0.08, duration_scale: 1.15}}
  frame_rate: 100.0
  high_logf0: 5.6
  low_logf0: 5.1
  noise_std: 0.05
  seed: 3

quantizer:
  input_dim: 1
  width: 32
  codebook_size: 4
  commitment_weight: 4.0

backbone:
  width: 32
  layers: 1
  heads: 2
  ff_dim: 64
  dropout: 0.0
  max_len: 256

bert:
  width: 32
  layers: 1
  heads: 2
  ff_dim: 64
  dropout: 0.0
  max_len: 64
  mask_ratio: 0.15

training:
  seed: 0
  warmup: 5
  val_fraction: 0.1
  test_fraction: 0.1
  calibration_fraction: 0.1
  eval_every: 10
  stage1: {{lr: 0.001, iterations: 40, batch_size: 8}}
  bert: {{lr: 0.001, iterations: 30, batch_size: 16}}
  stage2: {{lr: 0.001, iterations: 30, batch_size: 16}}

augment:
  backend: rule_based
  concurrency: 1
  max_attempts: 2

paths:
  workdir: {workdir}
"""


def write_config(dir_path: Path, **overrides) -> Path:
    workdir = overrides.pop("workdir", dir_path / "run")
    text = CONFIG_TEMPLATE.format(workdir=workdir)
    for key, value in overrides.items():
        text = text.replace(key, value)
    path = dir_path / "config.yaml"
    path.write_text(text)
    return path


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    """Full pipeline run: every command once, in dependency order."""
    root = tmp_path_factory.mktemp("cli")
    config = write_config(root)
    for command in (
        ["gen-corpus"],
        ["augment"],
        ["pretrain-bert"],
        ["train-stage1"],
        ["train-stage2"],
        ["evaluate"],
    ):
        code = main(command + ["--config", str(config)])
        assert code == 0, f"{command[0]} exited {code}"
    return {"root": root, "config": config, "workdir": root / "run"}


def clone_workspace(ws, tmp_path: Path) -> Path:
    """Copy the finished workspace so a test can mutate it freely."""
    workdir = tmp_path / "run"
    shutil.copytree(ws["workdir"], workdir)
    return write_config(tmp_path, workdir=workdir)


def manifest_utterances(ws):
    from alvtts.corpus import load_manifest

    return load_manifest(ws["workdir"] / "corpus" / "manifest.tsv")


# --------------------------------------------------------------- corpus


class TestGenCorpus:
    def test_writes_manifest_rules_lexicon(self, workspace):
        corpus_dir = workspace["workdir"] / "corpus"
        assert (corpus_dir / "manifest.tsv").exists()
        rules = json.loads((corpus_dir / "rules.json").read_text())
        assert sorted(rules) == ["DLA", "DLB"]
        lexicon = json.loads((corpus_dir / "lexicon.json").read_text())
        assert len(lexicon) == 8
        assert all(set(rules[d]) == set(lexicon) for d in rules)

    def test_manifest_is_deterministic(self, workspace, tmp_path):
        config = write_config(tmp_path)
        assert main(["gen-corpus", "--config", str(config)]) == 0
        first = (workspace["workdir"] / "corpus" / "manifest.tsv").read_bytes()
        second = (tmp_path / "run" / "corpus" / "manifest.tsv").read_bytes()
        assert first == second

    def test_missing_config_file_exits_2(self, tmp_path):
        assert main(["gen-corpus", "--config", str(tmp_path / "nope.yaml")]) == 2

    def test_unknown_config_key_exits_2(self, tmp_path):
        config = tmp_path / "config.yaml"
        config.write_text("corpus:\n  lexicon_sizes: 8\n")
        assert main(["gen-corpus", "--config", str(config)]) == 2


# -------------------------------------------------------------- stage 1


class TestTrainStage1:
    def test_writes_checkpoints(self, workspace):
        ckpts = workspace["workdir"] / "checkpoints"
        assert (ckpts / "quantizer.pt").exists()
        assert (ckpts / "backbone.pt").exists()

    def test_history_loss_decreases(self, workspace):
        history = json.loads(
            (workspace["workdir"] / "stage1_history.json").read_text()
        )["loss"]
        assert len(history) == 40
        assert history[-1] < history[0]

    def test_backbone_records_quantizer_hash(self, workspace):
        ckpts = workspace["workdir"] / "checkpoints"
        backbone = load_checkpoint(ckpts / "backbone.pt", "backbone")
        assert backbone.upstream["quantizer"] == file_hash(ckpts / "quantizer.pt")

    def test_config_hash_recorded(self, workspace):
        run = load_run_config(workspace["config"])
        ckpt = load_checkpoint(
            workspace["workdir"] / "checkpoints" / "quantizer.pt", "quantizer"
        )
        assert ckpt.config_hash == config_hash(run)


# ------------------------------------------------- augment and pretrain


class TestAugmentAndBert:
    def test_text_corpus_covers_both_dialects(self, workspace):
        lines = (
            (workspace["workdir"] / "augment" / "text_corpus.tsv")
            .read_text()
            .splitlines()
        )
        dialects = {line.split("\t")[0] for line in lines}
        assert dialects == {"DLA", "DLB"}
        assert len(lines) > 40  # originals plus translations

    def test_bert_checkpoint_chain(self, workspace):
        ckpt = load_checkpoint(
            workspace["workdir"] / "checkpoints" / "bert.pt", "mdplbert"
        )
        corpus_file = workspace["workdir"] / "augment" / "text_corpus.tsv"
        assert ckpt.upstream["text_corpus"] == file_hash(corpus_file)
        assert "<mask>" in ckpt.extra["input_symbols"]

    def test_pretrain_without_augment_exits_2(self, tmp_path, capsys):
        config = write_config(tmp_path)
        assert main(["gen-corpus", "--config", str(config)]) == 0
        assert main(["pretrain-bert", "--config", str(config)]) == 2
        assert "text corpus" in capsys.readouterr().err


# -------------------------------------------------------------- stage 2


class TestTrainStage2:
    def test_predictor_checkpoint(self, workspace):
        ckpt = load_checkpoint(
            workspace["workdir"] / "checkpoints" / "predictor.pt", "predictor"
        )
        assert ckpt.extra["from_scratch"] is False
        assert 0.0 <= ckpt.extra["best_val_accuracy"] <= 1.0
        assert ckpt.extra["val_history"]
        assert "bert" in ckpt.upstream and "quantizer" in ckpt.upstream

    def test_alv_cache_reused_on_rerun(self, workspace, tmp_path):
        config = clone_workspace(workspace, tmp_path)
        cache = tmp_path / "run" / "checkpoints" / "alv_targets.json"
        before = cache.stat().st_mtime_ns
        assert main(["train-stage2", "--config", str(config)]) == 0
        assert cache.stat().st_mtime_ns == before

    def test_from_scratch_differs_from_pretrained(self, workspace, tmp_path):
        config = clone_workspace(workspace, tmp_path)
        path = tmp_path / "run" / "checkpoints" / "predictor.pt"
        pretrained = load_checkpoint(path, "predictor")
        assert (
            main(["train-stage2", "--from-scratch", "--config", str(config)]) == 0
        )
        scratch = load_checkpoint(path, "predictor")
        assert scratch.extra["from_scratch"] is True
        assert "bert" not in scratch.upstream
        changed = any(
            not np.array_equal(
                pretrained.state_dict[k].numpy(), scratch.state_dict[k].numpy()
            )
            for k in pretrained.state_dict
        )
        assert changed

    def test_without_stage1_exits_2(self, tmp_path, capsys):
        config = write_config(tmp_path)
        assert main(["gen-corpus", "--config", str(config)]) == 0
        assert main(["train-stage2", "--config", str(config)]) == 2
        assert "missing checkpoint" in capsys.readouterr().err


# ----------------------------------------------------------- synthesize


class TestSynthesize:
    def synth(self, workspace, *extra, config=None):
        args = ["synthesize", "--config", str(config or workspace["config"])]
        return main(args + list(extra))

    def lexicon(self, workspace):
        return json.loads(
            (workspace["workdir"] / "corpus" / "lexicon.json").read_text()
        )

    def test_predicted_mode_outputs(self, workspace, tmp_path):
        words = sorted(self.lexicon(workspace))[:2]
        out = tmp_path / "synth"
        code = self.synth(
            workspace,
            "--text", " ".join(words),
            "--speaker", "spkA",
            "--dialect", "DLB",
            "--out", str(out),
            "--name", "pred",
        )
        assert code == 0
        from alvtts.corpus import read_feature_file

        frames = read_feature_file(out / "pred.alvf")
        meta = json.loads((out / "pred.alv.json").read_text())
        n_phonemes = sum(len(self.lexicon(workspace)[w]) for w in words)
        assert len(meta["alv"]) == n_phonemes
        assert all(0 <= c < 4 for c in meta["alv"])
        assert len(meta["durations"]) == n_phonemes
        assert frames.shape == (sum(meta["durations"]), 9)

    def test_wav_output(self, workspace, tmp_path):
        word = sorted(self.lexicon(workspace))[0]
        out = tmp_path / "synth"
        code = self.synth(
            workspace,
            "--text", word,
            "--speaker", "spkA",
            "--dialect", "DLA",
            "--out", str(out),
            "--name", "w",
            "--wav",
        )
        assert code == 0
        assert (out / "w.wav").read_bytes()[:4] == b"RIFF"

    def test_predicted_without_dialect_exits_2(self, workspace):
        word = sorted(self.lexicon(workspace))[0]
        assert self.synth(workspace, "--text", word, "--speaker", "spkA") == 2

    def test_no_alv_mode_records_null(self, workspace, tmp_path):
        word = sorted(self.lexicon(workspace))[0]
        out = tmp_path / "synth"
        code = self.synth(
            workspace,
            "--text", word,
            "--speaker", "spkB",
            "--mode", "no_alv",
            "--out", str(out),
            "--name", "plain",
        )
        assert code == 0
        assert json.loads((out / "plain.alv.json").read_text())["alv"] is None

    def test_reference_needs_equal_phoneme_count(self, workspace):
        utt = manifest_utterances(workspace)[0]
        lexicon = self.lexicon(workspace)
        word = sorted(lexicon)[0]
        repeats = 1
        while repeats * len(lexicon[word]) == len(utt.phonemes):
            repeats += 1
        code = self.synth(
            workspace,
            "--text", " ".join([word] * repeats),
            "--speaker", "spkA",
            "--mode", "reference_alv",
            "--ref-utt", utt.utt_id,
        )
        assert code == 3

    def test_reference_own_text_matches_extraction(self, workspace, tmp_path):
        utt = manifest_utterances(workspace)[0]
        out = tmp_path / "synth"
        code = self.synth(
            workspace,
            "--text", " ".join(utt.graphemes),
            "--speaker", utt.speaker_id,
            "--mode", "reference_alv",
            "--ref-utt", utt.utt_id,
            "--out", str(out),
            "--name", "ref",
        )
        assert code == 0
        extracted = tmp_path / "alv.json"
        assert (
            main(
                [
                    "extract-alv",
                    "--config", str(workspace["config"]),
                    "--utt-id", utt.utt_id,
                    "--out", str(extracted),
                ]
            )
            == 0
        )
        meta = json.loads((out / "ref.alv.json").read_text())
        assert meta["alv"] == json.loads(extracted.read_text())[utt.utt_id]

    def test_unknown_ref_utt_exits_3(self, workspace):
        word = sorted(self.lexicon(workspace))[0]
        code = self.synth(
            workspace,
            "--text", word,
            "--speaker", "spkA",
            "--mode", "reference_alv",
            "--ref-utt", "utt_9999",
        )
        assert code == 3

    def test_unknown_speaker_exits_3(self, workspace):
        word = sorted(self.lexicon(workspace))[0]
        code = self.synth(
            workspace, "--text", word, "--speaker", "ghost", "--dialect", "DLA"
        )
        assert code == 3

    def test_oov_word_exits_3(self, workspace):
        code = self.synth(
            workspace, "--text", "zzzzz", "--speaker", "spkA", "--dialect", "DLA"
        )
        assert code == 3

    def test_empty_text_exits_3(self, workspace):
        assert self.synth(workspace, "--text", " ", "--speaker", "spkA") == 3


# ---------------------------------------------------------- extract-alv


class TestExtractAlv:
    def test_single_utterance(self, workspace, capsys):
        utt = manifest_utterances(workspace)[0]
        code = main(
            [
                "extract-alv",
                "--config", str(workspace["config"]),
                "--utt-id", utt.utt_id,
            ]
        )
        assert code == 0
        result = json.loads(capsys.readouterr().out)
        assert list(result) == [utt.utt_id]
        assert len(result[utt.utt_id]) == len(utt.phonemes)
        assert all(0 <= c < 4 for c in result[utt.utt_id])

    def test_all_utterances_to_file(self, workspace, tmp_path):
        out = tmp_path / "all.json"
        code = main(
            ["extract-alv", "--config", str(workspace["config"]), "--out", str(out)]
        )
        assert code == 0
        result = json.loads(out.read_text())
        assert len(result) == len(manifest_utterances(workspace))

    def test_unknown_utterance_exits_3(self, workspace):
        code = main(
            [
                "extract-alv",
                "--config", str(workspace["config"]),
                "--utt-id", "utt_9999",
            ]
        )
        assert code == 3


# ------------------------------------------------------------- evaluate


class TestEvaluate:
    def test_metrics_blocks_ok(self, workspace):
        metrics = json.loads(
            (workspace["workdir"] / "eval" / "metrics.json").read_text()
        )
        for key in ("id_alv", "cd_alv", "logf0_by_alv", "speaker_similarity", "bleu"):
            assert metrics[key]["status"] == "ok", key
        assert 0.0 <= metrics["id_alv"]["accuracy"] <= 1.0
        assert 0.0 <= metrics["cd_alv"]["divergent_accuracy"] <= 1.0
        run = load_run_config(workspace["config"])
        assert metrics["config_hash"] == config_hash(run)

    def test_logf0_tables_written(self, workspace):
        eval_dir = workspace["workdir"] / "eval"
        points = (eval_dir / "logf0_points.csv").read_text().splitlines()
        stats = (eval_dir / "logf0_stats.tsv").read_text().splitlines()
        assert len(points) > 1 and len(stats) > 1

    def test_rerun_is_byte_identical(self, workspace):
        metrics_file = workspace["workdir"] / "eval" / "metrics.json"
        before = metrics_file.read_bytes()
        assert main(["evaluate", "--config", str(workspace["config"])]) == 0
        assert metrics_file.read_bytes() == before

    def test_skips_blocks_without_checkpoints(self, tmp_path):
        config = write_config(tmp_path)
        assert main(["gen-corpus", "--config", str(config)]) == 0
        assert main(["evaluate", "--config", str(config)]) == 0
        metrics = json.loads((tmp_path / "run" / "eval" / "metrics.json").read_text())
        assert metrics["id_alv"]["status"] == "skipped"
        assert metrics["cd_alv"]["status"] == "skipped"
        assert metrics["bleu"]["status"] == "skipped"


# ------------------------------------------------------------ hash chain


class TestHashChain:
    def test_stale_predictor_rejected_after_stage1_retrain(
        self, workspace, tmp_path, capsys
    ):
        config = clone_workspace(workspace, tmp_path)
        text = config.read_text().replace("training:\n  seed: 0", "training:\n  seed: 5")
        config.write_text(text)
        assert main(["train-stage1", "--config", str(config)]) == 0
        word = sorted(
            json.loads((tmp_path / "run" / "corpus" / "lexicon.json").read_text())
        )[0]
        code = main(
            [
                "synthesize",
                "--config", str(config),
                "--text", word,
                "--speaker", "spkA",
                "--dialect", "DLA",
            ]
        )
        assert code == 2
        assert "quantizer" in capsys.readouterr().err

    def test_alv_cache_invalidated_after_stage1_retrain(self, workspace, tmp_path):
        config = clone_workspace(workspace, tmp_path)
        cache = tmp_path / "run" / "checkpoints" / "alv_targets.json"
        old_hash = json.loads(cache.read_text())["quantizer_hash"]
        text = config.read_text().replace("training:\n  seed: 0", "training:\n  seed: 5")
        config.write_text(text)
        assert main(["train-stage1", "--config", str(config)]) == 0
        assert main(["train-stage2", "--from-scratch", "--config", str(config)]) == 0
        new_hash = json.loads(cache.read_text())["quantizer_hash"]
        assert new_hash != old_hash
        assert new_hash == file_hash(tmp_path / "run" / "checkpoints" / "quantizer.pt")
