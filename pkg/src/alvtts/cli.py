"""Command-line pipeline: corpus generation, augmentation, the two
training stages plus LM pre-training, synthesis, accent extraction, and
evaluation, all driven by one YAML config.

Exit codes: 0 ok, 2 configuration error, 3 contract violation,
4 numeric divergence.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np
import torch

from . import augment as augment_mod
from .alvpredictor import AlvPredictor, predict_alv
from .backbone import render_wav
from .checkpoint import (
    file_hash,
    load_checkpoint,
    save_checkpoint,
    verify_upstream,
)
from .config import RunConfig, config_hash, load_run_config
from .corpus import (
    Lexicon,
    Utterance,
    g2p_lookup,
    generate_synthetic_corpus,
    load_manifest,
    mora_spans,
    resolve_frames,
    save_manifest,
    write_feature_file,
)
from .errors import (
    ConfigError,
    ContractError,
    DivergenceError,
    InputError,
)
from .evalkit import (
    DeskSpeakerEmbedder,
    alv_oracle_accuracy,
    corpus_bleu4,
    fit_alv_mapping,
    logf0_by_alv,
    speaker_similarity,
    write_points_csv,
    write_stats_table,
)
from .features import F0Provider
from .mdplbert import (
    BertConfig,
    PhonemeBert,
    SymbolVocab,
    TextItem,
    load_text_corpus,
    text_items_from_utterances,
)
from .quantizer import extract_alv, perplexity
from .training import (
    Stage1Artifacts,
    build_stage1_modules,
    cache_alv_targets,
    corpus_vocab,
    finetune_predictor,
    pretrain_bert,
    split_utterances,
    synthesize_utterance,
    train_stage1,
)

METRICS_SCHEMA_PATH = Path(__file__).parent / "schemas" / "metrics.schema.json"


# ---------------------------------------------------------------- paths


def manifest_path(run: RunConfig) -> Path:
    return run.workdir / "corpus" / "manifest.tsv"


def rules_path(run: RunConfig) -> Path:
    return run.workdir / "corpus" / "rules.json"


def lexicon_path(run: RunConfig) -> Path:
    return run.workdir / "corpus" / "lexicon.json"


def variants_path(run: RunConfig) -> Path:
    return run.workdir / "corpus" / "variants.json"


def text_corpus_path(run: RunConfig) -> Path:
    return run.workdir / "augment" / "text_corpus.tsv"


def ckpt_path(run: RunConfig, name: str) -> Path:
    return run.workdir / "checkpoints" / f"{name}.pt"


def eval_dir(run: RunConfig) -> Path:
    return run.workdir / "eval"


def _require(path: Path, hint: str) -> Path:
    if not path.exists():
        raise ConfigError(f"missing {hint}: {path}")
    return path


def _load_utterances(run: RunConfig) -> list[Utterance]:
    return load_manifest(_require(manifest_path(run), "corpus manifest"))


def _load_lexicon(run: RunConfig) -> Lexicon:
    raw = json.loads(_require(lexicon_path(run), "lexicon file").read_text())
    return Lexicon(entries={w: tuple(p) for w, p in raw.items()})


def _load_rules(run: RunConfig) -> dict[str, dict[str, str]]:
    return json.loads(_require(rules_path(run), "accent rule tables").read_text())


def _splits(run: RunConfig, utterances: list[Utterance]) -> dict[str, list[Utterance]]:
    t = run.training
    return split_utterances(
        utterances,
        t.seed,
        val_fraction=t.val_fraction,
        test_fraction=t.test_fraction,
        calibration_fraction=t.calibration_fraction,
    )


# ------------------------------------------------------------- commands


def cmd_gen_corpus(run: RunConfig) -> int:
    corpus = generate_synthetic_corpus(run.corpus)
    path = manifest_path(run)
    save_manifest(corpus.utterances, path)
    rules_path(run).write_text(
        json.dumps(
            {d: dict(sorted(t.rules.items())) for d, t in corpus.rule_tables.items()},
            sort_keys=True,
            indent=2,
        )
    )
    lexicon_path(run).write_text(
        json.dumps(
            {w: list(p) for w, p in sorted(corpus.lexicon.entries.items())},
            sort_keys=True,
            indent=2,
        )
    )
    tables, entries = dialect_word_variants(corpus.lexicon, corpus.rule_tables)
    variants_path(run).write_text(
        json.dumps(
            {
                "tables": tables,
                "entries": {w: list(p) for w, p in sorted(entries.items())},
            },
            sort_keys=True,
            indent=2,
        )
    )
    print(f"wrote {len(corpus.utterances)} utterances to {path}")
    return 0


def _augment_backend(run: RunConfig) -> augment_mod.TranslatorBackend:
    if run.augment.backend == "remote":
        return augment_mod.RemoteLLM(
            endpoint=run.augment.endpoint,
            model=run.augment.model,
            max_tokens=run.augment.max_tokens,
            timeout=run.augment.timeout,
        )
    variants = variants_path(run)
    tables: dict[str, dict[str, str]] = {}
    if variants.exists():
        tables = json.loads(variants.read_text())["tables"]
    return augment_mod.RuleBased(tables=tables)


def cmd_augment(run: RunConfig) -> int:
    utterances = _load_utterances(run)
    lexicon = _load_lexicon(run)
    originals = text_items_from_utterances(utterances)
    backend = _augment_backend(run)
    out_dir = run.workdir / "augment"
    out_dir.mkdir(parents=True, exist_ok=True)
    dialects = sorted({it.dialect for it in originals})
    all_records = []
    for target in dialects:
        sources = [it for it in originals if it.dialect != target]
        if not sources:
            continue
        records = augment_mod.translate_corpus(
            [" ".join(it.graphemes) for it in sources],
            target,
            backend,
            max_attempts=run.augment.max_attempts,
            concurrency=run.augment.concurrency,
            results_path=out_dir / f"records_{target}.jsonl",
            audit_path=out_dir / f"audit_{target}.jsonl",
        )
        all_records.extend(records)
    items, skipped = augment_mod.assemble_multidialect_corpus(
        originals, all_records, lexicon, text_corpus_path(run)
    )
    failed = sum(1 for r in all_records if not r.ok)
    print(
        f"wrote {len(items)} lines ({len(originals)} originals, "
        f"{skipped} skipped OOV, {failed} failed translations)"
    )
    return 0


def _bert_config(run: RunConfig, vocab_size: int, grapheme_size: int) -> BertConfig:
    cfg = run.bert
    return BertConfig(
        vocab_size=vocab_size,
        grapheme_vocab_size=grapheme_size,
        width=cfg.width,
        layers=cfg.layers,
        heads=cfg.heads,
        ff_dim=cfg.ff_dim,
        dropout=cfg.dropout,
        max_len=cfg.max_len,
    )


def cmd_pretrain_bert(run: RunConfig) -> int:
    corpus_file = _require(
        text_corpus_path(run), "text corpus (run the augment command first)"
    )
    items = load_text_corpus(corpus_file)
    artifacts = pretrain_bert(items, run)
    path = ckpt_path(run, "bert")
    save_checkpoint(
        path,
        "mdplbert",
        artifacts.bert.state_dict(),
        config_hash(run),
        upstream={"text_corpus": file_hash(corpus_file)},
        extra={
            "input_symbols": list(artifacts.input_vocab.symbols),
            "grapheme_symbols": list(artifacts.grapheme_vocab.symbols),
            "final_loss": artifacts.history[-1] if artifacts.history else None,
        },
    )
    print(f"wrote {path}")
    return 0


def cmd_train_stage1(run: RunConfig) -> int:
    utterances = _load_utterances(run)
    splits = _splits(run, utterances)
    artifacts = train_stage1(
        splits["train"], run, feature_root=str(manifest_path(run).parent)
    )
    q_path = ckpt_path(run, "quantizer")
    q_hash = save_checkpoint(
        q_path,
        "quantizer",
        {
            "encoder": artifacts.encoder.state_dict(),
            "quantizer": artifacts.quantizer.state_dict(),
        },
        config_hash(run),
        extra={"width": run.quantizer.width},
    )
    b_path = ckpt_path(run, "backbone")
    save_checkpoint(
        b_path,
        "backbone",
        artifacts.backbone.state_dict(),
        config_hash(run),
        upstream={"quantizer": q_hash},
        extra={
            "phoneme_symbols": list(artifacts.vocab.symbols),
            "speakers": list(artifacts.speakers),
        },
    )
    history_path = run.workdir / "stage1_history.json"
    history_path.write_text(json.dumps({"loss": artifacts.history}))
    if artifacts.history:
        print(
            f"stage 1: {len(artifacts.history)} steps, "
            f"loss {artifacts.history[0]:.4f} -> {artifacts.history[-1]:.4f}"
        )
    print(f"wrote {q_path} and {b_path}")
    return 0


def load_stage1(run: RunConfig) -> tuple[Stage1Artifacts, str]:
    """Rebuild stage-1 modules from checkpoints; returns (artifacts, quantizer hash)."""
    q_path = ckpt_path(run, "quantizer")
    q_ckpt = load_checkpoint(q_path, "quantizer")
    b_ckpt = load_checkpoint(ckpt_path(run, "backbone"), "backbone")
    verify_upstream(b_ckpt, "quantizer", q_path)
    vocab = SymbolVocab(tuple(b_ckpt.extra["phoneme_symbols"]))
    speakers = list(b_ckpt.extra["speakers"])
    encoder, quantizer, backbone = build_stage1_modules(run, vocab, speakers)
    encoder.load_state_dict(q_ckpt.state_dict["encoder"])
    quantizer.load_state_dict(q_ckpt.state_dict["quantizer"])
    backbone.load_state_dict(b_ckpt.state_dict)
    # re-tie: load_state_dict fills both copies, sharing must be restored
    backbone.alv_table = quantizer.codebook
    encoder.eval()
    quantizer.eval()
    backbone.eval()
    artifacts = Stage1Artifacts(encoder, quantizer, backbone, vocab, speakers)
    return artifacts, file_hash(q_path)


def _stage2_pairs(
    utterances: list[Utterance], targets: dict[str, tuple[int, ...]]
) -> list[tuple[TextItem, tuple[int, ...]]]:
    pairs = []
    for u in utterances:
        item = TextItem(
            dialect=u.dialect, graphemes=tuple(u.graphemes), phonemes=tuple(u.phonemes)
        )
        pairs.append((item, targets[u.utt_id]))
    return pairs


def _cached_alv_targets(
    run: RunConfig,
    utterances: list[Utterance],
    stage1: Stage1Artifacts,
    quantizer_hash: str,
) -> dict[str, tuple[int, ...]]:
    cache_file = run.workdir / "checkpoints" / "alv_targets.json"
    if cache_file.exists():
        cached = json.loads(cache_file.read_text())
        if cached.get("quantizer_hash") == quantizer_hash:
            targets = {u: tuple(v) for u, v in cached["targets"].items()}
            if all(u.utt_id in targets for u in utterances):
                return targets
    provider = F0Provider(str(manifest_path(run).parent), normalize=True)
    targets = cache_alv_targets(
        utterances, stage1.encoder, stage1.quantizer, provider
    )
    cache_file.parent.mkdir(parents=True, exist_ok=True)
    cache_file.write_text(
        json.dumps(
            {
                "quantizer_hash": quantizer_hash,
                "targets": {u: list(v) for u, v in sorted(targets.items())},
            }
        )
    )
    return targets


def cmd_train_stage2(run: RunConfig, from_scratch: bool) -> int:
    utterances = _load_utterances(run)
    splits = _splits(run, utterances)
    stage1, q_hash = load_stage1(run)
    targets = _cached_alv_targets(
        run, splits["train"] + splits["val"], stage1, q_hash
    )
    upstream = {"quantizer": q_hash}
    bert_state = None
    if from_scratch:
        bert_ckpt_path = ckpt_path(run, "bert")
        if bert_ckpt_path.exists():
            bert_ckpt = load_checkpoint(bert_ckpt_path, "mdplbert")
            input_vocab = SymbolVocab(tuple(bert_ckpt.extra["input_symbols"]))
            grapheme_size = len(bert_ckpt.extra["grapheme_symbols"])
        else:
            input_vocab = corpus_vocab(utterances)
            grapheme_size = len({w for u in utterances for w in u.graphemes}) + 1
    else:
        bert_ckpt = load_checkpoint(
            _require(ckpt_path(run, "bert"), "bert checkpoint"), "mdplbert"
        )
        bert_state = bert_ckpt.state_dict
        input_vocab = SymbolVocab(tuple(bert_ckpt.extra["input_symbols"]))
        grapheme_size = len(bert_ckpt.extra["grapheme_symbols"])
        upstream["bert"] = file_hash(ckpt_path(run, "bert"))
    artifacts = finetune_predictor(
        _stage2_pairs(splits["train"], targets),
        _stage2_pairs(splits["val"], targets),
        run,
        input_vocab,
        bert_state,
        grapheme_size,
    )
    path = ckpt_path(run, "predictor")
    save_checkpoint(
        path,
        "predictor",
        artifacts.predictor.state_dict(),
        config_hash(run),
        upstream=upstream,
        extra={
            "input_symbols": list(input_vocab.symbols),
            "grapheme_size": grapheme_size,
            "from_scratch": from_scratch,
            "best_val_accuracy": artifacts.best_val_accuracy,
            "val_history": [[s, a] for s, a in artifacts.val_history],
        },
    )
    print(
        f"stage 2 ({'scratch' if from_scratch else 'pretrained'}): "
        f"best val accuracy {artifacts.best_val_accuracy:.4f} "
        f"at step {artifacts.best_step}"
    )
    print(f"wrote {path}")
    return 0


def load_predictor(run: RunConfig) -> tuple[AlvPredictor, SymbolVocab]:
    p_ckpt = load_checkpoint(
        _require(ckpt_path(run, "predictor"), "predictor checkpoint"), "predictor"
    )
    verify_upstream(p_ckpt, "quantizer", ckpt_path(run, "quantizer"))
    if "bert" in p_ckpt.upstream:
        verify_upstream(p_ckpt, "bert", ckpt_path(run, "bert"))
    input_vocab = SymbolVocab(tuple(p_ckpt.extra["input_symbols"]))
    bert = PhonemeBert(
        _bert_config(run, len(input_vocab.symbols), p_ckpt.extra["grapheme_size"])
    )
    predictor = AlvPredictor(bert, codebook_size=run.quantizer.codebook_size)
    predictor.load_state_dict(p_ckpt.state_dict)
    predictor.eval()
    return predictor, input_vocab


def cmd_synthesize(run: RunConfig, args: argparse.Namespace) -> int:
    stage1, _ = load_stage1(run)
    lexicon = _load_lexicon(run)
    words = tuple(args.text.split())
    if not words:
        raise InputError("no words to synthesize")
    phonemes = list(g2p_lookup(words, lexicon))
    alv: tuple[int, ...] | None
    if args.mode == "predicted_alv":
        if not args.dialect:
            raise ConfigError("predicted_alv mode needs --dialect")
        predictor, input_vocab = load_predictor(run)
        item = TextItem(dialect=args.dialect, graphemes=words, phonemes=tuple(phonemes))
        alv, _ = predict_alv(predictor, item, input_vocab)
    elif args.mode == "reference_alv":
        if not args.ref_utt:
            raise ConfigError("reference_alv mode needs --ref-utt")
        utterances = _load_utterances(run)
        by_id = {u.utt_id: u for u in utterances}
        if args.ref_utt not in by_id:
            raise InputError(f"reference utterance {args.ref_utt!r} not in manifest")
        ref = by_id[args.ref_utt]
        if len(ref.phonemes) != len(phonemes):
            raise ContractError(
                f"reference has {len(ref.phonemes)} phonemes, text has "
                f"{len(phonemes)}; accent transfer needs equal counts"
            )
        provider = F0Provider(str(manifest_path(run).parent), normalize=True)
        alv = extract_alv(ref, stage1.encoder, stage1.quantizer, provider)
    elif args.mode == "no_alv":
        alv = None
    else:
        raise ConfigError(f"unknown synthesis mode {args.mode!r}")

    output = synthesize_utterance(
        stage1.backbone, stage1.vocab, stage1.speakers, phonemes, args.speaker, alv
    )
    frames = output.frames[0, output.frame_mask[0]].numpy()
    out_dir = Path(args.out) if args.out else run.workdir / "synth"
    out_dir.mkdir(parents=True, exist_ok=True)
    stem = args.name or "synth"
    write_feature_file(out_dir / f"{stem}.alvf", frames)
    (out_dir / f"{stem}.alv.json").write_text(
        json.dumps(
            {
                "mode": args.mode,
                "alv": list(alv) if alv is not None else None,
                "durations": output.durations[0].tolist(),
            },
            sort_keys=True,
        )
    )
    if args.wav:
        render_wav(
            frames[:, 0], out_dir / f"{stem}.wav", frame_rate=run.corpus.frame_rate
        )
    print(f"wrote {out_dir / (stem + '.alvf')} ({frames.shape[0]} frames)")
    return 0


def cmd_extract_alv(run: RunConfig, args: argparse.Namespace) -> int:
    stage1, _ = load_stage1(run)
    utterances = _load_utterances(run)
    provider = F0Provider(str(manifest_path(run).parent), normalize=True)
    if args.utt_id:
        selected = [u for u in utterances if u.utt_id == args.utt_id]
        if not selected:
            raise InputError(f"utterance {args.utt_id!r} not in manifest")
    else:
        selected = utterances
    result = {
        u.utt_id: list(extract_alv(u, stage1.encoder, stage1.quantizer, provider))
        for u in selected
    }
    text = json.dumps(result, sort_keys=True, indent=2)
    if args.out:
        Path(args.out).write_text(text)
    else:
        print(text)
    return 0


# ------------------------------------------------------------ evaluate


def _mora_oracle_pairs(
    utterances: list[Utterance],
    alv_by_utt: dict[str, tuple[int, ...]],
) -> list[tuple[tuple[int, ...], str]]:
    pairs = []
    for u in utterances:
        oracle = "".join(u.oracle_accent) if u.oracle_accent else None
        pairs.append((alv_by_utt[u.utt_id], oracle))
    return pairs


def _divergent_words(rules: dict[str, dict[str, str]]) -> set[str]:
    dialects = sorted(rules)
    if len(dialects) != 2:
        return set()
    a, b = dialects
    return {w for w in rules[a] if rules[a][w] != rules[b].get(w)}


def _other_dialect(rules: dict[str, dict[str, str]], dialect: str) -> str:
    others = [d for d in sorted(rules) if d != dialect]
    if len(others) != 1:
        raise ConfigError(f"need exactly two dialects, rules cover {sorted(rules)}")
    return others[0]


def cd_prediction_accuracy(
    utterances: list[Utterance],
    predictor: AlvPredictor,
    input_vocab: SymbolVocab,
    rules: dict[str, dict[str, str]],
    mapping: dict[int, str],
) -> dict[str, float | int]:
    """Cross-dialect accent accuracy: predict with the non-native dialect
    token and score mapped classes against that dialect's oracle rules,
    split into divergent-word morae and all morae.

    The mora-level changed fraction is bounded by how much the two
    dialects' patterns actually disagree, so dialect-token sensitivity is
    also reported per word occurrence: an occurrence counts as changed
    when the two predictions differ at any of its morae."""
    from .evalkit import mora_majority_alv

    div_words = _divergent_words(rules)
    hits_div = total_div = hits_all = total_all = 0
    changed_div = 0
    word_occurrences = changed_occurrences = 0
    for u in utterances:
        target_dialect = _other_dialect(rules, u.dialect)
        item = TextItem(
            dialect=target_dialect,
            graphemes=tuple(u.graphemes),
            phonemes=tuple(u.phonemes),
        )
        alv, _ = predict_alv(predictor, item, input_vocab)
        native_item = TextItem(
            dialect=u.dialect, graphemes=tuple(u.graphemes), phonemes=tuple(u.phonemes)
        )
        native_alv, _ = predict_alv(predictor, native_item, input_vocab)
        mora_classes = mora_majority_alv(alv, len(mapping))
        native_mora = mora_majority_alv(native_alv, len(mapping))
        mora_idx = 0
        for word in u.graphemes:
            pattern = rules[target_dialect][word]
            word_changed = False
            for sym in pattern:
                predicted = mapping[mora_classes[mora_idx]]
                hits_all += predicted == sym
                total_all += 1
                if word in div_words:
                    hits_div += predicted == sym
                    total_div += 1
                    if mora_classes[mora_idx] != native_mora[mora_idx]:
                        changed_div += 1
                        word_changed = True
                mora_idx += 1
            if word in div_words:
                word_occurrences += 1
                changed_occurrences += word_changed
    return {
        "divergent_accuracy": hits_div / total_div if total_div else 0.0,
        "overall_accuracy": hits_all / total_all if total_all else 0.0,
        "divergent_morae": total_div,
        "divergent_changed_fraction": changed_div / total_div if total_div else 0.0,
        "divergent_words": word_occurrences,
        "divergent_word_changed_fraction": (
            changed_occurrences / word_occurrences if word_occurrences else 0.0
        ),
    }


def synthesized_mora_log_f0(output_frames: np.ndarray, durations: np.ndarray) -> np.ndarray:
    """Per-mora mean of channel 0 given per-phoneme frame counts."""
    spans = []
    start = 0
    for d in durations:
        spans.append((start, start + int(d)))
        start += int(d)
    means = []
    for m_start, m_end in mora_spans(len(durations)):
        lo = spans[m_start][0]
        hi = spans[m_end - 1][1]
        means.append(float(output_frames[lo:hi, 0].mean()))
    return np.asarray(means)


def accent_correctness_from_synthesis(
    utterances: list[Utterance],
    stage1: Stage1Artifacts,
    rules: dict[str, dict[str, str]],
    alv_for: dict[str, tuple[int, ...] | None],
) -> float:
    """Score synthesized accents against the non-native dialect's oracle
    at divergent-word morae; alv_for maps utt_id to the accent classes to
    force (None = accent-free synthesis)."""
    from .evalkit import score_accent_from_f0

    div_words = _divergent_words(rules)
    hits = total = 0
    for u in utterances:
        target_dialect = _other_dialect(rules, u.dialect)
        output = synthesize_utterance(
            stage1.backbone,
            stage1.vocab,
            stage1.speakers,
            list(u.phonemes),
            u.speaker_id,
            alv_for[u.utt_id],
        )
        frames = output.frames[0, output.frame_mask[0]].numpy()
        durations = output.durations[0].numpy()
        mora_means = synthesized_mora_log_f0(frames, durations)
        oracle = "".join(
            rules[target_dialect][w] for w in u.graphemes
        )
        correct = score_accent_from_f0(mora_means, oracle)
        mora_idx = 0
        for word in u.graphemes:
            for _ in rules[target_dialect][word]:
                if word in div_words:
                    hits += bool(correct[mora_idx])
                    total += 1
                mora_idx += 1
    return hits / total if total else 0.0


def _skipped(reason: str) -> dict[str, str]:
    return {"status": "skipped", "reason": reason}


def cmd_evaluate(run: RunConfig) -> int:
    utterances = _load_utterances(run)
    splits = _splits(run, utterances)
    out = eval_dir(run)
    out.mkdir(parents=True, exist_ok=True)
    root = str(manifest_path(run).parent)
    metrics: dict = {
        "config_hash": config_hash(run),
        "seed": run.training.seed,
    }

    have_stage1 = ckpt_path(run, "quantizer").exists() and ckpt_path(
        run, "backbone"
    ).exists()
    stage1 = None
    mapping = None
    if have_stage1:
        stage1, _ = load_stage1(run)
        provider = F0Provider(root, normalize=True)
        k = run.quantizer.codebook_size

        cal_alv = {
            u.utt_id: extract_alv(u, stage1.encoder, stage1.quantizer, provider)
            for u in splits["calibration"]
        }
        test_alv = {
            u.utt_id: extract_alv(u, stage1.encoder, stage1.quantizer, provider)
            for u in splits["test"]
        }
        mapping = fit_alv_mapping(
            _mora_oracle_pairs(splits["calibration"], cal_alv), k
        )
        accuracy, _ = alv_oracle_accuracy(
            _mora_oracle_pairs(splits["test"], test_alv), k, mapping=mapping
        )
        all_codes = [c for alv in test_alv.values() for c in alv]
        metrics["id_alv"] = {
            "status": "ok",
            "accuracy": accuracy,
            "mapping": {str(c): s for c, s in sorted(mapping.items())},
            "perplexity": perplexity(np.asarray(all_codes), k),
            "test_utterances": len(splits["test"]),
        }

        entries = [
            (
                test_alv[u.utt_id],
                resolve_frames(u, root)[:, 0],
                u.alignment,
            )
            for u in splits["test"]
        ]
        report = logf0_by_alv(entries, k)
        write_points_csv(report.points, out / "logf0_points.csv")
        write_stats_table(report.stats, out / "logf0_stats.tsv")
        metrics["logf0_by_alv"] = {
            "status": "ok",
            "class_means": {
                str(c): (s.mean if s.count else None)
                for c, s in sorted(report.stats.items())
            },
            "increasing_permutation": report.increasing_permutation,
            "min_gap": report.min_gap,
            "excluded_phonemes": report.excluded_phonemes,
        }
    else:
        metrics["id_alv"] = _skipped("stage-1 checkpoints not found")
        metrics["logf0_by_alv"] = _skipped("stage-1 checkpoints not found")

    if have_stage1 and ckpt_path(run, "predictor").exists() and rules_path(run).exists():
        predictor, input_vocab = load_predictor(run)
        rules = _load_rules(run)
        block = cd_prediction_accuracy(
            splits["test"], predictor, input_vocab, rules, mapping
        )
        p_ckpt = load_checkpoint(ckpt_path(run, "predictor"), "predictor")
        metrics["cd_alv"] = {
            "status": "ok",
            "best_val_accuracy": p_ckpt.extra.get("best_val_accuracy"),
            "from_scratch": p_ckpt.extra.get("from_scratch"),
            **block,
        }
    else:
        metrics["cd_alv"] = _skipped("predictor checkpoint or rules not found")

    if have_stage1:
        provider = F0Provider(root, normalize=True)
        embedder = DeskSpeakerEmbedder()
        per_speaker: dict[str, float] = {}
        for speaker in stage1.speakers:
            spk_test = [u for u in splits["test"] if u.speaker_id == speaker][:8]
            spk_refs = [u for u in splits["train"] if u.speaker_id == speaker][:16]
            if not spk_test or not spk_refs:
                continue
            refs = [
                (resolve_frames(u, root)[:, 0], u.alignment.durations())
                for u in spk_refs
            ]
            sims = []
            for u in spk_test:
                alv = extract_alv(u, stage1.encoder, stage1.quantizer, provider)
                output = synthesize_utterance(
                    stage1.backbone,
                    stage1.vocab,
                    stage1.speakers,
                    list(u.phonemes),
                    u.speaker_id,
                    alv,
                )
                frames = output.frames[0, output.frame_mask[0]].numpy()
                synth = (frames[:, 0], output.durations[0].numpy())
                sims.append(speaker_similarity(synth, refs, embedder))
            per_speaker[speaker] = float(np.mean(sims))
        metrics["speaker_similarity"] = {
            "status": "ok",
            "per_speaker": dict(sorted(per_speaker.items())),
            "mean": float(np.mean(list(per_speaker.values())))
            if per_speaker
            else None,
        }
    else:
        metrics["speaker_similarity"] = _skipped("stage-1 checkpoints not found")

    record_files = sorted((run.workdir / "augment").glob("records_*.jsonl"))
    if record_files:
        candidates, references = [], []
        for rf in record_files:
            for line in rf.read_text().splitlines():
                rec = json.loads(line)
                if rec.get("translated"):
                    candidates.append(rec["translated"].split())
                    references.append([rec["original"].split()])
        if candidates:
            metrics["bleu"] = {
                "status": "ok",
                "bleu4": corpus_bleu4(candidates, references),
                "sentences": len(candidates),
            }
        else:
            metrics["bleu"] = _skipped("no successful translations recorded")
    else:
        metrics["bleu"] = _skipped("no translation records found")

    validate_metrics(metrics)
    metrics_file = out / "metrics.json"
    metrics_file.write_text(json.dumps(metrics, sort_keys=True, indent=2) + "\n")
    print(f"wrote {metrics_file}")
    for key in ("id_alv", "cd_alv", "logf0_by_alv", "speaker_similarity", "bleu"):
        status = metrics[key]["status"]
        print(f"  {key}: {status}")
    return 0


def validate_metrics(metrics: dict) -> None:
    import jsonschema

    schema = json.loads(METRICS_SCHEMA_PATH.read_text())
    try:
        jsonschema.validate(metrics, schema)
    except jsonschema.ValidationError as exc:
        raise ContractError(f"metrics JSON violates the schema: {exc.message}") from exc


# ----------------------------------------------------------------- main


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="alvtts",
        description="Cross-dialect TTS with discrete accent latent variables",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name: str, help_text: str) -> argparse.ArgumentParser:
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", required=True, help="YAML run configuration")
        return p

    add("gen-corpus", "generate the synthetic two-dialect corpus")
    add("augment", "build the multi-dialect text corpus by translation")
    add("pretrain-bert", "pre-train the phoneme LM on the text corpus")
    add("train-stage1", "jointly train reference encoder, quantizer, backbone")
    p2 = add("train-stage2", "fine-tune the accent predictor")
    p2.add_argument(
        "--from-scratch",
        action="store_true",
        help="skip the pre-trained LM initialization",
    )
    ps = add("synthesize", "synthesize one sentence")
    ps.add_argument("--text", required=True, help="space-separated words")
    ps.add_argument("--speaker", required=True)
    ps.add_argument("--dialect", default="", help="dialect token for predicted mode")
    ps.add_argument(
        "--mode",
        choices=["predicted_alv", "reference_alv", "no_alv"],
        default="predicted_alv",
    )
    ps.add_argument("--ref-utt", default="", help="reference utterance id")
    ps.add_argument("--out", default="", help="output directory")
    ps.add_argument("--name", default="", help="output file stem")
    ps.add_argument("--wav", action="store_true", help="also render a WAV")
    px = add("extract-alv", "extract accent classes from reference speech")
    px.add_argument("--utt-id", default="", help="one utterance (default: all)")
    px.add_argument("--out", default="", help="write JSON here instead of stdout")
    add("evaluate", "compute objective metrics into metrics.json")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        run = load_run_config(args.config)
        if args.command == "gen-corpus":
            return cmd_gen_corpus(run)
        if args.command == "augment":
            return cmd_augment(run)
        if args.command == "pretrain-bert":
            return cmd_pretrain_bert(run)
        if args.command == "train-stage1":
            return cmd_train_stage1(run)
        if args.command == "train-stage2":
            return cmd_train_stage2(run, args.from_scratch)
        if args.command == "synthesize":
            return cmd_synthesize(run, args)
        if args.command == "extract-alv":
            return cmd_extract_alv(run, args)
        if args.command == "evaluate":
            return cmd_evaluate(run)
        raise ConfigError(f"unknown command {args.command!r}")
    except DivergenceError as exc:
        print(f"divergence: {exc}", file=sys.stderr)
        return 4
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return 2
    except ContractError as exc:
        print(f"contract violation: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
