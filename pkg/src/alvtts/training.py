"""Training loops: stage-1 joint quantizer+backbone optimization,
phoneme-LM pre-training, and stage-2 accent-predictor fine-tuning.

All loops share the same skeleton: seeded setup, Adam with a linear
warmup/decay schedule, fixed iteration budgets, and non-finite loss
detection. Determinism per (config, seed) is a hard contract here; no
loop reads wall-clock time or unordered collections.
"""

from __future__ import annotations

import copy
import random
from dataclasses import dataclass, field

import numpy as np
import torch

from .alvpredictor import AlvPredictor, alv_celoss, alv_target_row, encode_input
from .backbone import (
    AcousticModel,
    AcousticOutput,
    BackboneConfig,
    build_frame_targets,
    log_duration_targets,
    phoneme_pitch_targets,
    tts_loss,
)
from .config import RunConfig, StageSection
from .corpus import Utterance
from .errors import ConfigError, DivergenceError, VocabularyError
from .features import F0Provider, FeatureProvider, phoneme_features
from .mdplbert import (
    IGNORE_INDEX,
    BertConfig,
    MaskingPolicy,
    PhonemeBert,
    SymbolVocab,
    TextItem,
    apply_masking,
    build_grapheme_vocab,
    build_input_vocab,
    encode_item,
    mlm_loss,
)
from .quantizer import ReferenceEncoder, VectorQuantizer, extract_alv


def seed_all(seed: int) -> np.random.Generator:
    """Seed every RNG a training loop touches; returns the numpy one."""
    random.seed(seed)
    torch.manual_seed(seed)
    return np.random.default_rng(seed)


def lr_at(step: int, base_lr: float, warmup: int, total: int) -> float:
    """Linear warmup then linear decay, clipped at zero.

    ``step`` counts from 1. Peak base_lr is reached exactly at
    step == warmup.
    """
    if warmup < 1:
        raise ConfigError("warmup must be >= 1")
    if total <= warmup:
        raise ConfigError(
            f"total steps ({total}) must exceed warmup ({warmup})"
        )
    factor = min(step / warmup, 1.0 - (step - warmup) / (total - warmup))
    return base_lr * max(0.0, factor)


def dedup_params(modules: list[torch.nn.Module]) -> list[torch.nn.Parameter]:
    """Unique parameters across modules. The accent table is the same
    Parameter object in the quantizer and the backbone; handing it to
    Adam twice would double its update."""
    seen: set[int] = set()
    out: list[torch.nn.Parameter] = []
    for module in modules:
        for p in module.parameters():
            if id(p) not in seen:
                seen.add(id(p))
                out.append(p)
    return out


def split_utterances(
    utterances: list[Utterance],
    seed: int,
    val_fraction: float = 0.1,
    test_fraction: float = 0.1,
    calibration_fraction: float = 0.1,
) -> dict[str, list[Utterance]]:
    """Deterministic train/val/test/calibration split.

    Sorts by utt_id first so the split depends only on corpus content
    and seed, not on manifest ordering.
    """
    ordered = sorted(utterances, key=lambda u: u.utt_id)
    rng = np.random.default_rng(seed)
    perm = rng.permutation(len(ordered))
    shuffled = [ordered[i] for i in perm]
    n = len(shuffled)
    n_test = int(test_fraction * n)
    n_val = int(val_fraction * n)
    n_cal = int(calibration_fraction * n)
    if n - n_test - n_val - n_cal < 1:
        raise ConfigError("split fractions leave no training utterances")
    splits = {
        "test": shuffled[:n_test],
        "val": shuffled[n_test : n_test + n_val],
        "calibration": shuffled[n_test + n_val : n_test + n_val + n_cal],
        "train": shuffled[n_test + n_val + n_cal :],
    }
    return splits


class BatchSampler:
    """Seeded, epoch-shuffled fixed-size batch index stream."""

    def __init__(self, n: int, batch_size: int, rng: np.random.Generator):
        if n < 1:
            raise ConfigError("no examples to sample from")
        self.n = n
        self.batch_size = min(batch_size, n)
        self.rng = rng
        self._queue: list[int] = []

    def next(self) -> list[int]:
        if len(self._queue) < self.batch_size:
            self._queue = list(self.rng.permutation(self.n))
        batch = self._queue[: self.batch_size]
        del self._queue[: self.batch_size]
        return batch


@dataclass
class Stage1Example:
    phonemes: torch.Tensor      # (P,) long
    speaker: int
    pooled: torch.Tensor        # (P, D_in) float, reference-encoder input
    frames: torch.Tensor        # (T, out_dim) float, synthesis target
    log_dur: torch.Tensor       # (P,) float
    pitch: torch.Tensor         # (P,) float
    durations: torch.Tensor     # (P,) long


def speaker_index(speakers: list[str], speaker_id: str) -> int:
    try:
        return speakers.index(speaker_id)
    except ValueError:
        raise VocabularyError(
            f"unknown speaker {speaker_id!r}; trained speakers: {speakers}"
        ) from None


def make_stage1_example(
    utterance: Utterance,
    vocab: SymbolVocab,
    speakers: list[str],
    encoder_provider: FeatureProvider,
    target_provider: FeatureProvider,
) -> Stage1Example:
    return Stage1Example(
        phonemes=torch.tensor(vocab.encode(utterance.phonemes), dtype=torch.long),
        speaker=speaker_index(speakers, utterance.speaker_id),
        pooled=torch.from_numpy(
            np.asarray(phoneme_features(utterance, encoder_provider), dtype=np.float32)
        ),
        frames=torch.from_numpy(build_frame_targets(utterance, target_provider)),
        log_dur=torch.from_numpy(log_duration_targets(utterance)),
        pitch=torch.from_numpy(
            np.asarray(phoneme_pitch_targets(utterance, target_provider))
        ),
        durations=torch.from_numpy(utterance.alignment.durations()),
    )


def collate_stage1(examples: list[Stage1Example]) -> dict[str, torch.Tensor]:
    b = len(examples)
    p_max = max(e.phonemes.shape[0] for e in examples)
    t_max = max(e.frames.shape[0] for e in examples)
    d_in = examples[0].pooled.shape[1]
    out_dim = examples[0].frames.shape[1]
    batch = {
        "phonemes": torch.zeros(b, p_max, dtype=torch.long),
        "speaker": torch.tensor([e.speaker for e in examples], dtype=torch.long),
        "pooled": torch.zeros(b, p_max, d_in),
        "frames": torch.zeros(b, t_max, out_dim),
        "log_dur": torch.zeros(b, p_max),
        "pitch": torch.zeros(b, p_max),
        "durations": torch.zeros(b, p_max, dtype=torch.long),
        "src_mask": torch.zeros(b, p_max, dtype=torch.bool),
    }
    for i, e in enumerate(examples):
        p, t = e.phonemes.shape[0], e.frames.shape[0]
        batch["phonemes"][i, :p] = e.phonemes
        batch["pooled"][i, :p] = e.pooled
        batch["frames"][i, :t] = e.frames
        batch["log_dur"][i, :p] = e.log_dur
        batch["pitch"][i, :p] = e.pitch
        batch["durations"][i, :p] = e.durations
        batch["src_mask"][i, :p] = True
    return batch


@dataclass
class Stage1Artifacts:
    encoder: ReferenceEncoder
    quantizer: VectorQuantizer
    backbone: AcousticModel
    vocab: SymbolVocab
    speakers: list[str]
    history: list[float] = field(default_factory=list)


def build_stage1_modules(
    run: RunConfig, vocab: SymbolVocab, speakers: list[str]
) -> tuple[ReferenceEncoder, VectorQuantizer, AcousticModel]:
    q = run.quantizer
    encoder = ReferenceEncoder(input_dim=q.input_dim, width=q.width)
    quantizer = VectorQuantizer(
        codebook_size=q.codebook_size,
        width=q.width,
        commitment_weight=q.commitment_weight,
    )
    bb = run.backbone
    backbone_cfg = BackboneConfig(
        vocab_size=len(vocab.symbols),
        n_speakers=len(speakers),
        codebook_size=q.codebook_size,
        width=bb.width,
        layers=bb.layers,
        heads=bb.heads,
        ff_dim=bb.ff_dim,
        dropout=bb.dropout,
        max_len=bb.max_len,
    )
    backbone = AcousticModel(backbone_cfg, alv_table=quantizer.codebook)
    return encoder, quantizer, backbone


def corpus_vocab(utterances: list[Utterance]) -> SymbolVocab:
    phonemes = sorted({p for u in utterances for p in u.phonemes})
    dialects = sorted({u.dialect for u in utterances})
    return build_input_vocab(phonemes, dialects)


def corpus_speakers(utterances: list[Utterance]) -> list[str]:
    return sorted({u.speaker_id for u in utterances})


def _schedule_step(
    optimizer: torch.optim.Optimizer,
    step: int,
    stage: StageSection,
    warmup: int,
) -> None:
    lr = lr_at(step, stage.lr, warmup, max(stage.iterations, warmup + 1))
    for group in optimizer.param_groups:
        group["lr"] = lr


def train_stage1(
    train_utts: list[Utterance],
    run: RunConfig,
    feature_root: str | None = None,
    vocab: SymbolVocab | None = None,
    speakers: list[str] | None = None,
) -> Stage1Artifacts:
    """Jointly optimize reference encoder, quantizer, and backbone on
    tts_loss + vq_loss with straight-through accent vectors."""
    stage = run.training.stage1
    rng = seed_all(run.training.seed)
    vocab = vocab or corpus_vocab(train_utts)
    speakers = speakers or corpus_speakers(train_utts)
    encoder, quantizer, backbone = build_stage1_modules(run, vocab, speakers)

    encoder_provider = F0Provider(feature_root, normalize=True)
    target_provider = F0Provider(feature_root, normalize=False)
    examples = [
        make_stage1_example(u, vocab, speakers, encoder_provider, target_provider)
        for u in train_utts
    ]
    params = dedup_params([encoder, quantizer, backbone])
    optimizer = torch.optim.Adam(params, lr=stage.lr)
    sampler = BatchSampler(len(examples), stage.batch_size, rng)
    history: list[float] = []
    for step in range(1, stage.iterations + 1):
        batch = collate_stage1([examples[i] for i in sampler.next()])
        src_mask = batch["src_mask"]
        z_e = encoder(batch["pooled"], mask=src_mask)
        st, _, vq_losses = quantizer(z_e, mask=src_mask)
        st = st * src_mask.unsqueeze(-1)
        output = backbone(
            batch["phonemes"],
            alv=st,
            speaker=batch["speaker"],
            src_mask=src_mask,
            durations=batch["durations"],
            pitch_target=batch["pitch"],
        )
        losses = tts_loss(
            output, batch["frames"], batch["log_dur"], batch["pitch"], src_mask
        )
        total = losses["total"] + vq_losses["total"]
        if not torch.isfinite(total):
            raise DivergenceError(
                f"stage-1 loss became non-finite at step {step}: "
                f"tts={losses['total'].item()}, vq={vq_losses['total'].item()}"
            )
        optimizer.zero_grad()
        total.backward()
        _schedule_step(optimizer, step, stage, run.training.warmup)
        optimizer.step()
        history.append(float(total.item()))
    return Stage1Artifacts(encoder, quantizer, backbone, vocab, speakers, history)


def _pad_rows(
    rows: list[list[int]], pad_value: int, length: int | None = None
) -> torch.Tensor:
    l_max = length if length is not None else max(len(r) for r in rows)
    out = torch.full((len(rows), l_max), pad_value, dtype=torch.long)
    for i, r in enumerate(rows):
        out[i, : len(r)] = torch.tensor(r, dtype=torch.long)
    return out


def _length_mask(rows: list[list[int]], length: int | None = None) -> torch.Tensor:
    l_max = length if length is not None else max(len(r) for r in rows)
    mask = torch.zeros(len(rows), l_max, dtype=torch.bool)
    for i, r in enumerate(rows):
        mask[i, : len(r)] = True
    return mask


@dataclass
class BertArtifacts:
    bert: PhonemeBert
    input_vocab: SymbolVocab
    grapheme_vocab: SymbolVocab
    history: list[float] = field(default_factory=list)


def text_corpus_vocabs(items: list[TextItem]) -> tuple[SymbolVocab, SymbolVocab]:
    phonemes = sorted({p for it in items for p in it.phonemes})
    dialects = sorted({it.dialect for it in items})
    words = sorted({w for it in items for w in it.graphemes})
    return build_input_vocab(phonemes, dialects), build_grapheme_vocab(words)


def pretrain_bert(
    items: list[TextItem],
    run: RunConfig,
    input_vocab: SymbolVocab | None = None,
    grapheme_vocab: SymbolVocab | None = None,
) -> BertArtifacts:
    """Masked phoneme modeling plus per-position grapheme prediction."""
    stage = run.training.bert
    rng = seed_all(run.training.seed)
    if input_vocab is None or grapheme_vocab is None:
        input_vocab, grapheme_vocab = text_corpus_vocabs(items)
    cfg = run.bert
    bert = PhonemeBert(
        BertConfig(
            vocab_size=len(input_vocab.symbols),
            grapheme_vocab_size=len(grapheme_vocab.symbols),
            width=cfg.width,
            layers=cfg.layers,
            heads=cfg.heads,
            ff_dim=cfg.ff_dim,
            dropout=cfg.dropout,
            max_len=cfg.max_len,
        )
    )
    policy = MaskingPolicy(mask_ratio=cfg.mask_ratio)
    encoded = [encode_item(it, input_vocab, grapheme_vocab) for it in items]
    optimizer = torch.optim.Adam(bert.parameters(), lr=stage.lr)
    sampler = BatchSampler(len(encoded), stage.batch_size, rng)
    history: list[float] = []
    for step in range(1, stage.iterations + 1):
        ids_rows, ph_rows, gr_rows = [], [], []
        for i in sampler.next():
            ids, g_ids = encoded[i]
            corrupted, positions, labels = apply_masking(
                ids, input_vocab, rng, policy
            )
            ph_target = [IGNORE_INDEX] * len(ids)
            for pos, lab in zip(positions, labels):
                ph_target[pos] = lab
            # dialect position carries no grapheme
            gr_target = [IGNORE_INDEX] + list(g_ids[1:])
            ids_rows.append(corrupted)
            ph_rows.append(ph_target)
            gr_rows.append(gr_target)
        ids_t = _pad_rows(ids_rows, input_vocab.pad_id)
        mask = _length_mask(ids_rows)
        ph_t = _pad_rows(ph_rows, IGNORE_INDEX, ids_t.shape[1])
        gr_t = _pad_rows(gr_rows, IGNORE_INDEX, ids_t.shape[1])
        _, ph_logits, gr_logits = bert(ids_t, mask)
        losses = mlm_loss(ph_logits, gr_logits, ph_t, gr_t)
        if not torch.isfinite(losses["total"]):
            raise DivergenceError(
                f"bert pre-training loss became non-finite at step {step}"
            )
        optimizer.zero_grad()
        losses["total"].backward()
        _schedule_step(optimizer, step, stage, run.training.warmup)
        optimizer.step()
        history.append(float(losses["total"].item()))
    return BertArtifacts(bert, input_vocab, grapheme_vocab, history)


def cache_alv_targets(
    utterances: list[Utterance],
    encoder: ReferenceEncoder,
    quantizer: VectorQuantizer,
    provider: FeatureProvider,
) -> dict[str, tuple[int, ...]]:
    """Frozen-quantizer accent classes per utterance, extracted once."""
    return {
        u.utt_id: extract_alv(u, encoder, quantizer, provider) for u in utterances
    }


@dataclass
class Stage2Artifacts:
    predictor: AlvPredictor
    history: list[float] = field(default_factory=list)
    val_history: list[tuple[int, float]] = field(default_factory=list)
    best_val_accuracy: float = 0.0
    best_step: int = 0


def predictor_accuracy(
    predictor: AlvPredictor,
    pairs: list[tuple[list[int], list[int]]],
    batch_size: int = 64,
) -> float:
    """Fraction of labelled positions predicted exactly."""
    was_training = predictor.training
    predictor.eval()
    hits = total = 0
    try:
        with torch.no_grad():
            for start in range(0, len(pairs), batch_size):
                chunk = pairs[start : start + batch_size]
                ids_t = _pad_rows([c[0] for c in chunk], 0)
                mask = _length_mask([c[0] for c in chunk])
                targets = _pad_rows([c[1] for c in chunk], IGNORE_INDEX, ids_t.shape[1])
                logits = predictor(ids_t, mask)
                picks = logits.argmax(dim=-1)
                labelled = targets != IGNORE_INDEX
                hits += int((picks[labelled] == targets[labelled]).sum())
                total += int(labelled.sum())
    finally:
        predictor.train(was_training)
    return hits / total if total else 0.0


def finetune_predictor(
    train_pairs: list[tuple[TextItem, tuple[int, ...]]],
    val_pairs: list[tuple[TextItem, tuple[int, ...]]],
    run: RunConfig,
    input_vocab: SymbolVocab,
    bert_state: dict | None,
    grapheme_vocab_size: int,
) -> Stage2Artifacts:
    """Train the accent head (and the underlying encoder) on frozen
    stage-1 accent targets; keep the best-validation state.

    ``bert_state=None`` is the from-scratch ablation: the text encoder
    starts at random initialization instead of pre-trained weights.
    """
    stage = run.training.stage2
    rng = seed_all(run.training.seed)
    cfg = run.bert
    bert = PhonemeBert(
        BertConfig(
            vocab_size=len(input_vocab.symbols),
            grapheme_vocab_size=grapheme_vocab_size,
            width=cfg.width,
            layers=cfg.layers,
            heads=cfg.heads,
            ff_dim=cfg.ff_dim,
            dropout=cfg.dropout,
            max_len=cfg.max_len,
        )
    )
    if bert_state is not None:
        bert.load_state_dict(bert_state)
    predictor = AlvPredictor(bert, codebook_size=run.quantizer.codebook_size)

    def encode_pair(item: TextItem, alv: tuple[int, ...]) -> tuple[list[int], list[int]]:
        return encode_input(item, input_vocab), alv_target_row(alv)

    train_enc = [encode_pair(it, alv) for it, alv in train_pairs]
    val_enc = [encode_pair(it, alv) for it, alv in val_pairs]

    optimizer = torch.optim.Adam(predictor.parameters(), lr=stage.lr)
    sampler = BatchSampler(len(train_enc), stage.batch_size, rng)
    history: list[float] = []
    val_history: list[tuple[int, float]] = []
    best_state = copy.deepcopy(predictor.state_dict())
    best_acc = predictor_accuracy(predictor, val_enc) if val_enc else 0.0
    best_step = 0
    for step in range(1, stage.iterations + 1):
        chunk = [train_enc[i] for i in sampler.next()]
        ids_t = _pad_rows([c[0] for c in chunk], input_vocab.pad_id)
        mask = _length_mask([c[0] for c in chunk])
        targets = _pad_rows([c[1] for c in chunk], IGNORE_INDEX, ids_t.shape[1])
        logits = predictor(ids_t, mask)
        loss = alv_celoss(logits, targets)
        if not torch.isfinite(loss):
            raise DivergenceError(
                f"stage-2 loss became non-finite at step {step}"
            )
        optimizer.zero_grad()
        loss.backward()
        _schedule_step(optimizer, step, stage, run.training.warmup)
        optimizer.step()
        history.append(float(loss.item()))
        at_eval = step % run.training.eval_every == 0 or step == stage.iterations
        if val_enc and at_eval:
            acc = predictor_accuracy(predictor, val_enc)
            val_history.append((step, acc))
            if acc > best_acc:
                best_acc = acc
                best_step = step
                best_state = copy.deepcopy(predictor.state_dict())
    predictor.load_state_dict(best_state)
    return Stage2Artifacts(predictor, history, val_history, best_acc, best_step)


def synthesize_utterance(
    backbone: AcousticModel,
    vocab: SymbolVocab,
    speakers: list[str],
    phonemes: list[str],
    speaker_id: str,
    alv: tuple[int, ...] | None,
    durations: np.ndarray | None = None,
) -> AcousticOutput:
    """Free-run (or duration-forced) synthesis of one utterance."""
    idx = speaker_index(speakers, speaker_id)
    ids = torch.tensor([vocab.encode(phonemes)], dtype=torch.long)
    spk = torch.tensor([idx], dtype=torch.long)
    alv_t = None
    if alv is not None:
        alv_t = torch.tensor([list(alv)], dtype=torch.long)
    dur_t = None
    if durations is not None:
        dur_t = torch.from_numpy(np.asarray(durations, dtype=np.int64)).unsqueeze(0)
    was_training = backbone.training
    backbone.eval()
    try:
        with torch.no_grad():
            return backbone(ids, alv=alv_t, speaker=spk, durations=dur_t)
    finally:
        backbone.train(was_training)
