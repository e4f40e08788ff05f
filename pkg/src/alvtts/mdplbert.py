"""Dialect-conditioned masked phoneme LM over text-only corpora.

Inputs are phoneme sequences with a dialect token prepended at position
0; that token is never maskable. Pretraining optimizes two heads: cross
entropy on masked phonemes and per-position cross entropy on the word
(grapheme token) each phoneme belongs to. The encoder's hidden states
later feed the accent predictor.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from .backbone import sinusoidal_positions
from .corpus import Utterance
from .errors import (
    AlignmentError,
    ConfigError,
    LengthError,
    ManifestError,
    OOVError,
    VocabularyError,
)

PAD = "<pad>"
MASK = "<mask>"


def dialect_token(dialect: str) -> str:
    return f"<dl:{dialect}>"


@dataclass(frozen=True)
class SymbolVocab:
    symbols: tuple[str, ...]

    def __post_init__(self) -> None:
        if len(set(self.symbols)) != len(self.symbols):
            raise VocabularyError("duplicate symbols in vocabulary")
        object.__setattr__(
            self, "_index", {s: i for i, s in enumerate(self.symbols)}
        )

    def __len__(self) -> int:
        return len(self.symbols)

    def id(self, symbol: str) -> int:
        try:
            return self._index[symbol]
        except KeyError:
            raise OOVError(f"symbol {symbol!r} not in vocabulary") from None

    def encode(self, seq: Sequence[str]) -> list[int]:
        return [self.id(s) for s in seq]

    def decode(self, ids: Sequence[int]) -> tuple[str, ...]:
        try:
            return tuple(self.symbols[i] for i in ids)
        except IndexError:
            raise VocabularyError(f"id out of range for vocabulary of {len(self)}") from None

    @property
    def pad_id(self) -> int:
        return self.id(PAD)

    @property
    def mask_id(self) -> int:
        return self.id(MASK)


def build_input_vocab(
    phoneme_symbols: Iterable[str], dialects: Iterable[str]
) -> SymbolVocab:
    """pad + mask + dialect tokens + phonemes, each block sorted."""
    return SymbolVocab(
        (PAD, MASK)
        + tuple(dialect_token(d) for d in sorted(set(dialects)))
        + tuple(sorted(set(phoneme_symbols)))
    )


def build_grapheme_vocab(words: Iterable[str]) -> SymbolVocab:
    return SymbolVocab((PAD,) + tuple(sorted(set(words))))


def phoneme_ids(vocab: SymbolVocab) -> list[int]:
    """Ids of real phoneme symbols (excludes pad/mask/dialect tokens)."""
    return [
        i
        for i, s in enumerate(vocab.symbols)
        if not (s.startswith("<") and s.endswith(">"))
    ]


@dataclass(frozen=True)
class TextItem:
    """One text-only training sentence."""

    dialect: str
    graphemes: tuple[str, ...]
    phonemes: tuple[str, ...]

    def validate(self) -> None:
        if sum(len(w) for w in self.graphemes) != len(self.phonemes):
            raise AlignmentError(
                f"word spellings cover {sum(len(w) for w in self.graphemes)} "
                f"phonemes but sequence has {len(self.phonemes)}"
            )


def text_items_from_utterances(utterances: Iterable[Utterance]) -> list[TextItem]:
    items = []
    for u in utterances:
        item = TextItem(u.dialect, u.graphemes, u.phonemes)
        item.validate()
        items.append(item)
    return items


def save_text_corpus(items: Sequence[TextItem], path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = [
        "\t".join((it.dialect, " ".join(it.graphemes), " ".join(it.phonemes)))
        for it in items
    ]
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_text_corpus(path: str | Path) -> list[TextItem]:
    items: list[TextItem] = []
    with open(path, encoding="utf-8") as f:
        for line_no, line in enumerate(f, start=1):
            line = line.rstrip("\n")
            if not line:
                continue
            fields = line.split("\t")
            if len(fields) != 3:
                raise ManifestError(
                    f"line {line_no}: expected 3 tab-separated fields, got {len(fields)}"
                )
            item = TextItem(fields[0], tuple(fields[1].split()), tuple(fields[2].split()))
            try:
                item.validate()
            except AlignmentError as exc:
                raise ManifestError(f"line {line_no}: {exc}") from exc
            items.append(item)
    return items


def encode_item(
    item: TextItem, input_vocab: SymbolVocab, grapheme_vocab: SymbolVocab
) -> tuple[list[int], list[int]]:
    """Return (input_ids, grapheme_target_ids), both length 1 + P.

    Position 0 holds the dialect token; its grapheme target is pad (the
    grapheme loss skips it). Every phoneme position's grapheme target is
    the word it belongs to.
    """
    item.validate()
    ids = [input_vocab.id(dialect_token(item.dialect))]
    ids.extend(input_vocab.encode(item.phonemes))
    g_ids = [grapheme_vocab.pad_id]
    for w in item.graphemes:
        g_ids.extend([grapheme_vocab.id(w)] * len(w))
    return ids, g_ids


@dataclass(frozen=True)
class MaskingPolicy:
    mask_ratio: float = 0.15
    replace_mask_prob: float = 0.8
    replace_random_prob: float = 0.1
    keep_prob: float = 0.1

    def validate(self) -> None:
        total = self.replace_mask_prob + self.replace_random_prob + self.keep_prob
        if abs(total - 1.0) > 1e-9:
            raise ConfigError(f"corruption probabilities sum to {total}, not 1")
        if not 0.0 < self.mask_ratio < 1.0:
            raise ConfigError(f"mask_ratio {self.mask_ratio} outside (0, 1)")


def apply_masking(
    input_ids: Sequence[int],
    input_vocab: SymbolVocab,
    rng: np.random.Generator,
    policy: MaskingPolicy = MaskingPolicy(),
) -> tuple[list[int], list[int], list[int]]:
    """BERT-style corruption of ceil(mask_ratio * (L - 1)) positions.

    Position 0 (the dialect token) is exempt. Each selected position is
    replaced by the mask token, by a uniformly chosen different phoneme,
    or kept as-is, per the policy probabilities (default 0.8/0.1/0.1).
    Returns (corrupted_ids, sorted selected positions, original labels).
    """
    policy.validate()
    l = len(input_ids)
    if l < 2:
        raise LengthError("need at least one phoneme position to mask")
    n_mask = math.ceil(policy.mask_ratio * (l - 1))
    chosen = sorted(rng.choice(np.arange(1, l), size=n_mask, replace=False).tolist())
    corrupted = list(input_ids)
    candidates = phoneme_ids(input_vocab)
    for pos in chosen:
        roll = rng.random()
        if roll < policy.replace_mask_prob:
            corrupted[pos] = input_vocab.mask_id
        elif roll < policy.replace_mask_prob + policy.replace_random_prob:
            alternatives = [c for c in candidates if c != input_ids[pos]]
            corrupted[pos] = int(alternatives[rng.integers(0, len(alternatives))])
        # else: keep the original token
    labels = [input_ids[pos] for pos in chosen]
    return corrupted, chosen, labels


@dataclass
class BertConfig:
    vocab_size: int
    grapheme_vocab_size: int
    width: int = 64
    layers: int = 2
    heads: int = 2
    ff_dim: int = 128
    dropout: float = 0.0
    max_len: int = 64


class PhonemeBert(nn.Module):
    def __init__(self, config: BertConfig):
        super().__init__()
        self.config = config
        self.token_emb = nn.Embedding(config.vocab_size, config.width)
        layer = nn.TransformerEncoderLayer(
            d_model=config.width,
            nhead=config.heads,
            dim_feedforward=config.ff_dim,
            dropout=config.dropout,
            batch_first=True,
        )
        self.encoder = nn.TransformerEncoder(
            layer, config.layers, enable_nested_tensor=False
        )
        self.phoneme_head = nn.Linear(config.width, config.vocab_size)
        self.grapheme_head = nn.Linear(config.width, config.grapheme_vocab_size)
        self.register_buffer(
            "pos_table",
            sinusoidal_positions(config.max_len, config.width),
            persistent=False,
        )

    def encode(
        self, ids: torch.Tensor, mask: torch.Tensor | None = None
    ) -> torch.Tensor:
        """Hidden states (B, L, W); mask True = valid."""
        b, l = ids.shape
        if l > self.config.max_len:
            raise LengthError(
                f"sequence of {l} exceeds model max_len {self.config.max_len}"
            )
        if mask is None:
            mask = torch.ones(b, l, dtype=torch.bool, device=ids.device)
        x = self.token_emb(ids) + self.pos_table[:l]
        h = self.encoder(x, src_key_padding_mask=~mask)
        return h.masked_fill(~mask.unsqueeze(-1), 0.0)

    def forward(
        self, ids: torch.Tensor, mask: torch.Tensor | None = None
    ) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
        h = self.encode(ids, mask)
        return h, self.phoneme_head(h), self.grapheme_head(h)


IGNORE_INDEX = -100


def mlm_loss(
    phoneme_logits: torch.Tensor,
    grapheme_logits: torch.Tensor,
    phoneme_targets: torch.Tensor,
    grapheme_targets: torch.Tensor,
) -> dict[str, torch.Tensor]:
    """Masked-phoneme CE + per-position grapheme CE, both mean-reduced
    over their labelled positions (IGNORE_INDEX elsewhere). A term with
    no labelled positions is 0 by convention.
    """

    def term(logits: torch.Tensor, targets: torch.Tensor) -> torch.Tensor:
        if (targets != IGNORE_INDEX).sum() == 0:
            return logits.sum() * 0.0
        return F.cross_entropy(
            logits.reshape(-1, logits.shape[-1]),
            targets.reshape(-1),
            ignore_index=IGNORE_INDEX,
        )

    ph = term(phoneme_logits, phoneme_targets)
    gr = term(grapheme_logits, grapheme_targets)
    return {"phoneme_ce": ph, "grapheme_ce": gr, "total": ph + gr}
