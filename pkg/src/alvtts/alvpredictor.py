"""Per-phoneme accent class prediction from text and a dialect token.

A linear head over the masked-LM encoder's hidden states scores the
accent classes at every position. Targets come from the quantizer side
of the trained synthesis stack, so this module turns text into the same
discrete space the acoustic model consumes.
"""

from __future__ import annotations

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from .errors import LengthError, ShapeError
from .mdplbert import IGNORE_INDEX, PhonemeBert, SymbolVocab, TextItem, dialect_token

PROB_FLOOR = 1e-9


class AlvPredictor(nn.Module):
    def __init__(self, bert: PhonemeBert, codebook_size: int = 4):
        super().__init__()
        self.bert = bert
        self.codebook_size = codebook_size
        self.alv_head = nn.Linear(bert.config.width, codebook_size)

    def forward(
        self, ids: torch.Tensor, mask: torch.Tensor | None = None
    ) -> torch.Tensor:
        """Accent logits (B, L, K) over the full token layout, position 0
        included; callers ignore it via the target layout."""
        h = self.bert.encode(ids, mask)
        return self.alv_head(h)


def alv_celoss(logits: torch.Tensor, targets: torch.Tensor) -> torch.Tensor:
    """Mean cross entropy over positions whose target is not IGNORE_INDEX."""
    return F.cross_entropy(
        logits.reshape(-1, logits.shape[-1]),
        targets.reshape(-1),
        ignore_index=IGNORE_INDEX,
    )


def celoss(
    z: torch.Tensor | list[int] | tuple[int, ...] | np.ndarray,
    zhat: torch.Tensor | np.ndarray,
) -> torch.Tensor:
    """Mean over positions of -log zhat[p][z[p]].

    ``z`` is a length-P index sequence, ``zhat`` a P x K row-stochastic
    matrix. Probabilities are floored at 1e-9 so a zero at the target
    stays finite.
    """
    if not isinstance(zhat, torch.Tensor):
        zhat = torch.as_tensor(np.asarray(zhat))
    if not isinstance(z, torch.Tensor):
        z = torch.as_tensor(np.asarray(z, dtype=np.int64))
    if zhat.dim() != 2 or z.dim() != 1 or z.shape[0] != zhat.shape[0]:
        raise ShapeError(
            f"need length-P indices and P x K rows, got {tuple(z.shape)} "
            f"and {tuple(zhat.shape)}"
        )
    picked = zhat[torch.arange(zhat.shape[0]), z]
    return -torch.log(picked.clamp(min=PROB_FLOOR)).mean()


def encode_input(item: TextItem, input_vocab: SymbolVocab) -> list[int]:
    """Token ids for prediction: dialect token then phonemes."""
    return [input_vocab.id(dialect_token(item.dialect))] + input_vocab.encode(
        item.phonemes
    )


def alv_target_row(alv_indices: tuple[int, ...] | list[int]) -> list[int]:
    """Target layout matching encode_input: dialect position ignored."""
    return [IGNORE_INDEX] + [int(i) for i in alv_indices]


def predict_alv(
    predictor: AlvPredictor, item: TextItem, input_vocab: SymbolVocab
) -> tuple[tuple[int, ...], np.ndarray]:
    """Accent classes per phoneme plus the P x K probability rows the
    argmax was taken over (dialect position dropped, ties to lowest
    index via argmax convention)."""
    ids = encode_input(item, input_vocab)
    if len(ids) > predictor.bert.config.max_len:
        raise LengthError(
            f"sequence of {len(ids)} exceeds model max_len "
            f"{predictor.bert.config.max_len}"
        )
    was_training = predictor.training
    predictor.eval()
    try:
        with torch.no_grad():
            logits = predictor(torch.tensor([ids], dtype=torch.long))
            probs = torch.softmax(logits[0, 1:], dim=-1)
    finally:
        predictor.train(was_training)
    picks = tuple(int(i) for i in probs.argmax(dim=-1))
    return picks, probs.numpy()
