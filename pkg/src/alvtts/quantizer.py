"""Reference encoder and vector quantizer for accent latent variables.

The encoder maps per-phoneme pooled prosody features to continuous
latents; the quantizer snaps each latent to the nearest codebook entry,
yielding one discrete accent class per phoneme. Gradients pass through
the quantization step via the straight-through estimator, and the
codebook doubles as the accent embedding table of the acoustic model.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .corpus import Utterance
from .errors import NumericError, ShapeError
from .features import FeatureProvider, phoneme_features


# Fixed initialization seeds, independent of the run seed. The codebook
# cannot revive dead codes, so which codes start alive is decided entirely
# by the initial encoder/codebook geometry; drawing both from fixed
# generators makes that geometry a constant of the artifact instead of a
# per-run gamble.
ENCODER_INIT_SEED = 28
CODEBOOK_INIT_SEED = 11


@dataclass
class QuantizerConfig:
    input_dim: int = 1
    width: int = 256
    codebook_size: int = 4
    commitment_weight: float = 4.0


class ReferenceEncoder(nn.Module):
    """Linear projection followed by two kernel-3 Conv1d layers.

    ReLU sits after the first conv only. Padded positions are re-zeroed
    after every stage so batched and unbatched runs agree exactly on the
    valid positions despite the kernel-3 receptive field.
    """

    def __init__(self, input_dim: int = 1, width: int = 256):
        super().__init__()
        self.proj = nn.Linear(input_dim, width)
        self.conv1 = nn.Conv1d(width, width, kernel_size=3, stride=1, padding=1)
        self.conv2 = nn.Conv1d(width, width, kernel_size=3, stride=1, padding=1)
        # Redraw weights from a fixed generator and zero the output bias.
        # A constant output offset parks all initial latents deep inside
        # one code's cell; centering them lets several codes claim
        # positions from the first step, which matters because dead codes
        # never revive.
        gen = torch.Generator().manual_seed(ENCODER_INIT_SEED)
        with torch.no_grad():
            for module in (self.proj, self.conv1, self.conv2):
                fan_in = module.weight.shape[1] * (
                    module.weight.shape[2] if module.weight.dim() == 3 else 1
                )
                bound = 1.0 / fan_in**0.5
                module.weight.uniform_(-bound, bound, generator=gen)
                module.bias.uniform_(-bound, bound, generator=gen)
            self.conv2.bias.zero_()

    def forward(
        self, feats: torch.Tensor, mask: torch.Tensor | None = None
    ) -> torch.Tensor:
        """feats: (P, D) or (B, P, D); mask: (B, P) bool, True = valid."""
        single = feats.dim() == 2
        if single:
            feats = feats.unsqueeze(0)
        if feats.dim() != 3:
            raise ShapeError(f"expected 2-D or 3-D input, got shape {tuple(feats.shape)}")
        x = self.proj(feats)
        if mask is not None:
            x = x * mask.unsqueeze(-1)
        x = x.transpose(1, 2)
        x = torch.relu(self.conv1(x))
        if mask is not None:
            x = x * mask.unsqueeze(1)
        x = self.conv2(x)
        if mask is not None:
            x = x * mask.unsqueeze(1)
        x = x.transpose(1, 2)
        return x.squeeze(0) if single else x


def vq_loss(
    z_e: torch.Tensor,
    z_q: torch.Tensor,
    commitment_weight: float,
    mask: torch.Tensor | None = None,
) -> dict[str, torch.Tensor]:
    """Codebook + commitment losses: squared error summed over feature
    dims, averaged over (valid) positions.
    """
    codebook_sq = ((z_e.detach() - z_q) ** 2).sum(-1)
    commit_sq = ((z_e - z_q.detach()) ** 2).sum(-1)
    if mask is not None:
        denom = mask.sum().clamp(min=1)
        codebook_term = (codebook_sq * mask).sum() / denom
        commit_term = (commit_sq * mask).sum() / denom
    else:
        codebook_term = codebook_sq.mean()
        commit_term = commit_sq.mean()
    total = codebook_term + commitment_weight * commit_term
    return {"codebook": codebook_term, "commitment": commit_term, "total": total}


class VectorQuantizer(nn.Module):
    """Nearest-neighbour codebook lookup with straight-through gradients.

    No EMA updates and no dead-code revival: the codebook learns purely
    from the codebook loss term. Ties in the distance argmin resolve to
    the lowest index.
    """

    def __init__(
        self,
        codebook_size: int = 4,
        width: int = 256,
        commitment_weight: float = 4.0,
    ):
        super().__init__()
        self.codebook_size = codebook_size
        self.width = width
        self.commitment_weight = commitment_weight
        gen = torch.Generator().manual_seed(CODEBOOK_INIT_SEED)
        self.codebook = nn.Parameter(
            torch.empty(codebook_size, width).uniform_(-0.05, 0.05, generator=gen)
        )
        self.register_buffer(
            "usage_counts", torch.zeros(codebook_size, dtype=torch.long)
        )

    def reset_usage(self) -> None:
        self.usage_counts.zero_()

    def quantize(self, z_e: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """Return (indices, z_q) without gradient plumbing. Usage counts
        accumulate per call as a collapse diagnostic."""
        if z_e.shape[-1] != self.width:
            raise ShapeError(
                f"latent width {z_e.shape[-1]} does not match codebook width {self.width}"
            )
        if not torch.isfinite(z_e).all():
            raise NumericError("non-finite values in quantizer input")
        flat = z_e.reshape(-1, self.width)
        dist = ((flat.unsqueeze(1) - self.codebook.unsqueeze(0)) ** 2).sum(-1)
        indices = torch.argmin(dist, dim=1)
        with torch.no_grad():
            self.usage_counts += torch.bincount(
                indices, minlength=self.codebook_size
            )
        z_q = self.codebook[indices].reshape(z_e.shape)
        return indices.reshape(z_e.shape[:-1]), z_q

    def forward(
        self, z_e: torch.Tensor, mask: torch.Tensor | None = None
    ) -> tuple[torch.Tensor, torch.Tensor, dict[str, torch.Tensor]]:
        """Return (straight_through, indices, losses)."""
        indices, z_q = self.quantize(z_e)
        st = straight_through(z_e, z_q)
        losses = vq_loss(z_e, z_q, self.commitment_weight, mask)
        return st, indices, losses


def straight_through(z_e: torch.Tensor, z_q: torch.Tensor) -> torch.Tensor:
    """Forward value z_q, gradient as if the map were the identity."""
    return z_e + (z_q - z_e).detach()


def perplexity(indices: torch.Tensor | np.ndarray, codebook_size: int) -> float:
    """exp(entropy) of codebook usage; codebook_size when uniform, 1 when
    a single code handles everything."""
    idx = np.asarray(indices).reshape(-1)
    if idx.size == 0:
        raise ShapeError("cannot compute perplexity of empty index set")
    counts = np.bincount(idx, minlength=codebook_size).astype(np.float64)
    p = counts / counts.sum()
    nz = p[p > 0]
    return float(np.exp(-(nz * np.log(nz)).sum()))


def extract_alv(
    utterance: Utterance,
    encoder: ReferenceEncoder,
    quantizer: VectorQuantizer,
    provider: FeatureProvider,
) -> tuple[int, ...]:
    """Discrete accent class per phoneme for one utterance."""
    pooled = phoneme_features(utterance, provider)
    feats = torch.from_numpy(np.asarray(pooled, dtype=np.float32))
    was_training = encoder.training
    encoder.eval()
    try:
        with torch.no_grad():
            z_e = encoder(feats)
            indices, _ = quantizer.quantize(z_e)
    finally:
        encoder.train(was_training)
    return tuple(int(i) for i in indices)
