"""Prosody feature extraction: F0 cleanup, normalization, phoneme pooling.

Convention: a frame with F0 value exactly 0 is unvoiced. Contours are
stored in log-Hz once voiced; the synthetic corpus already renders
log-F0 so its frames pass through ``as_log`` untouched.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Protocol

import numpy as np

from .corpus import Alignment, Utterance, resolve_frames
from .errors import DegenerateContourError, FormatError, LengthError, ShapeError


@dataclass
class FrameSequence:
    """A T x D float32 feature matrix with named channels."""

    values: np.ndarray
    channels: tuple[str, ...] = ("log_f0",)

    def __post_init__(self) -> None:
        self.values = np.asarray(self.values, dtype=np.float32)
        if self.values.ndim != 2:
            raise ShapeError(f"frames must be T x D, got shape {self.values.shape}")
        if self.values.shape[1] != len(self.channels):
            raise ShapeError(
                f"{self.values.shape[1]} columns for {len(self.channels)} channels"
            )

    def __len__(self) -> int:
        return self.values.shape[0]


def interpolate_unvoiced(f0: np.ndarray) -> np.ndarray:
    """Fill unvoiced (zero) frames by linear interpolation over voiced ones.

    Edges are held at the nearest voiced value. An all-unvoiced contour
    is unusable and raises DegenerateContourError.
    """
    f0 = np.asarray(f0, dtype=np.float64)
    if f0.ndim != 1:
        raise ShapeError(f"f0 must be 1-D, got shape {f0.shape}")
    voiced = f0 != 0
    if not voiced.any():
        raise DegenerateContourError("contour has no voiced frames")
    if voiced.all():
        return f0.copy()
    idx = np.arange(len(f0))
    return np.interp(idx, idx[voiced], f0[voiced])


def normalize_f0(log_f0: np.ndarray) -> np.ndarray:
    """Utterance-wise z-normalization (population std) of a voiced contour."""
    log_f0 = np.asarray(log_f0, dtype=np.float64)
    if log_f0.ndim != 1:
        raise ShapeError(f"log_f0 must be 1-D, got shape {log_f0.shape}")
    std = log_f0.std()
    if std <= 1e-9 * max(1.0, float(np.abs(log_f0).max())):
        raise DegenerateContourError("contour is constant, cannot normalize")
    return (log_f0 - log_f0.mean()) / std


def pool_phoneme_level(frames: np.ndarray, alignment: Alignment) -> np.ndarray:
    """Mean-pool frame features into one row per phoneme span."""
    frames = np.asarray(frames)
    if frames.ndim != 2:
        raise ShapeError(f"frames must be T x D, got shape {frames.shape}")
    alignment.validate()
    if alignment.total_frames != frames.shape[0]:
        raise LengthError(
            f"alignment covers {alignment.total_frames} frames, "
            f"features have {frames.shape[0]}"
        )
    pooled = np.empty((len(alignment.spans), frames.shape[1]), dtype=np.float64)
    for i, (_, start, end) in enumerate(alignment.spans):
        pooled[i] = frames[start:end].mean(axis=0)
    return pooled


class FeatureProvider(Protocol):
    def frames(self, utterance: Utterance) -> FrameSequence: ...


class F0Provider:
    """Reads an utterance's stored contour and applies the F0 pipeline:
    unvoiced interpolation first, then utterance-wise normalization.

    ``normalize=False`` skips the z-step (used when the raw log-Hz scale
    itself is the target, e.g. objective pitch checks).
    """

    def __init__(self, root: str | Path | None = None, normalize: bool = True):
        self.root = root
        self.normalize = normalize

    def frames(self, utterance: Utterance) -> FrameSequence:
        raw = resolve_frames(utterance, self.root)
        contour = interpolate_unvoiced(raw[:, 0])
        if self.normalize:
            contour = normalize_f0(contour)
        return FrameSequence(contour.reshape(-1, 1).astype(np.float32))


class ExternalFeatureProvider:
    """Pass-through provider for precomputed frame features of a known
    dimensionality (e.g. bottleneck features written by another tool).
    No normalization is applied; the file producer owns that.
    """

    def __init__(self, dim: int, root: str | Path | None = None):
        if dim < 1:
            raise ShapeError("feature dimensionality must be >= 1")
        self.dim = dim
        self.root = root

    def frames(self, utterance: Utterance) -> FrameSequence:
        raw = resolve_frames(utterance, self.root)
        if raw.shape[1] != self.dim:
            raise FormatError(
                f"{utterance.utt_id}: feature file has D={raw.shape[1]}, "
                f"provider configured for D={self.dim}"
            )
        return FrameSequence(raw, tuple(f"ch{i}" for i in range(self.dim)))


def phoneme_features(
    utterance: Utterance,
    provider: FeatureProvider,
) -> np.ndarray:
    """Per-phoneme pooled features for one utterance."""
    seq = provider.frames(utterance)
    return pool_phoneme_level(seq.values, utterance.alignment)
