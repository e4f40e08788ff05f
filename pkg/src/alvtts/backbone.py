"""Transformer acoustic model conditioned on per-phoneme accent latents.

Layout follows the FastSpeech2 recipe at desk scale: additive phoneme,
accent, and speaker embeddings feed a transformer encoder; a variance
adaptor predicts log-durations and phoneme-level pitch; a length
regulator expands phoneme states to frames; a transformer decoder and a
linear head emit frame features. Channel 0 of the output is normalized
log-F0, the remaining channels reconstruct a per-phoneme spectral
signature that stands in for a spectrogram.

The accent embedding table can be an externally owned parameter, which
is how it stays tied to the quantizer codebook during joint training.
"""

from __future__ import annotations

import hashlib
import math
import wave
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .corpus import Utterance
from .errors import DurationError, InputError, LengthError, ShapeError
from .features import FeatureProvider, pool_phoneme_level

SIGNATURE_DIM = 8
OUT_DIM = 1 + SIGNATURE_DIM


@dataclass
class BackboneConfig:
    vocab_size: int
    n_speakers: int
    codebook_size: int = 4
    width: int = 256
    layers: int = 2
    heads: int = 2
    ff_dim: int = 512
    dropout: float = 0.0
    out_dim: int = OUT_DIM
    max_len: int = 2000

    def validate(self) -> None:
        if self.width % self.heads != 0:
            raise InputError(f"width {self.width} not divisible by heads {self.heads}")
        if self.vocab_size < 1 or self.n_speakers < 1:
            raise InputError("vocab_size and n_speakers must be positive")


def sinusoidal_positions(length: int, dim: int) -> torch.Tensor:
    """Standard sin/cos positional table, shape (length, dim)."""
    pos = torch.arange(length, dtype=torch.float64).unsqueeze(1)
    idx = torch.arange(0, dim, 2, dtype=torch.float64)
    angles = pos / torch.pow(torch.tensor(10000.0, dtype=torch.float64), idx / dim)
    pe = torch.zeros(length, dim, dtype=torch.float64)
    pe[:, 0::2] = torch.sin(angles)
    pe[:, 1::2] = torch.cos(angles[:, : pe[:, 1::2].shape[1]])
    return pe.to(torch.float32)


def length_regulate(
    states: torch.Tensor, durations: torch.Tensor
) -> tuple[torch.Tensor, torch.Tensor]:
    """Repeat each phoneme state by its frame duration.

    states: (B, P, W); durations: (B, P) non-negative ints, 0 meaning
    the position is padding. Returns (frames (B, T, W), mask (B, T)).
    """
    if states.dim() != 3 or durations.dim() != 2:
        raise ShapeError(
            f"states must be (B, P, W) and durations (B, P), got "
            f"{tuple(states.shape)} / {tuple(durations.shape)}"
        )
    if (durations < 0).any():
        raise DurationError("negative durations")
    expanded = [
        torch.repeat_interleave(states[b], durations[b], dim=0)
        for b in range(states.shape[0])
    ]
    lengths = [e.shape[0] for e in expanded]
    t_max = max(lengths)
    if t_max == 0:
        raise DurationError("every duration is zero, nothing to expand")
    frames = states.new_zeros(states.shape[0], t_max, states.shape[2])
    mask = torch.zeros(states.shape[0], t_max, dtype=torch.bool, device=states.device)
    for b, e in enumerate(expanded):
        frames[b, : e.shape[0]] = e
        mask[b, : e.shape[0]] = True
    return frames, mask


@dataclass
class AcousticOutput:
    frames: torch.Tensor          # (B, T, out_dim)
    frame_mask: torch.Tensor      # (B, T) bool
    log_duration: torch.Tensor    # (B, P)
    pitch: torch.Tensor           # (B, P)
    durations: torch.Tensor       # (B, P) long, the durations actually expanded


class AcousticModel(nn.Module):
    def __init__(self, config: BackboneConfig, alv_table: nn.Parameter | None = None):
        super().__init__()
        config.validate()
        self.config = config
        w = config.width
        self.phoneme_emb = nn.Embedding(config.vocab_size, w)
        if alv_table is None:
            alv_table = nn.Parameter(
                torch.empty(config.codebook_size, w).uniform_(-0.05, 0.05)
            )
        if tuple(alv_table.shape) != (config.codebook_size, w):
            raise ShapeError(
                f"accent table shape {tuple(alv_table.shape)} does not match "
                f"({config.codebook_size}, {w})"
            )
        self.alv_table = alv_table
        self.speaker_emb = nn.Embedding(config.n_speakers, w)

        def block() -> nn.TransformerEncoder:
            layer = nn.TransformerEncoderLayer(
                d_model=w,
                nhead=config.heads,
                dim_feedforward=config.ff_dim,
                dropout=config.dropout,
                batch_first=True,
            )
            return nn.TransformerEncoder(layer, config.layers, enable_nested_tensor=False)

        self.encoder = block()
        self.decoder = block()
        self.duration_pred = nn.Sequential(
            nn.Linear(w, w), nn.ReLU(), nn.Linear(w, 1)
        )
        self.pitch_pred = nn.Sequential(nn.Linear(w, w), nn.ReLU(), nn.Linear(w, 1))
        self.pitch_proj = nn.Linear(1, w)
        self.out_proj = nn.Linear(w, config.out_dim)
        self.register_buffer(
            "pos_table", sinusoidal_positions(config.max_len, w), persistent=False
        )

    def embed_inputs(
        self,
        phonemes: torch.Tensor,
        alv: torch.Tensor | None,
        speaker: torch.Tensor,
    ) -> torch.Tensor:
        """Additive phoneme + accent + speaker embedding, (B, P, W).

        ``alv`` may be long indices (B, P) looked up in the shared table,
        float vectors (B, P, W) used as-is (straight-through training),
        or None for the accent-free mode (zero contribution).
        """
        x = self.phoneme_emb(phonemes)
        if alv is not None:
            if alv.is_floating_point():
                if alv.shape != x.shape:
                    raise ShapeError(
                        f"accent vectors {tuple(alv.shape)} do not match "
                        f"embeddings {tuple(x.shape)}"
                    )
                x = x + alv
            else:
                x = x + self.alv_table[alv]
        return x + self.speaker_emb(speaker).unsqueeze(1)

    def _positions(self, length: int) -> torch.Tensor:
        if length > self.config.max_len:
            raise LengthError(
                f"sequence of {length} exceeds positional table "
                f"({self.config.max_len})"
            )
        return self.pos_table[:length]

    def forward(
        self,
        phonemes: torch.Tensor,
        alv: torch.Tensor | None,
        speaker: torch.Tensor,
        src_mask: torch.Tensor | None = None,
        durations: torch.Tensor | None = None,
        pitch_target: torch.Tensor | None = None,
    ) -> AcousticOutput:
        """Teacher-forced when durations (and optionally pitch_target)
        are given; free-running otherwise, with predicted durations
        rounded from exp(log_dur) and floored at one frame.
        """
        b, p = phonemes.shape
        if src_mask is None:
            src_mask = torch.ones(b, p, dtype=torch.bool, device=phonemes.device)
        x = self.embed_inputs(phonemes, alv, speaker)
        x = x + self._positions(p)
        h = self.encoder(x, src_key_padding_mask=~src_mask)
        h = h.masked_fill(~src_mask.unsqueeze(-1), 0.0)

        log_dur = self.duration_pred(h).squeeze(-1)
        pitch_hat = self.pitch_pred(h).squeeze(-1)

        if durations is None:
            durations = (
                torch.exp(log_dur.detach()).round().long().clamp(min=1)
            )
        durations = durations.masked_fill(~src_mask, 0)

        pitch_in = pitch_target if pitch_target is not None else pitch_hat
        h = h + self.pitch_proj(pitch_in.unsqueeze(-1))
        h = h.masked_fill(~src_mask.unsqueeze(-1), 0.0)

        frames, frame_mask = length_regulate(h, durations)
        frames = frames + self._positions(frames.shape[1])
        d = self.decoder(frames, src_key_padding_mask=~frame_mask)
        d = d.masked_fill(~frame_mask.unsqueeze(-1), 0.0)
        out = self.out_proj(d) * frame_mask.unsqueeze(-1)
        return AcousticOutput(
            frames=out,
            frame_mask=frame_mask,
            log_duration=log_dur,
            pitch=pitch_hat,
            durations=durations,
        )


def tts_loss(
    output: AcousticOutput,
    target_frames: torch.Tensor,
    log_dur_target: torch.Tensor,
    pitch_target: torch.Tensor,
    src_mask: torch.Tensor,
) -> dict[str, torch.Tensor]:
    """Frame MAE + log-duration MSE + pitch MSE, unweighted sum.

    Teacher-forced durations guarantee the frame axes line up; anything
    else is a caller bug and raises.
    """
    if target_frames.shape != output.frames.shape:
        raise ShapeError(
            f"target frames {tuple(target_frames.shape)} vs "
            f"predicted {tuple(output.frames.shape)}"
        )
    fmask = output.frame_mask.unsqueeze(-1)
    n_frame_elems = fmask.sum() * output.frames.shape[-1]
    frame_mae = ((output.frames - target_frames).abs() * fmask).sum() / n_frame_elems
    n_valid = src_mask.sum().clamp(min=1)
    dur_mse = (((output.log_duration - log_dur_target) ** 2) * src_mask).sum() / n_valid
    pitch_mse = (((output.pitch - pitch_target) ** 2) * src_mask).sum() / n_valid
    total = frame_mae + dur_mse + pitch_mse
    return {
        "frame_mae": frame_mae,
        "duration_mse": dur_mse,
        "pitch_mse": pitch_mse,
        "total": total,
    }


def phoneme_signature(symbol: str, dim: int = SIGNATURE_DIM) -> np.ndarray:
    """Deterministic pseudo-spectral vector for a phoneme symbol."""
    digest = hashlib.sha256(symbol.encode("utf-8")).digest()
    rng = np.random.default_rng(int.from_bytes(digest[:8], "little"))
    return rng.normal(0.0, 1.0, dim).astype(np.float32)


def build_frame_targets(
    utterance: Utterance, provider: FeatureProvider
) -> np.ndarray:
    """T x (1 + SIGNATURE_DIM) training target: normalized log-F0 in
    channel 0, the phoneme's signature in the rest."""
    seq = provider.frames(utterance)
    t = len(seq)
    target = np.zeros((t, OUT_DIM), dtype=np.float32)
    target[:, 0] = seq.values[:, 0]
    for (idx, start, end) in utterance.alignment.spans:
        target[start:end, 1:] = phoneme_signature(utterance.phonemes[idx])
    return target


def phoneme_pitch_targets(
    utterance: Utterance, provider: FeatureProvider
) -> np.ndarray:
    """Per-phoneme mean of the normalized contour, shape (P,)."""
    seq = provider.frames(utterance)
    pooled = pool_phoneme_level(seq.values, utterance.alignment)
    return pooled[:, 0].astype(np.float32)


def log_duration_targets(utterance: Utterance) -> np.ndarray:
    return np.log(utterance.alignment.durations().astype(np.float64)).astype(
        np.float32
    )


def render_wav(
    log_f0: np.ndarray,
    path: str | Path,
    frame_rate: float = 100.0,
    sample_rate: int = 16000,
    amplitude: float = 0.3,
) -> int:
    """Render a log-Hz contour as a phase-continuous sine, 16-bit mono.

    Returns the number of samples written.
    """
    log_f0 = np.asarray(log_f0, dtype=np.float64)
    if log_f0.ndim != 1 or log_f0.size == 0:
        raise ShapeError("log_f0 must be a non-empty 1-D array")
    if not (0.0 < amplitude <= 1.0):
        raise InputError("amplitude must be in (0, 1]")
    samples_per_frame = int(round(sample_rate / frame_rate))
    freq = np.repeat(np.exp(log_f0), samples_per_frame)
    phase = 2.0 * math.pi * np.cumsum(freq) / sample_rate
    signal = amplitude * np.sin(phase)
    pcm = np.clip(signal * 32767.0, -32768, 32767).astype("<i2")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with wave.open(str(path), "wb") as w:
        w.setnchannels(1)
        w.setsampwidth(2)
        w.setframerate(sample_rate)
        w.writeframes(pcm.tobytes())
    return len(pcm)
