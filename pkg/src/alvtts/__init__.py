"""Cross-dialect TTS with discrete per-phoneme accent latent variables."""

__version__ = "0.1.0"
