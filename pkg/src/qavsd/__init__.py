"""Quality-aware audio-visual speaker diarization on synthetic scenes."""

__version__ = "0.1.0"
