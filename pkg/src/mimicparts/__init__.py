"""Part-aware speech-driven stylized motion generation at desk scale."""

__version__ = "0.1.0"
