"""Desk-scale passive acoustic monitoring pipeline: synthetic soundscapes,
spectrogram features, trainable detector/segmenter, a per-band
bit-truncation codec with a bit-exact wire format, and learned bit
allocation evaluated against psychoacoustic and uniform baselines."""

__version__ = "0.1.0"
