"""Frequency-domain analysis and detection of upsampling artifacts in generated images."""

__version__ = "0.1.0"
