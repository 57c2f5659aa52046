"""Non-parallel mel-spectrogram voice conversion toolkit."""

__version__ = "0.1.0"
