"""AerialFormer: windowed-attention encoder, CNN stem and multi-dilated decoder."""

__version__ = "0.1.0"
