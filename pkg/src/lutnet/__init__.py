"""lutnet — Multiply-free LUT quantization and integer inference for small neural networks."""

__version__ = "0.1.0"
