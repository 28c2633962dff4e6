"""OCR-aware image captioning: Attention-on-Attention encoder/decoder with a
pointer-generator copy channel over an OCR-extended vocabulary."""

__version__ = "0.1.0"
