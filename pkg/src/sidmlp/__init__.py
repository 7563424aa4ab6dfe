"""Semantic-ID recommendation lab: MLP-head distillation against an exact
oracle teacher, constrained beam decoding, and counter-level benchmarking."""

__version__ = "0.1.0"
