"""Compiler and simulator toolchain for an embedded int8 deep-learning accelerator."""

__version__ = "0.1.0"
