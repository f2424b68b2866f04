"""Proofs of retrievability for mutable, unencoded files."""

__version__ = "0.1.0"
