"""Speakers, listeners, and pragmatic reranking for attribute phrases in
two-image reference games, with a synthetic attribute world providing
ground-truth oracles at desk scale."""

__version__ = "0.1.0"
