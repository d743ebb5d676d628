"""Desk-scale laboratory for composing low-rank adapters with gated per-token fusion."""

__version__ = "0.1.0"
