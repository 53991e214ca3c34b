"""SMILES language modeling for ionizable lipids: corpus generation, structural labels,
a numpy BERT encoder with auxiliary tasks, and property fine-tuning."""

from __future__ import annotations

__version__ = "0.1.0"
