"""Acronym disambiguation via phrase-level contrastive pre-training and
contrastive fine-tuning, at desk scale."""

__version__ = "0.1.0"
