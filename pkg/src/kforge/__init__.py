"""
kforge

Pipeline toolkit for Kuzushiji character-box datasets: line assembly,
line-erasure augmentation, curriculum staging, CRR and F1 scoring, and a
desk-scale attention recognizer trained on a synthetic glyph corpus.
"""

__version__ = "0.1.0"
