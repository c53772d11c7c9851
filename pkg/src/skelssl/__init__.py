"""Multi-task self-supervised learning for skeleton sequences.

Motion prediction, temporal jigsaw and contrastive pretext tasks share a
bidirectional GRU encoder written on a small numpy reverse-mode
differentiation core.
"""

__version__ = "0.1.0"
