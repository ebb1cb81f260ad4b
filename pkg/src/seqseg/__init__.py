"""Temporal semantic segmentation of a synthetic bridge scene.

A miniature fully convolutional network with skip-merged multi-resolution
prediction heads, augmented by convolutional recurrent units (simple RNN or
ConvLSTM) on the lowest-resolution logit map, plus the procedural video
dataset, training engine, evaluation and CLI that go with it.
"""

__version__ = "0.1.0"

__all__ = ["__version__"]
