"""Compress convolutional networks by learning which layers to remove.

A bidirectional LSTM policy proposes keep/remove decisions for every
removable layer of a teacher; each proposed student is trained by knowledge
distillation and scored by a product of accuracy, latency and size rewards,
and the policy is updated with REINFORCE.
"""

__version__ = "0.1.0"
