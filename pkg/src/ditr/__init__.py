"""Learned patch-classifier metrics for multimodal image registration.

The package trains a two-channel convolutional discriminator on patch pairs,
uses the sum of its pre-sigmoid responses as a registration objective, and
alternates training with re-registration (iterated maximum likelihood) to
learn from roughly aligned data. Mutual-information and categorical
likelihood baselines, a synthetic data generator and evaluation tools are
included.
"""

__version__ = "0.1.0"
