"""Noisy-label light field saliency package"""

__version__ = "1.0.0"
