"""Deepfake face traceability: disentangling reversing network, training and evaluation."""
__version__ = "0.1.0"
