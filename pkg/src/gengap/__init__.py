"""Simulate binaural noisy-reverberant mixtures, train mask-based enhancers and
measure their generalization gap across speech, noise and room databases."""

__version__ = "0.1.0"
