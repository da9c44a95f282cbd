"""Adversarial image-text embedding learner built on numpy."""
