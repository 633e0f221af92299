"""Learning from crowds with latent instance and predictor representations.

A ground-truth classifier is trained jointly with per-annotation confusion
matrices built from instance difficulty and predictor competence, using EM.
"""

__version__ = "0.1.0"
