"""Hybrid Gaussian/SDF satellite scene reconstruction with episodic
meta-training: representation, differentiable physics renderer, losses,
routing, meta-loop, synthetic episodes, metrics, and a verification suite.
"""

__version__ = "0.1.0"
