"""Probability-flow solver for Fokker-Planck equations with learned scores.

Particles are pushed along ``dx/dt = b(t, x) - D(t, x) s(t, x)`` while the
score ``s`` of their own density is refit by score matching at every step.
Gaussian oracles, SDE reference integrators and diagnostics (entropy,
pointwise density, probability current, KL bound) live alongside.
"""
__version__ = "0.1.0"
