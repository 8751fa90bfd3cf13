"""Latent-space identity protection against a toy diffusion face swapper.

Everything runs on numpy: a small reverse-mode autodiff engine, a DDPM/DDIM
sampler, dense toy networks trained on synthetic faces, the PGD protection
attack, the swapper with its defenses, and the evaluation metrics.
"""

__version__ = "0.1.0"
