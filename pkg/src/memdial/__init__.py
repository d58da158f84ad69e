"""Personalized knowledge-grounded dialogue toolkit: coupled categorical
latents over memory fragments and knowledge candidates, trained by warm-up,
ELBO ascent, dual-learning policy gradients, and distillation."""

__version__ = "0.1.0"
