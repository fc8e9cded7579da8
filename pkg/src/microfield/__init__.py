"""Differentiable microfacet-field inverse renderer and perturbation harness."""

__version__ = "0.1.0"
