"""Hybrid data-driven / physics-constrained Gaussian process regression."""
