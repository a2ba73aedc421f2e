"""Pairwise Choice Markov Chains with direct and amortized (neural) inference."""

__version__ = "0.1.0"
