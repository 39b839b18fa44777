"""Diffusion depth completion with zero terminal-SNR scheduling, single-step training and a semantic enhancer."""

__version__ = "0.1.0"
