"""Positron physics: nuclear data, Monte Carlo transport and range kernels."""
