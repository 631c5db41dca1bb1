"""Convolution, kernel factorisation and Richardson-Lucy deconvolution."""
