"""Synthetic cardiac phantom with known kinetics, blur and frame-dependent noise."""
