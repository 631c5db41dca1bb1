"""Input-function comparison metrics (AUC, peak, tail)."""
