"""Sparse coding of multi-instance histograms under earth mover's distance."""
