"""Lagrangian motion magnification via a double sparse optical flow decomposition."""
