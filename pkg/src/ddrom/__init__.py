"""Data-driven reduced-order models with simulation-function certificates."""
