"""Masked-prediction target lab: iterative clustering, layer multi-targets, RVQ targets and probes."""
__version__ = "0.1.0"
