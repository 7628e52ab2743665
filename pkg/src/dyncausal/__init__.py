"""Federated discovery of time-varying causal structure."""
