"""Sparse decoder with Random Routed Experts, at desk scale."""
