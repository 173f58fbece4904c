"""Counterfactual world modeling on a synthetic sprite world."""
