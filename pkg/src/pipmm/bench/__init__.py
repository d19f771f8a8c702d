"""Synthetic benchmark: dataset, evaluation, cost profiles and gradient suite."""
