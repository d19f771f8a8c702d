"""Staged training and checkpoint files."""
