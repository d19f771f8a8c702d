"""pipmm command-line interface."""
