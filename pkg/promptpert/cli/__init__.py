"""Command-line interface for promptpert."""
