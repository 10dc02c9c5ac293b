"""Integration tests: end-to-end toy training runs (slow)."""
