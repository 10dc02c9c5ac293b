"""Unit tests: fast, desk-sized, CPU only."""
