"""Test suite for promptpert."""
