"""Unit tests for the analysis modules."""
