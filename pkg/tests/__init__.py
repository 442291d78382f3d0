"""
Tests for the snl_sieve package.
"""
