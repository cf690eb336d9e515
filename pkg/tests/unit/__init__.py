"""Unit tests for numerical kernels and pure logic."""
