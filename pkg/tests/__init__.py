"""Test package for ufc-matcher."""
