"""Test services package."""
