"""Test models package."""
