"""Service modules for matching, inference, data and evaluation."""
