"""Data models for feature maps, cost volumes, flows and records."""
