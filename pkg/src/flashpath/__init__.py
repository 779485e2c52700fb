"""Sliding-window tumor region detection with feature-space aggregation."""
