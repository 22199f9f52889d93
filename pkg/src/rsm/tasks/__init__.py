"""Data generators, streams and metrics for the four benchmark tasks."""
