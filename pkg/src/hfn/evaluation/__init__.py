"""Metrics, ablations, synthetic benchmark and efficiency profiling."""
