"""Attack simulation and detection for multivariate physiological streams.

The package covers the full loop: synthesize or ingest vitals records,
corrupt them with seeded false-data injections, train a dual-axis attention
detector on sliding windows, post-filter alarms with physiological
plausibility rules, and evaluate with paired statistics.
"""

__version__ = "0.1.0"
