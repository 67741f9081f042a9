"""Open-environment sound event detection with ensemble confidence calibration."""

__version__ = "0.1.0"
