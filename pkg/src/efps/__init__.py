"""Event-fusion photometric stereo.

Per-pixel observation maps built from RGB frames and event-camera streams,
a three-stage trainable network (event interpolation, observation fusion,
surface-normal estimation), the calibration geometry needed to recover
light directions from a chrome ball, and a synthetic dataset generator so
the whole pipeline runs and is testable without hardware.
"""

__version__ = "0.1.0"
