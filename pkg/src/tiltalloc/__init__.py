"""Control-allocation backends for an overactuated planar bi-tilt tricopter."""

__version__ = "0.1.0"
