"""Plain-conv super-resolution with identity initialisation, in numpy."""

__version__ = "0.1.0"
