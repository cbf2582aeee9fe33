"""Flow matching for 3D+t four-chamber cardiac shape phantoms."""

__version__ = "0.1.0"
