"""Feature-binding training and evaluation for dense image labelling."""

__version__ = "0.1.0"
