"""Zero-shot voice conversion with GST speaker encoders over frozen D-sequences."""

__version__ = "0.1.0"
