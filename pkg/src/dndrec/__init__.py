"""Session-based next-item recommendation with candidate dropout and decoupled decoders."""

__version__ = "0.1.0"
