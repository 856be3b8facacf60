"""camds: class activation maps with deep supervision for frame-level diagnosis."""

__version__ = "0.1.0"
