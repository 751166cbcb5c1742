"""Split-world CNN obfuscation: transform weights, outsource linear layers, keep the rest secure."""

__version__ = "0.1.0"
