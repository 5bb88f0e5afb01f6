"""IoT payments over a Lightning-style channel controlled jointly with an untrusted gateway."""

__version__ = "0.1.0"
