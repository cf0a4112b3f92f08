"""Domain-adversarial training and online test-time adaptation for WiFi CSI activity recognition."""

__version__ = "0.1.0"
