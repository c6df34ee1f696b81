"""Task-specific feature coding for split edge/cloud inference."""

__version__ = "0.1.0"
