"""Three-pole signed distance fields for open and closed surfaces."""
__version__ = "0.1.0"
