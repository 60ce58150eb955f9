"""Travel time estimation for road-network paths from rasterised sliding windows."""

__version__ = "0.1.0"
