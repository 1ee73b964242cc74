"""Neural-network patching for concept-drift adaptation on image streams."""

__version__ = "0.1.0"
