"""Change maps from image-level labels, via a distilled student network and scale-averaged sigmoid inference."""

__version__ = "0.1.0"
