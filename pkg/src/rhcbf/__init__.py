"""Learning robust hybrid control barrier functions from demonstrations."""

__version__ = "0.1.0"
