"""Ribaucour partial tubes, Enneper-type hypersurfaces and their numerical verification."""

__version__ = "0.1.0"
