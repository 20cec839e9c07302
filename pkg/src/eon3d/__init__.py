"""Object-level rotation-equivariant 3D detection on synthetic desk-scale scenes."""

__version__ = "0.1.0"
