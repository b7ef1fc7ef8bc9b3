"""Feature-based rigid alignment of volumetric density maps."""
