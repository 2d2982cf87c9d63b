"""collagefix: collage-style photo editing with a detail-transfer diffusion model."""

__version__ = "0.1.0"
