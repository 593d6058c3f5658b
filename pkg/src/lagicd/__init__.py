"""Limited-angle cone-beam CT reconstruction with geometry-integrated
cycle-domain diffusion sampling."""

__version__ = "0.1.0"
