"""Three-stage restoration scheduling for an islanded community microgrid."""
__version__ = "0.1.0"
