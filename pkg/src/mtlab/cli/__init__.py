"""Command-line surface, config files and on-disk stores."""
from .main import main

__all__ = ["main"]
