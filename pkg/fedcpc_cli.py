"""
CLI entry point stub for FedCPC.

This file exists at the root level and imports the actual click group
from the src package, avoiding relative import issues.
"""

from src.cli import cli

__all__ = ["cli"]

if __name__ == "__main__":
    cli()
