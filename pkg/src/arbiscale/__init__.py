"""Arbitrary-scale image generation and super-resolution.

A latent diffusion model produces a fixed-size latent; an implicit neural
decoder (feature decoder plus coordinate MLP) renders it at any resolution.
"""
from importlib import resources

from .errors import InvalidArgumentError, NumericError, RenderResourceError, TrainingDivergence

__version__ = "0.1.0"

__all__ = [
    "InvalidArgumentError",
    "NumericError",
    "RenderResourceError",
    "TrainingDivergence",
    "bundled_config",
    "schema_path",
]


def bundled_config(name: str = "toy_sr") -> str:
    """Path of a config shipped with the package (``toy_sr``, ``toy_gen``)."""
    return str(resources.files(__name__) / "configs" / f"{name}.json")


def schema_path() -> str:
    return str(resources.files(__name__) / "run_config.schema.json")
