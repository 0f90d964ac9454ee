"""
TriPLET desk-scale

Low-dose PET denoising in sinogram and image domains: a sinogram-domain
transformer (DenNet), a differentiable filtered backprojection and a
wavelet U-Net (RecNet), trained in three stages on synthetic phantoms.

Usage:
    # As module
    python -m triplet simulate --out ./workspace

    # As installed CLI
    triplet train --preset desk

Environment Variables:
    TRIPLET_CONFIG: config document (default: ./config.yaml)
    TRIPLET_WORKSPACE: default --out directory
    TRIPLET_SEED: master seed override
    TRIPLET_LOG_LEVEL: console log level (default: INFO)
"""

from pathlib import Path


def _read_version() -> str:
    """
    Resolve the package version.

    Order:
      1. importlib.metadata, when installed
      2. VERSION file at the repo root, when running from source
      3. fallback string
    """
    try:
        from importlib.metadata import version
        return version("triplet-pet")
    except Exception:
        pass
    try:
        version_file = Path(__file__).resolve().parent.parent / "VERSION"
        if version_file.is_file():
            return version_file.read_text(encoding="utf-8").strip()
    except Exception:
        pass
    return "0.0.0+dev"


__version__ = _read_version()

__all__ = ["__version__"]
