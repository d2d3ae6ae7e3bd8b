"""Desk-scale volumetric multi-contrast synthesis toolkit.

A 3D image-to-image WGAN-GP (generator, critic, frozen segmenter,
memory-bounded hybrid attention) built on a small reverse-mode autodiff
engine, with synthetic paired phantoms standing in for clinical data.

This module stays import-light on purpose: thread caps must be applied
before numpy loads (see :mod:`mcsagan.runtime`), so nothing here pulls
in the numeric stack.
"""

__version__ = "0.1.0"

__all__ = ["__version__"]
