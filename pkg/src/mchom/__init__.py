"""Multicontinuum upscaling toolkit for parabolic problems on shrinking
perforated domains."""

__version__ = "0.1.0"
