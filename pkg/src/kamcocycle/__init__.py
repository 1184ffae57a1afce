"""Constructive KAM almost-reducibility for quasi-periodic linear cocycles."""

__version__ = "0.1.0"
