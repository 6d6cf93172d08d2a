"""Desk-scale testbed for hybrid surrogate / data-assimilation studies on a
synthetic CO2-injection reservoir."""

__version__ = "0.1.0"
