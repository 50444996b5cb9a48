"""Constraint-aware conditional WGAN for mixed-type patient records, with utility and privacy audits."""

__version__ = "0.1.0"
