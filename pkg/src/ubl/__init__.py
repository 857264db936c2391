"""Desk-scale backdoor attacks (BadMatch, BadDist) on unpaired image-text contrastive models."""

__version__ = "0.1.0"
