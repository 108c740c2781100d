"""Audit header-bidding logs for consent compliance and client-side cookie syncing."""

__version__ = "0.1.0"
