"""Utility modules for gdvae."""
