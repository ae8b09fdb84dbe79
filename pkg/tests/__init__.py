"""Test package for gdvae."""
