"""Reverse-mode differentiation, optimization and gradient checking for gdvae."""
