"""Coupled contrastive embedding for cross-spectrum identification."""
