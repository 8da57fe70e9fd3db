"""Masks, transforms and trigger optimisation."""
