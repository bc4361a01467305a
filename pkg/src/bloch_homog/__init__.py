"""Bloch band structures and high-frequency homogenized models of periodic media."""
