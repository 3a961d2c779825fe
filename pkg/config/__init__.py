"""Configuration package for QDSolve."""
