"""Core solver modules for QDSolve."""
