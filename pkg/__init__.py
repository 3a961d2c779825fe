"""QDSolve package initialization."""
