"""Deep linear network training and convergence diagnostics."""
