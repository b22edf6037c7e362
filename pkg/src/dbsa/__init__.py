"""Design-based sensitivity analysis for finite-population experiments."""
