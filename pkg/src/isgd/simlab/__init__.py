"""Simulation harness: data designs, seeded streams, batched replications, diagnostics."""
