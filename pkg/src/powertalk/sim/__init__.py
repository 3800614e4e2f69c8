"""Scenario ingestion, seeded randomness and the command-line runner."""
