"""Core components - model builders, experiment harness and terminal."""
