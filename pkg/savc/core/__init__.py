"""Core utilities and shared contracts."""
