"""Training, inference and analytics services."""
