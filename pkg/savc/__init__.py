"""Few-shot class-incremental learning with semantic-aware virtual contrast."""
