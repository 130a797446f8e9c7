"""Synthetic scenes, the end-to-end detector, training, ablation, invariant checks and the CLI."""
