"""Scene generation, datasets, training and the end-to-end pipeline."""
