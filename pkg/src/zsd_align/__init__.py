"""Zero-shot detection by aligning a detector's embedding head to fixed text embeddings."""

__version__ = "0.1.0"
