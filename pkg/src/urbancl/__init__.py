"""Urban knowledge graphs, image-KG contrastive learning and indicator regression."""

__version__ = "0.1.0"
