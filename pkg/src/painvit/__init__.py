"""Twin hierarchical vision transformers for multimodal pain assessment."""

__version__ = "0.1.0"
