"""Opcode embeddings and embedded datasets for Android malware detection."""

__version__ = "0.1.0"
