"""ragval: offline testing and validation toolkit for RAG systems."""

__version__ = "0.1.0"
