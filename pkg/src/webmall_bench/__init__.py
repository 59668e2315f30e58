"""Testbed for comparing HTML, RAG, MCP and NLWeb web agents on multi-shop e-commerce tasks."""

__version__ = "0.1.0"
