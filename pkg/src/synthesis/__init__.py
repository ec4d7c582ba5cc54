# src/synthesis/__init__.py
