# src/networks/__init__.py
