"""ITE estimation under multi-view graph interference (HINITE) with a synthetic benchmark."""

__version__ = "0.1.0"
