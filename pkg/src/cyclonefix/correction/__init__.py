"""Learned centre correction: the conv stack (``nn``) and its training/inference (``model``)."""
