"""Precedent-augmented case outcome classification.

Kept import-light on purpose: ``precedent.cli`` caps thread pools through
environment variables before numpy is first imported.
"""

__version__ = "0.1.0"
