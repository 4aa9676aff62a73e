"""
Python tests for the multiview recovery library.
"""

__version__ = "1.0.0"
