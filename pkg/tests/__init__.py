"""
Multiview Tests

Test suite for the multiview recovery library, its baselines and the experiment harness.
"""

__version__ = "1.0.0"
