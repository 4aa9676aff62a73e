"""
Multiview Recovery Module

OT-regularized recovery of a prototype image from several views, each seen
through a known deformation, an unknown local permutation and a compressive
Gaussian measurement, plus the baselines and synthetic experiment harness.
Modules import each other by bare name; put this directory on sys.path.
"""

__version__ = "1.0.0"
__author__ = "Multiview Project"
