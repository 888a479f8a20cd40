"""Maximally exciting 3D stimuli via RBF mesh deformation and differentiable rendering."""

__version__ = "0.1.0"
