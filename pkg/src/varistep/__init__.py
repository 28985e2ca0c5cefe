"""Variational time stepping for a viscoelastic second-gradient solid
coupled to Stokes flow, with runtime verification of the discrete energy
inequalities."""

__version__ = "0.1.0"
