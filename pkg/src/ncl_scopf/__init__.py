"""Corrective AC-SCOPF as an MPCC, solved by an NCL augmented Lagrangian."""

__version__ = "0.1.0"
