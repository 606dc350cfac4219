"""Restricted Boltzmann machines and quantum Boltzmann machines trained against an exact annealer simulator."""
__version__ = "0.1.0"
