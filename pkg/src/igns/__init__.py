"""Port-Hamiltonian graph neural simulator."""

__version__ = "0.1.0"
