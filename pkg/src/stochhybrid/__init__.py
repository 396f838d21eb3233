"""Simulation and mapping of stochastic hybrid models: coloured Petri nets,
hybrid automata and hybrid jump SDEs."""
__version__ = "0.1.0"
