"""Design, simulation and analysis of N-of-1 trials and series of N-of-1 trials."""
__version__ = "0.1.0"
