"""Post-adiabatic effective dynamics of a slow classical system coupled to a fast quantum system."""

__version__ = "0.1.0"
