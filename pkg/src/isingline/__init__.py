"""Critical Ising line observables: sampling, exact oracles and analysis."""

__version__ = "0.1.0"
