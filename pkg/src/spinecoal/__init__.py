"""Simulation and limit laws for genealogies of critical multitype branching processes."""
from .model import (ModelError, OffspringModel, SpectralData, geo1, is_irreducible, load_model,
                    mean_matrix, spectral, sym2, w_weight, zeta)

__version__ = "0.1.0"
