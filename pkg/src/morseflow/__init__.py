"""Certified phase-portrait analysis for gradient flows with distributed memory.

Modules
-------
kernels
    Memory kernel pairs and the certified constants attached to them.
dynamics
    History-augmented integrator, energy bookkeeping, variational flow.
equilibria
    Equilibrium location, spectral classification, continuation in eps.
blocks
    Isolating blocks, boundary-transversality and cone certificates.
manifolds
    Graph-transform construction of local stable/unstable disks.
connections
    Heteroclinic edge search and connection-graph comparison.
cli
    Command-line entry points over a flat key-value config format.
"""

__version__ = "0.1.0"
