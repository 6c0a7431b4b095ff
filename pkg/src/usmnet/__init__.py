"""USM-Net: neural surrogates of PDE solution manifolds over physical and
geometric parameters, with the solvers and geometry tools that feed them."""

__version__ = "0.1.0"
