"""Mixed Weyl / Berezin-Toeplitz quantization on unitary flat bundles.

Subpackages are plain modules:

- :mod:`flatqe.group_rep` -- SU(2) elements, surface-group representations, irreps.
- :mod:`flatqe.fibre_quantization` -- Toeplitz operators on the Riemann sphere.
- :mod:`flatqe.base_geometry` -- flat torus, regular hyperbolic octagon, flows.
- :mod:`flatqe.bundle_spectra` -- twisted Laplacian spectra (closed form and FEM).
- :mod:`flatqe.semiclassics` -- Weyl quantization, variance, extraction.
- :mod:`flatqe.cli` -- the ``qe`` experiment runner.
"""

__version__ = "0.1.0"
