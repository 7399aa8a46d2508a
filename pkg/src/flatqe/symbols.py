"""Symbols on the augmented phase space ``(x, xi, z)``.

Three kinds are supported:

``position``
    ``A(x, z) = sum_i f_i(x) H_i(z)`` with scalar base functions ``f_i`` and
    fibre symbols ``H_i``.
``separable``
    ``f(x) phi(|xi|^2) H(z)``; used with the functional calculus on curved
    bases.
``torus_scalar``
    Scalar torus symbol given by its x-Fourier modes,
    ``A(x, xi) = sum_k a_k(xi) exp(2 pi i k.x)``, which the torus Weyl
    quantization treats exactly.

Base functions take positions of shape ``(..., 2)`` (real coordinates; disk
points are ``(Re x, Im x)``) and return arrays of shape ``(...)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np

from .fibre_quantization import FibreSymbol, fs_integral

BaseFn = Callable[[np.ndarray], np.ndarray]
MomentumFn = Callable[[np.ndarray], np.ndarray]


def _one(x: np.ndarray) -> np.ndarray:
    return np.ones(np.shape(x)[:-1])


@dataclass(frozen=True)
class MixedSymbol:
    """A symbol on the augmented phase space; see the module docstring."""

    kind: str
    terms: tuple[tuple[BaseFn, FibreSymbol], ...] = ()
    phi: MomentumFn | None = None
    fourier: Mapping[tuple[int, int], MomentumFn] = field(default_factory=dict)
    name: str = ""
    real: bool = True

    def __post_init__(self):
        if self.kind not in ("position", "separable", "torus_scalar"):
            raise ValueError(f"unknown symbol kind {self.kind!r}")
        if self.kind == "separable" and (self.phi is None or len(self.terms) != 1):
            raise ValueError("separable symbols need phi and exactly one (f, H) term")
        if self.kind == "torus_scalar" and not self.fourier:
            raise ValueError("torus_scalar symbols need Fourier modes")

    # constructors ---------------------------------------------------------

    @classmethod
    def position(cls, terms, name: str = "") -> "MixedSymbol":
        terms = tuple((f if f is not None else _one, H) for f, H in terms)
        real = all(H.real for _, H in terms)
        return cls("position", terms=terms, name=name, real=real)

    @classmethod
    def constant(cls, c: float = 1.0) -> "MixedSymbol":
        return cls.position([(None, FibreSymbol.constant(c))], name=f"const({c})")

    @classmethod
    def base(cls, f: BaseFn, name: str = "") -> "MixedSymbol":
        return cls.position([(f, FibreSymbol.constant(1.0))], name=name)

    @classmethod
    def fibre(cls, H: FibreSymbol, name: str = "") -> "MixedSymbol":
        return cls.position([(None, H)], name=name or H.name)

    @classmethod
    def separable(cls, f: BaseFn | None, phi: MomentumFn, H: FibreSymbol,
                  name: str = "") -> "MixedSymbol":
        return cls("separable", terms=((f or _one, H),), phi=phi, name=name, real=H.real)

    @classmethod
    def torus(cls, fourier: Mapping[tuple[int, int], MomentumFn], name: str = "",
              real: bool = True) -> "MixedSymbol":
        return cls("torus_scalar", fourier=dict(fourier), name=name, real=real)

    # evaluation -----------------------------------------------------------

    def evaluate(self, x: np.ndarray, xi: np.ndarray | None = None,
                 z: np.ndarray | None = None) -> np.ndarray:
        """Value at positions ``x`` (..., 2), covectors ``xi`` (..., 2), fibre points ``z`` (..., 2).

        ``xi`` is only used by separable and torus symbols; for separable
        symbols ``|xi|^2`` must already be the metric norm squared.
        """
        x = np.asarray(x, dtype=float)
        if self.kind == "torus_scalar":
            xi = np.asarray(xi, dtype=float)
            out = 0
            for k, a in self.fourier.items():
                out = out + a(xi) * np.exp(2j * np.pi * (x[..., 0] * k[0] + x[..., 1] * k[1]))
            return np.real(out) if self.real else out
        out = 0
        for f, H in self.terms:
            hz = H(z) if z is not None else fs_integral(H)
            out = out + f(x) * hz
        if self.kind == "separable":
            out = out * self.phi(np.sum(np.asarray(xi) ** 2, axis=-1))
        return np.real(out) if self.real else out

    def fibre_average(self, x: np.ndarray) -> np.ndarray:
        """``int A(x, z) d omega_FS(z)`` for position symbols."""
        out = 0
        for f, H in self.terms:
            out = out + f(np.asarray(x, dtype=float)) * fs_integral(H)
        return np.real(out) if self.real else out
