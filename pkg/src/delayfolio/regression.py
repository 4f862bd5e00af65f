"""Polynomial least-squares regression used for conditional expectations."""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, RankDeficiencyError
from .market_model import Array

FLAT_TOL = 1e-10
WHITEN_TOL = 1e-7


@dataclass(frozen=True)
class BasisSpec:
    """Monomials of total degree ``<= degree`` in standardised features."""

    degree: int = 2

    def __post_init__(self):
        if int(self.degree) != self.degree or self.degree < 0:
            raise ConfigError(f"basis degree must be a non-negative integer, got {self.degree}")

    def n_features(self, n_inputs: int) -> int:
        return len(_exponents(n_inputs, self.degree))


def _exponents(n_inputs: int, degree: int) -> list[tuple[int, ...]]:
    out = []
    for d in range(degree + 1):
        for combo in itertools.combinations_with_replacement(range(n_inputs), d):
            out.append(combo)
    return out


@dataclass
class FittedBasis:
    """Basis frozen to the centring and whitening of one sample of inputs.

    Inputs are standardised and rotated onto their principal axes, each scaled
    to unit variance; axes whose spread is negligible are dropped.  A step where
    every path shares the same state therefore reduces to the constant function,
    and nearly collinear inputs do not make the design ill-conditioned.  Total
    degree polynomial spaces are invariant under this linear change of inputs.
    """

    mean: Array
    rotation: Array  # (n_inputs, n_kept)
    terms: list

    @classmethod
    def fit(cls, inputs: Array, spec: BasisSpec, tol: float = WHITEN_TOL) -> "FittedBasis":
        inputs = np.asarray(inputs, dtype=float)
        P, d = inputs.shape
        mean = inputs.mean(axis=0)
        scale = inputs.std(axis=0)
        ref = np.maximum(1.0, np.abs(mean))
        varying = scale > FLAT_TOL * ref
        rotation = np.zeros((d, 0))
        if varying.any():
            u = (inputs[:, varying] - mean[varying]) / scale[varying]
            _, sv, vt = np.linalg.svd(u / np.sqrt(P), full_matrices=False)
            keep = sv > tol * sv[0]
            rot = np.zeros((d, int(keep.sum())))
            rot[varying] = vt[keep].T / sv[keep] / scale[varying][:, None]
            rotation = rot
        return cls(mean, rotation, _exponents(rotation.shape[1], spec.degree))

    @property
    def size(self) -> int:
        return len(self.terms)

    def design(self, inputs: Array) -> Array:
        inputs = np.asarray(inputs, dtype=float)
        u = (inputs - self.mean) @ self.rotation
        cols = np.empty((inputs.shape[0], self.size))
        for j, term in enumerate(self.terms):
            col = np.ones(inputs.shape[0])
            for i in term:
                col = col * u[:, i]
            cols[:, j] = col
        return cols


def least_squares(design: Array, targets: Array, step: int = -1, rcond: float = 1e-10) -> Array:
    """Least-squares coefficients via thin QR; raises on rank deficiency.

    ``targets`` may hold several right-hand sides as columns.
    """
    P, F = design.shape
    if P < F:
        raise RankDeficiencyError(step, P, F)
    q, r = np.linalg.qr(design)
    diag = np.abs(np.diag(r))
    rank = int(np.count_nonzero(diag > rcond * max(diag.max(), 1e-300)))
    if rank < F:
        raise RankDeficiencyError(step, rank, F)
    return np.linalg.solve(r, q.T @ targets)


def check_feature_budget(n_features: int, n_paths: int):
    if n_features * 10 >= n_paths:
        raise ConfigError(
            f"{n_features} regression features need more than {10 * n_features} paths, "
            f"got {n_paths}"
        )


__all__ = ["BasisSpec", "FittedBasis", "check_feature_budget", "least_squares"]
