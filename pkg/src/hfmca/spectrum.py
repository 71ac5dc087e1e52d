"""Post-training normalization: eigenspectra, orthonormal bases, ratios.

Whiten each marginal block with its ridge inverse square root, take the SVD
of the whitened cross block, and square the singular values to get the
eigenspectrum of the dependence between the two feature sets. Rotating the
whitened features by the singular bases yields basis functions that are
orthonormal under their own marginals, and the density ratio between the
two receptive fields is reconstructed as the sigma-weighted inner product
of the normalized features.
"""

from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass

import numpy as np

from . import linalg
from .costs import CorrStats

__all__ = [
    "SpectrumError",
    "SpectrumResult",
    "extract_spectrum",
    "extract_spectrum_arrays",
    "normalize_features",
    "density_ratio",
    "compare_bases",
    "optimal_cost",
    "write_spectrum_csv",
]

# Everything beyond this overshoot is a numerically broken spectrum, not noise.
_HARD_OVERSHOOT = 1e-3
_SOFT_OVERSHOOT = 1e-6


class SpectrumError(ValueError):
    pass


@dataclass
class SpectrumResult:
    """Eigenvalues and normalization matrices for one layer pair."""

    layer: int
    sigma: np.ndarray  # K descending eigenvalues in [0, 1]
    u_rot: np.ndarray  # K x K rotation for the lower features
    v_rot: np.ndarray  # K x K rotation for the upper features
    w_phi: np.ndarray  # inverse square root of the lower marginal block
    w_psi: np.ndarray  # inverse square root of the upper marginal block
    ridge: float

    @property
    def width(self) -> int:
        return self.sigma.shape[0]


def extract_spectrum_arrays(
    r_phi: np.ndarray,
    r_psi: np.ndarray,
    p_cross: np.ndarray,
    ridge: float,
    layer: int = 0,
) -> SpectrumResult:
    """Spectrum of the whitened cross block.

    Singular values of W_phi P W_psi are squared into eigenvalues; values
    must lie in [0, 1] up to a 1e-6 overshoot (warned and clamped). An
    overshoot beyond 1e-3 means the statistics are broken and raises.
    """
    w_phi = linalg.inv_sqrt_sym(r_phi, ridge)
    w_psi = linalg.inv_sqrt_sym(r_psi, ridge)
    svd = linalg.svd_small(w_phi @ np.asarray(p_cross, dtype=np.float64) @ w_psi)
    sigma = svd.singular_values**2
    over = float(sigma.max(initial=0.0)) - 1.0
    if over > _HARD_OVERSHOOT:
        raise SpectrumError(
            f"eigenvalue {1.0 + over:.6f} far above 1: broken statistics at layer {layer}"
        )
    if over > _SOFT_OVERSHOOT:
        warnings.warn(
            f"eigenvalue {1.0 + over:.2e} above 1 at layer {layer}; clamping",
            RuntimeWarning,
            stacklevel=2,
        )
    sigma = np.clip(sigma, 0.0, 1.0)
    return SpectrumResult(
        layer=layer,
        sigma=sigma,
        u_rot=svd.u,
        v_rot=svd.v,
        w_phi=w_phi,
        w_psi=w_psi,
        ridge=float(ridge),
    )


def extract_spectrum(stats: CorrStats, ridge: float, layer: int = 0) -> SpectrumResult:
    r1, r2, p = stats.arrays()
    return extract_spectrum_arrays(r1, r2, p, ridge, layer=layer)


def normalize_features(z: np.ndarray, whitener: np.ndarray, rotation: np.ndarray) -> np.ndarray:
    """Whiten-and-rotate (positions x K) features into basis-function values.

    On the batch the statistics were fitted to, the second moment of the
    result is the identity up to the ridge-induced bias.
    """
    z = np.asarray(z, dtype=np.float64)
    if z.ndim != 2 or z.shape[1] != whitener.shape[0]:
        raise SpectrumError(f"feature shape {z.shape} does not match whitener")
    return z @ whitener @ rotation


def density_ratio(
    phi_hat: np.ndarray,
    psi_hat: np.ndarray,
    sigma: np.ndarray,
    include_constant: bool = True,
) -> np.ndarray | float:
    """sum_k sqrt(sigma_k) phi_k psi_k, optionally plus the constant pair.

    Networks are not forced to represent the constant basis; with
    ``include_constant`` a leading (phi_0 = psi_0 = 1, sigma_0 = 1) term is
    added, which is the convention matching exact finite-alphabet ratios.
    Truncated reconstructions may go negative; no clamping here.
    """
    phi_hat = np.asarray(phi_hat, dtype=np.float64)
    psi_hat = np.asarray(psi_hat, dtype=np.float64)
    sigma = np.asarray(sigma, dtype=np.float64)
    if phi_hat.shape[-1] != sigma.shape[0] or psi_hat.shape[-1] != sigma.shape[0]:
        raise SpectrumError("component count mismatch")
    vals = (phi_hat * np.sqrt(sigma) * psi_hat).sum(axis=-1)
    if include_constant:
        vals = vals + 1.0
    return float(vals) if np.isscalar(vals) or vals.ndim == 0 else vals


def compare_bases(
    features_a: np.ndarray,
    features_b: np.ndarray,
    ridge: float = 0.0,
) -> np.ndarray:
    """Alignment eigenvalues between two models' feature spans.

    Both (positions x K) sets are whitened on the same evaluation batch;
    the singular values of their cross-correlation measure how parallel the
    spanned function spaces are (1 parallel, 0 orthogonal directions).
    """
    a = np.asarray(features_a, dtype=np.float64)
    b = np.asarray(features_b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2 or a.shape[0] != b.shape[0]:
        raise SpectrumError("feature sets must share the evaluation batch")
    if a.shape[1] != b.shape[1]:
        raise SpectrumError(f"feature widths differ: {a.shape[1]} vs {b.shape[1]}")
    n = a.shape[0]
    wa = linalg.inv_sqrt_sym(a.T @ a / n, ridge)
    wb = linalg.inv_sqrt_sym(b.T @ b / n, ridge)
    cross = (a @ wa).T @ (b @ wb) / n
    return linalg.svd_small(cross).singular_values


def optimal_cost(sigma: np.ndarray, k: int | None = None, ridge: float = 0.0) -> float:
    """Theoretical cost aggregation sum_k log(1 - sigma_k) over the leading k
    components, with each eigenvalue capped at 1 - ridge so unit components
    contribute log(ridge) instead of diverging."""
    sigma = np.asarray(sigma, dtype=np.float64)
    if k is not None:
        sigma = sigma[:k]
    capped = np.minimum(sigma, 1.0 - ridge)
    return float(np.log(1.0 - capped).sum())


def write_spectrum_csv(path, results: list[SpectrumResult]) -> None:
    """One row per (layer, rank): header ``layer,rank,eigenvalue``, 17
    significant digits."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["layer", "rank", "eigenvalue"])
        for res in results:
            for rank, val in enumerate(res.sigma, start=1):
                writer.writerow([res.layer, rank, f"{val:.17g}"])
