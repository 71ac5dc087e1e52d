"""Correlation statistics and log-determinant dependence costs.

Three statistics builders cover the three coupling patterns:

* ``stats_pairwise``   -- two aligned feature sets, one row per position;
* ``stats_external``   -- L view feature sets against the group feature
                          produced from their collection;
* ``stats_internal``   -- neighboring feature-map scales, where every upper
                          element is paired with the window of lower
                          elements its convolution stack read.

Each returns the (K x K, K x K, K x K) triple of auto/cross correlation
blocks as differentiable tensors, together with the raw addition counts.
The dependence cost is logdet(joint) - logdet(lower) - logdet(upper) with a
shared ridge. Training descends a linearized surrogate whose coefficient
matrices are frozen ridge inverses of adaptive-filter estimates of the same
blocks; with smoothing 0 the estimates equal the instantaneous statistics
and the surrogate gradient is the exact cost gradient.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import linalg
from .autodiff import Tensor

__all__ = [
    "CostError",
    "CorrStats",
    "AcfFilterBank",
    "stats_pairwise",
    "stats_external",
    "stats_internal",
    "covering_counts",
    "joint_from_blocks",
    "logdet_cost",
    "logdet_cost_tensor",
    "surrogate_cost",
    "exact_preconditioners",
    "filter_update",
]


class CostError(ValueError):
    pass


@dataclass
class CorrStats:
    """Correlation blocks for one layer pair (differentiable tensors)."""

    r_phi: Tensor
    r_psi: Tensor
    p_cross: Tensor
    m_phi: int
    m_psi: int

    @property
    def width(self) -> int:
        return self.r_phi.shape[0]

    def arrays(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Detached (r_phi, r_psi, p_cross) with the auto blocks symmetrized."""
        return (
            linalg.sym(self.r_phi.data),
            linalg.sym(self.r_psi.data),
            self.p_cross.data.copy(),
        )

    def joint_array(self) -> np.ndarray:
        r1, r2, p = self.arrays()
        return joint_from_blocks(r1, r2, p)


def joint_from_blocks(r_phi: np.ndarray, r_psi: np.ndarray, p_cross: np.ndarray) -> np.ndarray:
    """Assemble [[r_phi, p], [p^T, r_psi]]."""
    top = np.concatenate([r_phi, p_cross], axis=1)
    bottom = np.concatenate([p_cross.T, r_psi], axis=1)
    return np.concatenate([top, bottom], axis=0)


def stats_pairwise(zf: Tensor, zg: Tensor) -> CorrStats:
    """Second-moment blocks of two paired (positions x K) feature sets."""
    if zf.shape[0] != zg.shape[0]:
        raise CostError(f"position counts differ: {zf.shape[0]} vs {zg.shape[0]}")
    if zf.shape[0] == 0:
        raise CostError("empty position set")
    return CorrStats(
        r_phi=ad.outer_stats(zf, zf),
        r_psi=ad.outer_stats(zg, zg),
        p_cross=ad.outer_stats(zf, zg),
        m_phi=zf.shape[0],
        m_psi=zg.shape[0],
    )


def stats_external(view_features: list[Tensor], group_features: Tensor) -> CorrStats:
    """Blocks coupling individual view features to their group feature.

    ``view_features`` holds L tensors of shape (batch x K); the lower
    marginal pools all L*batch rows, the cross block averages the L per-view
    cross products (equivalently: the view-mean against the group feature).
    """
    L = len(view_features)
    if L < 1:
        raise CostError("need at least one view")
    n, k = view_features[0].shape
    for v in view_features:
        if v.shape != (n, k):
            raise CostError("view feature shapes differ")
    if group_features.shape[0] != n:
        raise CostError(
            f"batch mismatch: views have {n} rows, group has {group_features.shape[0]}"
        )
    pooled = view_features[0] if L == 1 else ad.concat(view_features, axis=0)
    mean_view = view_features[0]
    if L > 1:
        acc = view_features[0]
        for v in view_features[1:]:
            acc = ad.add(acc, v)
        mean_view = ad.scale(acc, 1.0 / L)
    return CorrStats(
        r_phi=ad.outer_stats(pooled, pooled),
        r_psi=ad.outer_stats(group_features, group_features),
        p_cross=ad.outer_stats(mean_view, group_features),
        m_phi=L * n,
        m_psi=n,
    )


def covering_counts(lower_dims: tuple[int, int], window: tuple[int, int]) -> np.ndarray:
    """How many upper windows contain each lower position.

    Interior positions of the lower map are read by window-height *
    window-width upper elements; positions near the border by fewer. The
    counts are separable per axis.
    """
    hl, wl = lower_dims
    dm, dn = window
    hu, wu = hl - dm + 1, wl - dn + 1
    if hu < 1 or wu < 1:
        raise CostError("window larger than lower map")
    rows = np.arange(hl)
    cols = np.arange(wl)
    row_counts = np.minimum(rows, hu - 1) - np.maximum(0, rows - dm + 1) + 1
    col_counts = np.minimum(cols, wu - 1) - np.maximum(0, cols - dn + 1) + 1
    return np.outer(row_counts, col_counts).astype(np.float64)


def stats_internal(
    z_lower: Tensor,
    z_upper: Tensor,
    window: tuple[int, int] | None = None,
    geom=None,
    s: int | None = None,
) -> CorrStats:
    """Blocks coupling a padded lower feature map to the upper map above it.

    For every upper position, its window of lower positions contributes:
    the lower block accumulates lower outer products over all (window,
    position) pairs, the cross block pairs each window element with the
    single upper vector. Border lower elements are covered by fewer windows
    and therefore weigh less, which is exactly the boundary convention of
    iterating upper elements with their full windows.

    The window is taken from ``geom``/``s`` when given (with a dims check)
    or passed directly as (dM, dN).
    """
    if geom is not None:
        if s is None:
            raise CostError("scale index required with a geometry")
        if s not in geom.window:
            raise CostError(f"no neighboring pair at scale {s}")
        window = geom.window[s]
        if z_lower.shape[2:] != geom.lower_dims[s] or z_upper.shape[2:] != geom.dims[s + 1]:
            raise CostError(
                f"feature maps {z_lower.shape[2:]}/{z_upper.shape[2:]} do not match "
                f"geometry {geom.lower_dims[s]}/{geom.dims[s + 1]} at scale {s}"
            )
    if window is None:
        raise CostError("window required when no geometry is given")
    dm, dn = int(window[0]), int(window[1])
    n, k, hl, wl = z_lower.shape
    nu, ku, hu, wu = z_upper.shape
    if n != nu or k != ku:
        raise CostError("lower/upper batch or channel mismatch")
    if (hl - dm + 1, wl - dn + 1) != (hu, wu):
        raise CostError(
            f"window {dm}x{dn} does not map {hl}x{wl} onto {hu}x{wu}"
        )
    counts = covering_counts((hl, wl), (dm, dn))
    weights = np.tile(counts.reshape(-1), n)
    lower_rows = ad.positions_by_channels(z_lower)
    upper_rows = ad.positions_by_channels(z_upper)
    r_phi = ad.outer_stats(lower_rows, lower_rows, weights=weights)
    r_psi = ad.outer_stats(upper_rows, upper_rows)
    boxed = ad.positions_by_channels(ad.window_sum(z_lower, dm, dn))
    p_cross = ad.scale(ad.outer_stats(boxed, upper_rows), 1.0 / (dm * dn))
    return CorrStats(
        r_phi=r_phi,
        r_psi=r_psi,
        p_cross=p_cross,
        m_phi=n * hu * wu * dm * dn,
        m_psi=n * hu * wu,
    )


def logdet_cost(stats: CorrStats, ridge: float) -> float:
    """logdet(joint + rI) - logdet(lower + rI) - logdet(upper + rI).

    Non-positive up to a ridge-sized bias for any valid second-moment
    statistics. Raised factorization failures signal ill-conditioned blocks.
    """
    r1, r2, _ = stats.arrays()
    joint = stats.joint_array()
    return (
        linalg.cholesky_logdet(joint, ridge)
        - linalg.cholesky_logdet(r1, ridge)
        - linalg.cholesky_logdet(r2, ridge)
    )


def logdet_cost_tensor(stats: CorrStats, ridge: float) -> Tensor:
    """The same cost as a differentiable scalar (gradient flows through the
    log-determinants themselves); used for exact-gradient cross-checks."""
    top = ad.concat([stats.r_phi, stats.p_cross], axis=1)
    bottom = ad.concat([ad.transpose2d(stats.p_cross), stats.r_psi], axis=1)
    joint = ad.concat([top, bottom], axis=0)
    val = ad.logdet_psd(joint, ridge)
    val = ad.add(val, ad.scale(ad.logdet_psd(stats.r_phi, ridge), -1.0))
    return ad.add(val, ad.scale(ad.logdet_psd(stats.r_psi, ridge), -1.0))


def exact_preconditioners(
    stats: CorrStats, ridge: float
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Ridge inverses of the instantaneous blocks (the smoothing-0 case)."""
    r1, r2, _ = stats.arrays()
    return (
        linalg.ridge_inverse(r1, ridge),
        linalg.ridge_inverse(r2, ridge),
        linalg.ridge_inverse(stats.joint_array(), ridge),
    )


def surrogate_cost(
    stats: CorrStats,
    precond: tuple[np.ndarray, np.ndarray, np.ndarray],
) -> Tensor:
    """Linearized cost trace(C_joint R_joint) - trace(C_lo R_lo) - trace(C_up R_up).

    The coefficient matrices are treated as constants, so the gradient with
    respect to network parameters is trace(C dR/dtheta) for each block: the
    log-determinant gradient with estimated inverses. When the estimators
    equal the instantaneous statistics this is the exact cost gradient.
    """
    c_phi, c_psi, c_joint = precond
    k = stats.width
    if c_phi.shape != (k, k) or c_psi.shape != (k, k) or c_joint.shape != (2 * k, 2 * k):
        raise CostError("preconditioner shapes do not match the statistics")
    cj = linalg.sym(c_joint)
    c11, c12, c22 = cj[:k, :k], cj[:k, k:], cj[k:, k:]
    val = ad.weighted_sum(stats.r_phi, c11)
    val = ad.add(val, ad.scale(ad.weighted_sum(stats.p_cross, c12), 2.0))
    val = ad.add(val, ad.weighted_sum(stats.r_psi, c22))
    val = ad.add(val, ad.scale(ad.weighted_sum(stats.r_phi, linalg.sym(c_phi)), -1.0))
    return ad.add(val, ad.scale(ad.weighted_sum(stats.r_psi, linalg.sym(c_psi)), -1.0))


class AcfFilterBank:
    """Exponentially smoothed, bias-corrected estimators of the correlation
    blocks, one triple per cost site.

    update(site, ...) performs est <- beta*est + (1-beta)*value from a zero
    initialization, then divides by (1 - beta^k). With beta fixed the
    corrected estimate is an exact exponentially weighted average of the
    inputs; with beta = 0 it is the last input itself.
    """

    def __init__(self, beta: float):
        if not (0.0 <= beta < 1.0):
            raise CostError(f"smoothing beta must lie in [0, 1), got {beta}")
        self.beta = float(beta)
        self.sites: dict[str, dict] = {}

    def update(
        self,
        site: str,
        r_phi: np.ndarray,
        r_psi: np.ndarray,
        joint: np.ndarray,
    ) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        st = self.sites.get(site)
        if st is None:
            st = {
                "phi": np.zeros_like(r_phi),
                "psi": np.zeros_like(r_psi),
                "joint": np.zeros_like(joint),
                "k": 0,
            }
            self.sites[site] = st
        b = self.beta
        st["k"] += 1
        st["phi"] = b * st["phi"] + (1.0 - b) * r_phi
        st["psi"] = b * st["psi"] + (1.0 - b) * r_psi
        st["joint"] = b * st["joint"] + (1.0 - b) * joint
        corr = 1.0 - b ** st["k"]
        return st["phi"] / corr, st["psi"] / corr, st["joint"] / corr

    def named_arrays(self) -> list[tuple[str, np.ndarray]]:
        out = []
        for site in sorted(self.sites):
            st = self.sites[site]
            out.append((f"bank.{site}.phi", st["phi"]))
            out.append((f"bank.{site}.psi", st["psi"]))
            out.append((f"bank.{site}.joint", st["joint"]))
            out.append((f"bank.{site}.k", np.asarray(float(st["k"]))))
        return out

    def load_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        sites: dict[str, dict] = {}
        for name, value in arrays.items():
            parts = name.split(".")
            if len(parts) != 3 or parts[0] != "bank":
                raise CostError(f"unrecognized filter-bank entry {name!r}")
            _, site, field = parts
            st = sites.setdefault(site, {})
            st[field] = int(value) if field == "k" else np.array(value, dtype=np.float64)
        for site, st in sites.items():
            if set(st) != {"phi", "psi", "joint", "k"}:
                raise CostError(f"incomplete filter-bank site {site!r}")
        self.sites = sites


def filter_update(
    bank: AcfFilterBank, site: str, stats: CorrStats
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Feed one site's instantaneous statistics through its adaptive filter,
    returning the bias-corrected estimator triple (lower, upper, joint)."""
    r1, r2, _ = stats.arrays()
    return bank.update(site, r1, r2, stats.joint_array())
