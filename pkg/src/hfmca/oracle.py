"""Exact ground truth on finite alphabets.

Closed-form density-ratio decompositions of joint tables, top-down chains
over small alphabets with exact enumeration, and the telescoping identity
between the global log density ratio and the sum of neighboring-scale log
ratios. Everything here is exact (up to float64 roundoff), which is the
whole point: the learned pipeline is verified against these values.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

__all__ = [
    "OracleError",
    "JointTable",
    "ExactDecomposition",
    "ChainJoint",
    "exact_decompose",
    "definition_kernel",
    "chain_joint",
    "telescoping_check",
    "onehot_embed",
    "read_joint_csv",
]

_STATE_CAP = 1_000_000


class OracleError(ValueError):
    pass


@dataclass
class JointTable:
    """A joint distribution over an n x m alphabet."""

    p: np.ndarray

    def __post_init__(self):
        self.p = np.asarray(self.p, dtype=np.float64)
        if self.p.ndim != 2:
            raise OracleError("joint table must be a matrix")
        if (self.p < 0).any():
            raise OracleError("negative probability mass")
        total = self.p.sum()
        if abs(total - 1.0) > 1e-12:
            raise OracleError(f"total mass {total!r} is not 1")
        if (self.marginal_x() <= 0).any() or (self.marginal_y() <= 0).any():
            raise OracleError("both marginals must be strictly positive")

    @property
    def n(self) -> int:
        return self.p.shape[0]

    @property
    def m(self) -> int:
        return self.p.shape[1]

    def marginal_x(self) -> np.ndarray:
        return self.p.sum(axis=1)

    def marginal_y(self) -> np.ndarray:
        return self.p.sum(axis=0)

    def ratio_table(self) -> np.ndarray:
        """p(x, y) / (p(x) p(y)); identically 1 under independence."""
        return self.p / np.outer(self.marginal_x(), self.marginal_y())


@dataclass
class ExactDecomposition:
    """Eigenvalues and basis tables of the orthonormal ratio decomposition.

    sigma[0] is always 1 with a constant first basis pair; the bases are
    orthonormal under their marginals and reconstruct the ratio as
    sum_k sqrt(sigma_k) phi_k(x) psi_k(y).
    """

    sigma: np.ndarray
    phi: np.ndarray  # n x K, K = min(n, m)
    psi: np.ndarray  # m x K

    def reconstruct(self) -> np.ndarray:
        return (self.phi * np.sqrt(self.sigma)) @ self.psi.T


def exact_decompose(joint: JointTable) -> ExactDecomposition:
    """SVD of p(x,y)/sqrt(p(x)p(y)); eigenvalues are squared singular values
    and the bases are the singular vectors rescaled by the marginals."""
    px = joint.marginal_x()
    py = joint.marginal_y()
    q = joint.p / np.sqrt(np.outer(px, py))
    u, s, vt = np.linalg.svd(q)
    k = min(joint.n, joint.m)
    u, s, v = u[:, :k], s[:k], vt.T[:, :k]
    phi = u / np.sqrt(px)[:, None]
    psi = v / np.sqrt(py)[:, None]
    for idx in range(k):
        pivot = np.argmax(np.abs(phi[:, idx]))
        if phi[pivot, idx] < 0:
            phi[:, idx] = -phi[:, idx]
            psi[:, idx] = -psi[:, idx]
    return ExactDecomposition(sigma=s**2, phi=phi, psi=psi)


def definition_kernel(view_symbols: np.ndarray, n_lower: int) -> np.ndarray:
    """Empirical conditional built the multiview way: each upper symbol owns
    L lower symbols (its views) and conditions uniformly over them, so every
    row is a pile of 1/L masses."""
    views = np.asarray(view_symbols, dtype=np.int64)
    if views.ndim != 2:
        raise OracleError("view table must be (n_upper, L)")
    if (views < 0).any() or (views >= n_lower).any():
        raise OracleError("view symbol outside the lower alphabet")
    n_upper, L = views.shape
    kernel = np.zeros((n_upper, n_lower))
    for row in range(n_upper):
        for sym in views[row]:
            kernel[row, sym] += 1.0 / L
    return kernel


@dataclass
class ChainJoint:
    """Exact joint over a top-down chain x_1 .. x_S.

    Built from a top-level marginal and row-stochastic kernels
    p(x_s | x_{s+1}); the full joint is enumerated (axis s-1 indexes x_s).
    """

    joint: np.ndarray

    @property
    def levels(self) -> int:
        return self.joint.ndim

    def marginal(self, s: int) -> np.ndarray:
        axes = tuple(i for i in range(self.levels) if i != s - 1)
        return self.joint.sum(axis=axes)

    def pair_joint(self, s: int) -> JointTable:
        """Joint of (x_s, x_{s+1}) by marginalizing everything else."""
        axes = tuple(i for i in range(self.levels) if i not in (s - 1, s))
        return JointTable(self.joint.sum(axis=axes))


def chain_joint(top_marginal: np.ndarray, kernels_down: list[np.ndarray]) -> ChainJoint:
    """Enumerate the joint of a chain from its top marginal and the downward
    kernels [p(x_{S-1}|x_S), ..., p(x_1|x_2)]; total state count capped at 1e6."""
    top = np.asarray(top_marginal, dtype=np.float64)
    if top.ndim != 1 or (top < 0).any() or abs(top.sum() - 1.0) > 1e-12:
        raise OracleError("top marginal must be a probability vector")
    sizes = [top.shape[0]]
    for ker in kernels_down:
        ker = np.asarray(ker, dtype=np.float64)
        if ker.ndim != 2 or ker.shape[0] != sizes[-1]:
            raise OracleError("kernel rows must match the level above")
        if (ker < 0).any() or np.abs(ker.sum(axis=1) - 1.0).max() > 1e-12:
            raise OracleError("kernels must be row-stochastic")
        sizes.append(ker.shape[1])
    states = int(np.prod(sizes))
    if states > _STATE_CAP:
        raise OracleError(f"chain has {states} joint states, cap is {_STATE_CAP}")
    # Build with axes ordered (x_S, x_{S-1}, ..., x_1), then reverse to
    # (x_1, ..., x_S).
    joint = top.copy()
    for ker in kernels_down:
        joint = joint[..., None] * np.asarray(ker, dtype=np.float64)
    joint = np.transpose(joint, axes=tuple(range(joint.ndim - 1, -1, -1)))
    return ChainJoint(joint=joint)


def telescoping_check(chain: ChainJoint) -> float:
    """Max pointwise defect between the global log density ratio and the sum
    of neighboring-pair log ratios, over the support of the chain joint."""
    S = chain.levels
    marginals = [chain.marginal(s) for s in range(1, S + 1)]
    for marg in marginals:
        if (marg <= 0).any():
            raise OracleError("zero marginal mass on some symbol")
    support = chain.joint > 0
    if not support.any():
        raise OracleError("empty support")
    log_joint = np.full(chain.joint.shape, -np.inf)
    log_joint[support] = np.log(chain.joint[support])
    log_prod = np.zeros(chain.joint.shape)
    for s, marg in enumerate(marginals):
        shape = [1] * S
        shape[s] = marg.shape[0]
        log_prod = log_prod + np.log(marg).reshape(shape)
    lhs = log_joint - log_prod
    rhs = np.zeros(chain.joint.shape)
    for s in range(1, S):
        pair = chain.pair_joint(s)
        ratio = pair.ratio_table()
        if (ratio[_pair_support(chain, s)] <= 0).any():
            raise OracleError(f"zero pairwise ratio on the support at pair {s}")
        shape = [1] * S
        shape[s - 1] = ratio.shape[0]
        shape[s] = ratio.shape[1]
        log_ratio = np.full(ratio.shape, -np.inf)
        log_ratio[ratio > 0] = np.log(ratio[ratio > 0])
        rhs = rhs + log_ratio.reshape(shape)
    defect = np.abs(lhs[support] - rhs[support])
    return float(defect.max())


def _pair_support(chain: ChainJoint, s: int) -> np.ndarray:
    return chain.pair_joint(s).p > 0


def onehot_embed(symbols: np.ndarray, alphabet: int) -> np.ndarray:
    """Symbols -> (N, alphabet, 1, 1) unit-coordinate image tensors, feeding
    discrete distributions through 1x1-conv networks."""
    symbols = np.asarray(symbols, dtype=np.int64).reshape(-1)
    if (symbols < 0).any() or (symbols >= alphabet).any():
        raise OracleError("symbol outside the alphabet")
    out = np.zeros((symbols.shape[0], alphabet, 1, 1))
    out[np.arange(symbols.shape[0]), symbols, 0, 0] = 1.0
    return out


def read_joint_csv(path) -> JointTable:
    """Parse ``x,y,probability`` triplets (optional header) into a table."""
    entries: dict[tuple[int, int], float] = {}
    with open(path, newline="") as fh:
        for row in csv.reader(fh):
            if not row or row[0].strip().lower() in ("x", ""):
                continue
            if len(row) != 3:
                raise OracleError(f"expected x,y,probability rows, got {row!r}")
            x, y, mass = int(row[0]), int(row[1]), float(row[2])
            if x < 0 or y < 0:
                raise OracleError("symbols must be non-negative")
            if (x, y) in entries:
                raise OracleError(f"duplicate entry for ({x}, {y})")
            entries[(x, y)] = mass
    if not entries:
        raise OracleError("empty joint table")
    n = max(x for x, _ in entries) + 1
    m = max(y for _, y in entries) + 1
    p = np.zeros((n, m))
    for (x, y), mass in entries.items():
        p[x, y] = mass
    return JointTable(p)
