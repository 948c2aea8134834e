"""HSIC penalty between covariate representations and binary treatments."""

from __future__ import annotations

from typing import NamedTuple

import numpy as np

from .tensor import Tensor, accumulate, custom, tensor


class KernelPair(NamedTuple):
    K: np.ndarray
    L: np.ndarray


def _sq_dists(U: np.ndarray) -> np.ndarray:
    sq = np.einsum("ij,ij->i", U, U)
    d2 = sq[:, None] + sq[None, :] - 2.0 * (U @ U.T)
    # cancellation leaves ~1e-15 residue; pin the diagonal and clip at 0
    np.fill_diagonal(d2, 0.0)
    return np.maximum(d2, 0.0)


def _treatment_kernel(t: np.ndarray) -> np.ndarray:
    return np.exp(-0.5 * (t[:, None] - t[None, :]) ** 2)


def kernels(U, T) -> KernelPair:
    """Unit-bandwidth Gaussian kernels over representations and treatments."""
    u = U.values if isinstance(U, Tensor) else np.asarray(U, dtype=np.float64)
    t = np.asarray(T, dtype=np.float64).reshape(-1)
    if u.shape[0] != t.shape[0]:
        raise ValueError(f"U has {u.shape[0]} rows but T has {t.shape[0]} entries")
    return KernelPair(np.exp(-0.5 * _sq_dists(u)), _treatment_kernel(t))


def hsic(U, T) -> Tensor:
    """Biased HSIC, tr(K M L M) / N^2 with M the centering matrix.

    Uses tr(K M L M) = sum(K * (M L M)); M L M is symmetric and constant in U.
    With S = dloss/dD (D the squared-distance matrix, S symmetric),
    dloss/dU = 4 (diag(S 1) U - S U).
    """
    U = U if isinstance(U, Tensor) else tensor(U)
    K, L = kernels(U, T)
    N = L.shape[0]
    C = L - L.mean(axis=0, keepdims=True)
    C -= C.mean(axis=1, keepdims=True)
    KC = K * C
    value = KC.sum() / N**2

    def bw(g):
        S = (-0.5 * float(g) / N**2) * KC
        u = U.values
        accumulate(U, 4.0 * (S.sum(axis=1)[:, None] * u - S @ u))

    return custom(np.asarray(value), (U,), bw)
