"""Legendre multiwavelet basis: scaling functions, two-scale filters, derivative blocks.

The scaling functions on the unit interval are the renormalized shifted
Legendre polynomials phi_j(x) = sqrt(2j+1) P_j(2x-1), j < k, which are an
orthonormal basis of the degree-(k-1) polynomials on [0, 1].  The wavelet
rows complete the 2k x 2k two-scale matrix to an orthogonal one; they are
obtained by Gram-Schmidt orthogonalization of the odd extensions
sign(x - 1/2) * phi_j(x) against the scaling rows.
"""

from __future__ import annotations

import numpy as np

__all__ = ["MultiwaveletBasis"]

_BASIS_CACHE: dict[int, "MultiwaveletBasis"] = {}


def _legendre_values(k: int, t: np.ndarray) -> np.ndarray:
    """P_j(t) for j < k, shape (k, len(t))."""
    t = np.asarray(t, dtype=float)
    out = np.empty((k, t.size))
    out[0] = 1.0
    if k > 1:
        out[1] = t
    for j in range(2, k):
        out[j] = ((2 * j - 1) * t * out[j - 1] - (j - 1) * out[j - 2]) / j
    return out


def _legendre_derivs(k: int, t: np.ndarray) -> np.ndarray:
    """dP_j/dt for j < k, shape (k, len(t))."""
    t = np.asarray(t, dtype=float)
    p = _legendre_values(k, t)
    out = np.zeros((k, t.size))
    for j in range(1, k):
        # (1-t^2) P_j' = j (P_{j-1} - t P_j); at |t|=1 use P_j'(1)=j(j+1)/2 parity form
        denom = 1.0 - t * t
        safe = np.abs(denom) > 1e-13
        out[j, safe] = j * (p[j - 1, safe] - t[safe] * p[j, safe]) / denom[safe]
        edge = ~safe
        if np.any(edge):
            out[j, edge] = np.sign(t[edge]) ** (j + 1) * j * (j + 1) / 2.0
    return out


class MultiwaveletBasis:
    """Order-k multiwavelet basis data shared by every tree of the same order."""

    def __init__(self, k: int):
        if k < 2:
            raise ValueError(f"multiwavelet order must be >= 2, got {k}")
        self.k = k
        t, w = np.polynomial.legendre.leggauss(k)
        # quadrature on [0, 1]; k-point Gauss-Legendre is exact through degree 2k-1
        self.quad_x = (t + 1.0) / 2.0
        self.quad_w = w / 2.0

        self._norms = np.sqrt(2.0 * np.arange(k) + 1.0)

        # two-scale scaling blocks: h0[j,i] = <phi_j, sqrt(2) phi_i(2x)> on [0,1/2]
        phi_left = self.scaling_values(self.quad_x / 2.0)
        phi_right = self.scaling_values((self.quad_x + 1.0) / 2.0)
        phi = self.scaling_values(self.quad_x)
        wphi = phi * self.quad_w
        self.h0 = (phi_left @ wphi.T) / np.sqrt(2.0)
        self.h1 = (phi_right @ wphi.T) / np.sqrt(2.0)

        self.g0, self.g1 = self._build_wavelet_rows()
        self.filter = np.block([[self.h0, self.h1], [self.g0, self.g1]])
        err = np.abs(self.filter @ self.filter.T - np.eye(2 * k)).max()
        if err > 1e-12:
            raise RuntimeError(f"two-scale filter not orthogonal (deviation {err:.2e})")

        self.vals0 = self.scaling_values(np.array([0.0]))[:, 0]
        self.vals1 = self.scaling_values(np.array([1.0]))[:, 0]
        dphi = self.scaling_derivs(self.quad_x)
        cross = dphi @ wphi.T  # <phi_i', phi_j>
        # central-difference derivative blocks on the unit node (neighbor blocks
        # use the average flux at the shared face; a missing neighbor is zero)
        self.deriv_center = 0.5 * (np.outer(self.vals1, self.vals1)
                                   - np.outer(self.vals0, self.vals0)) - cross
        self.deriv_right = 0.5 * np.outer(self.vals1, self.vals0)
        self.deriv_left = -0.5 * np.outer(self.vals0, self.vals1)

    def _build_wavelet_rows(self) -> tuple[np.ndarray, np.ndarray]:
        k = self.k
        scaling_rows = np.hstack([self.h0, self.h1])  # coordinates in the child basis
        rows = []
        for j in range(k):
            v = np.concatenate([-self.h0[j], self.h1[j]])
            for _ in range(2):  # re-orthogonalize to reach round-off orthogonality
                for r in scaling_rows:
                    v -= (r @ v) * r
                for r in rows:
                    v -= (r @ v) * r
            nrm = np.linalg.norm(v)
            if nrm < 1e-10:
                raise RuntimeError("degenerate wavelet candidate")
            v /= nrm
            if v[np.argmax(np.abs(v))] < 0:
                v = -v
            rows.append(v)
        g = np.array(rows)
        return g[:, :k].copy(), g[:, k:].copy()

    def scaling_values(self, x: np.ndarray) -> np.ndarray:
        """phi_j(x) on [0,1] for j < k, shape (k, len(x))."""
        return self._norms[:, None] * _legendre_values(self.k, 2.0 * np.asarray(x) - 1.0)

    def scaling_derivs(self, x: np.ndarray) -> np.ndarray:
        """phi_j'(x) on [0,1], shape (k, len(x))."""
        return 2.0 * self._norms[:, None] * _legendre_derivs(self.k, 2.0 * np.asarray(x) - 1.0)

    @staticmethod
    def get(k: int) -> "MultiwaveletBasis":
        if k not in _BASIS_CACHE:
            _BASIS_CACHE[k] = MultiwaveletBasis(k)
        return _BASIS_CACHE[k]
