"""Symmetric-matrix calculus, Gauss-Hermite expectations and min-norm solves."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

DEFAULT_CLAMP = 1e-12
DEFAULT_REL_TOL = 1e-10
DEFAULT_QUAD_ORDER = 64


class NotSymmetric(ValueError):
    pass


class NotPsd(ValueError):
    pass


class InverseUnstable(np.linalg.LinAlgError):
    """Smallest eigenvalue is below ``rel_tol`` times the largest."""

    def __init__(self, lam_min: float, lam_max: float, rel_tol: float):
        super().__init__(f"lambda_min={lam_min:.3e} < rel_tol*lambda_max={rel_tol * lam_max:.3e}")
        self.lam_min = lam_min
        self.lam_max = lam_max
        self.rel_tol = rel_tol


class DegenerateFit(ValueError):
    pass


@dataclass(frozen=True)
class SymEig:
    eigenvalues: np.ndarray  # descending
    eigenvectors: np.ndarray  # columns

    def reconstruct(self) -> np.ndarray:
        Q = self.eigenvectors
        return (Q * self.eigenvalues) @ Q.T


@dataclass(frozen=True)
class PsdCertificate:
    lambda_min: float
    rel_threshold: float

    @property
    def ok(self) -> bool:
        return self.lambda_min >= -self.rel_threshold


def symmetrize(A: np.ndarray, tol: float = 1e-12) -> np.ndarray:
    A = np.asarray(A, dtype=np.float64)
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise NotSymmetric(f"expected a square matrix, got shape {A.shape}")
    scale = 1.0 + (np.max(np.abs(A)) if A.size else 0.0)
    if A.size and np.max(np.abs(A - A.T)) > tol * scale:
        raise NotSymmetric(f"asymmetry {np.max(np.abs(A - A.T)):.3e} exceeds {tol:g}")
    return 0.5 * (A + A.T)


def sym_eig(A: np.ndarray) -> SymEig:
    lam, Q = np.linalg.eigh(symmetrize(A))
    return SymEig(lam[::-1].copy(), Q[:, ::-1].copy())


def psd_certificate(A: np.ndarray, rel_threshold: float = 1e-8) -> PsdCertificate:
    return PsdCertificate(float(np.linalg.eigvalsh(symmetrize(A))[0]), rel_threshold)


def psd_sqrt(A: np.ndarray, clamp: float = DEFAULT_CLAMP) -> np.ndarray:
    if clamp < 0:
        raise ValueError("clamp must be >= 0")
    eig = sym_eig(A)
    root = np.sqrt(np.maximum(eig.eigenvalues, clamp))
    Q = eig.eigenvectors
    S = (Q * root) @ Q.T
    return 0.5 * (S + S.T)


def psd_inv_sqrt(A: np.ndarray, rel_tol: float = DEFAULT_REL_TOL) -> np.ndarray:
    eig = sym_eig(A)
    lam_max, lam_min = eig.eigenvalues[0], eig.eigenvalues[-1]
    if lam_max <= 0 or lam_min < rel_tol * lam_max:
        raise InverseUnstable(float(lam_min), float(lam_max), rel_tol)
    Q = eig.eigenvectors
    S = (Q / np.sqrt(eig.eigenvalues)) @ Q.T
    return 0.5 * (S + S.T)


def check_invertible(K: np.ndarray, rel_tol: float = DEFAULT_REL_TOL) -> tuple[float, float]:
    lam = np.linalg.eigvalsh(symmetrize(K))
    if lam[-1] <= 0 or lam[0] < rel_tol * lam[-1]:
        raise InverseUnstable(float(lam[0]), float(lam[-1]), rel_tol)
    return float(lam[0]), float(lam[-1])


_GH_CACHE: dict[int, tuple[np.ndarray, np.ndarray]] = {}


def gauss_hermite_normal(order: int) -> tuple[np.ndarray, np.ndarray]:
    """Nodes and weights for E[f(Z)], Z ~ N(0, 1)."""
    if order not in _GH_CACHE:
        x, w = np.polynomial.hermite.hermgauss(order)
        _GH_CACHE[order] = (np.sqrt(2.0) * x, w / np.sqrt(np.pi))
    return _GH_CACHE[order]


def bivariate_h_expect_many(kii, kij, kjj, sigma1: float, h: Callable[[np.ndarray], np.ndarray],
                            quad_order: int = DEFAULT_QUAD_ORDER, psd_tol: float = 1e-10) -> np.ndarray:
    """Vectorised E[h(u) h(v)] with (u, v) ~ N(0, sigma1^2 [[kii, kij], [kij, kjj]]).

    Tensor Gauss-Hermite after a Cholesky factorisation; near-singular 2x2 blocks
    (det < 1e-12 trace^2) collapse to a 1-D rule along the rank-1 direction.
    """
    if sigma1 <= 0:
        raise ValueError("sigma1 must be positive")
    kii, kij, kjj = (np.atleast_1d(np.asarray(a, dtype=np.float64)) for a in (kii, kij, kjj))
    kii, kij, kjj = np.broadcast_arrays(kii, kij, kjj)
    scale = 1.0 + np.maximum(np.abs(kii), np.abs(kjj))
    det = kii * kjj - kij * kij
    trace = kii + kjj
    if np.any(kii < -psd_tol * scale) or np.any(kjj < -psd_tol * scale) or np.any(det < -psd_tol * scale**2):
        raise NotPsd("2x2 covariance block is indefinite beyond tolerance")

    s2 = sigma1 * sigma1
    a = np.sqrt(np.maximum(kii, 0.0) * s2)
    x, w = gauss_hermite_normal(quad_order)
    degenerate = det <= 1e-12 * trace**2
    out = np.empty(kii.shape)

    full = ~degenerate
    if np.any(full):
        af = a[full]
        b = kij[full] * s2 / af
        c = np.sqrt(np.maximum(kjj[full] * s2 - b * b, 0.0))
        hu = h(af[:, None] * x[None, :])  # (P, q)
        v = b[:, None, None] * x[None, :, None] + c[:, None, None] * x[None, None, :]
        hv = h(v)  # (P, q, q)
        out[full] = np.einsum("p,q,np,npq->n", w, w, hu, hv)

    if np.any(degenerate):
        kd_ii, kd_ij, kd_jj = kii[degenerate], kij[degenerate], kjj[degenerate]
        su = np.sqrt(np.maximum(kd_ii, 0.0) * s2)
        sv = np.sqrt(np.maximum(kd_jj, 0.0) * s2)
        sign = np.where(kd_ij < 0, -1.0, 1.0)
        # u = su z, v = +-sv z when both variances are positive; otherwise one side is 0
        hu = h(su[:, None] * x[None, :])
        hv = h(sign[:, None] * sv[:, None] * x[None, :])
        out[degenerate] = np.einsum("p,np,np->n", w, hu, hv)
    return out


def bivariate_h_expect(kii: float, kij: float, kjj: float, sigma1: float,
                       h: Callable[[np.ndarray], np.ndarray], quad_order: int = DEFAULT_QUAD_ORDER) -> float:
    return float(bivariate_h_expect_many(kii, kij, kjj, sigma1, h, quad_order)[0])


def min_norm_solve(H: np.ndarray, target: np.ndarray, m: int | None = None,
                   rel_tol: float = DEFAULT_REL_TOL) -> np.ndarray:
    """Minimum-norm w with (1/m) H w = target, via w = H^T K^{-1} target, K = H H^T / m.

    ``target`` may be a vector (length N) or an N x k matrix of targets solved at once.
    """
    H = np.asarray(H, dtype=np.float64)
    m = H.shape[1] if m is None else int(m)
    if m < 1:
        raise ValueError("m must be >= 1")
    K = (H @ H.T) / m
    check_invertible(K, rel_tol)
    z = np.linalg.solve(K, np.asarray(target, dtype=np.float64))
    return H.T @ z


def fit_loglog_slope(xs, ys) -> tuple[float, float]:
    xs = np.asarray(xs, dtype=np.float64)
    ys = np.asarray(ys, dtype=np.float64)
    if xs.shape != ys.shape or xs.size < 3:
        raise DegenerateFit(f"need >= 3 paired points, got {xs.size}")
    if np.any(xs <= 0) or np.any(ys <= 0):
        raise DegenerateFit("log-log fit needs positive values")
    if np.all(xs == xs[0]):
        raise DegenerateFit("all abscissae are equal")
    lx, ly = np.log(xs), np.log(ys)
    A = np.column_stack([lx, np.ones_like(lx)])
    (slope, intercept), *_ = np.linalg.lstsq(A, ly, rcond=None)
    return float(slope), float(intercept)
