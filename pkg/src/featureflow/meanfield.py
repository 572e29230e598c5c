"""Gram chains, regression initialisations, ideal particle constructions and eps1 audits.

Random draws are addressed by (layer, column, purpose) streams, so a net of
width m shares its first m columns of every layer-1 draw with any wider net
built from the same seed.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config_io import (PURPOSE_FALLBACK, PURPOSE_INIT, PURPOSE_MC, Dataset, column_normals, stream,
                        write_matrix_csv)
from .dnn import DnnNet, FeatureCache, ShapeMismatch, dnn_forward
from .funcs import Activation, get_activation
from .numerics import (DEFAULT_QUAD_ORDER, DEFAULT_REL_TOL, InverseUnstable, NotPsd, bivariate_h_expect_many,
                       check_invertible, min_norm_solve, psd_inv_sqrt, psd_sqrt, symmetrize)
from .resnet import ResCache, ResNet, resnet_forward

PSD_TOL = 1e-8
DEFAULT_M_REF = 100_000


@dataclass
class GramChain:
    K: list[np.ndarray]  # K_0..K_{L-1}
    sigma1: float
    activation: str
    quad_order: int
    lambda_bar: float

    def export_csv(self, directory: str | os.PathLike, prefix: str = "K") -> list[Path]:
        return [write_matrix_csv(K, Path(directory) / f"{prefix}_{i}.csv") for i, K in enumerate(self.K)]


@dataclass
class BetaGramChain:
    K: list[np.ndarray]  # K^beta_1..K^beta_{L-1}
    stderr: list[np.ndarray]
    M_ref: int
    sigma1: float
    activations: tuple[str, str]
    seed: int

    def layer(self, ell: int) -> np.ndarray:
        """K^beta_ell for ell in 1..L-1."""
        return self.K[ell - 1]

    def export_csv(self, directory: str | os.PathLike, prefix: str = "Kbeta") -> list[Path]:
        return [write_matrix_csv(K, Path(directory) / f"{prefix}_{i + 1}.csv") for i, K in enumerate(self.K)]


@dataclass
class IdealInit:
    family: str
    weights: list[np.ndarray]  # ideal weights, same shapes as the actual net
    particles: dict[str, np.ndarray]  # theta_bar_l / alpha_bar_l / beta_bar_l, N x m
    fallback_used: dict[int, bool] = field(default_factory=dict)
    path: np.ndarray | None = None  # Res-Net: (d + N(L-1)) x m, column i is Theta_bar_i


@dataclass
class Eps1Report:
    categories: dict[str, float]
    eps1: float
    info: dict[str, float] = field(default_factory=dict)


def _psd_check(K: np.ndarray, what: str) -> np.ndarray:
    K = symmetrize(K, tol=1e-10)
    lam = np.linalg.eigvalsh(K)[0]
    if lam < -PSD_TOL * max(1.0, float(np.max(np.abs(K)))):
        raise NotPsd(f"{what} has lambda_min={lam:.3e}")
    return K


def gram_chain(data: Dataset, sigma1: float, h: Activation | str, L: int,
               quad_order: int = DEFAULT_QUAD_ORDER) -> GramChain:
    """K_0 = X X^T / d and K_{l+1}(i,j) = E[h(u) h(v)], (u, v) ~ N(0, sigma1^2 K_l[{i,j}])."""
    if sigma1 <= 0:
        raise ValueError("sigma1 must be positive")
    if L < 2:
        raise ValueError("the chain needs L >= 2")
    h = get_activation(h)
    X = data.X
    N = X.shape[0]
    K = (X @ X.T) / X.shape[1]
    chain = [K]
    iu, ju = np.triu_indices(N)
    for _ in range(1, L):
        vals = bivariate_h_expect_many(K[iu, iu], K[iu, ju], K[ju, ju], sigma1, h, quad_order)
        K = np.empty((N, N))
        K[iu, ju] = vals
        K[ju, iu] = vals
        chain.append(_psd_check(K, "Gram matrix"))
    lam_bar = min(float(np.linalg.eigvalsh(Kl)[0]) for Kl in chain[1:])
    return GramChain(chain, float(sigma1), h.id, quad_order, lam_bar)


def empirical_gram(features: np.ndarray, h: Activation | str) -> np.ndarray:
    """(1/m) sum_i h(theta_i) h(theta_i)^T over the columns of an N x m feature matrix."""
    features = np.asarray(features, dtype=np.float64)
    if features.ndim != 2 or features.shape[1] < 1:
        raise ShapeMismatch("features must be an N x m matrix with m >= 1")
    H = get_activation(h)(features)
    K = H @ H.T / features.shape[1]
    return 0.5 * (K + K.T)


# --- DNN initialisations -------------------------------------------------------------------------

def _dnn_widths(data: Dataset, widths) -> list[int]:
    widths = [int(w) for w in widths]
    if not widths or any(w < 1 for w in widths):
        raise ValueError("hidden widths must be positive")
    return [data.d] + widths + [1]


def init_dnn_standard(data: Dataset, widths, sigma1: float, seed: int, activation="tanh",
                      C3: float = 1.0) -> tuple[DnnNet, FeatureCache]:
    """W_1 ~ N(0, d sigma1^2), W_l ~ N(0, m_{l-1} sigma1^2), W_{L+1} = C3; returns the net and its features."""
    if sigma1 <= 0:
        raise ValueError("sigma1 must be positive")
    full = _dnn_widths(data, widths)
    weights = [column_normals(seed, ell + 1, full[ell], full[ell + 1], np.sqrt(full[ell]) * sigma1)
               for ell in range(len(full) - 2)]
    weights.append(np.full((full[-2], 1), float(C3)))
    net = DnnNet(weights, activation)
    return net, dnn_forward(net, data)


def init_dnn_fixed_variance(data: Dataset, widths, sigma: float, seed: int, activation="tanh") -> DnnNet:
    """Every weight i.i.d. N(0, sigma^2), independent of the widths."""
    full = _dnn_widths(data, widths)
    return DnnNet([column_normals(seed, ell + 1, full[ell], full[ell + 1], sigma)
                   for ell in range(len(full) - 1)], activation)


def regress_dnn(net: DnnNet, cache: FeatureCache, C3: float = 1.0, rel_tol: float = DEFAULT_REL_TOL) -> DnnNet:
    """Replace W_2..W_L by the per-node minimum-norm weights that reproduce ``cache`` features."""
    widths = net.widths
    weights = [net.weights[0].copy()]
    for ell in range(1, net.depth):
        weights.append(min_norm_solve(cache.acts[ell - 1], cache.thetas[ell], widths[ell], rel_tol))
    weights.append(np.full((widths[-2], 1), float(C3)))
    return DnnNet(weights, net.activation)


def init_dnn_regression(data: Dataset, widths, sigma1: float, seed: int, activation="tanh",
                        C3: float = 1.0, rel_tol: float = DEFAULT_REL_TOL) -> DnnNet:
    """Standard init followed by min-norm regression at every middle layer.

    Raises InverseUnstable when an empirical Gram matrix is too ill-conditioned.
    """
    net, cache = init_dnn_standard(data, widths, sigma1, seed, activation, C3)
    return regress_dnn(net, cache, C3, rel_tol)


def _gaussian_columns(seed: int, layer: int, K: np.ndarray, sigma1: float, cols: int) -> np.ndarray:
    """cols i.i.d. N(0, sigma1^2 K) vectors drawn from fallback streams."""
    Z = column_normals(seed, layer, K.shape[0], cols, 1.0, PURPOSE_FALLBACK)
    return sigma1 * psd_sqrt(K) @ Z


def _couple(target_K: np.ndarray, emp_K: np.ndarray, actual: np.ndarray, sigma1: float, seed: int,
            layer: int, rel_tol: float) -> tuple[np.ndarray, bool]:
    """K^{1/2} Khat^{-1/2} actual, or a fresh N(0, sigma1^2 K) sample when Khat is singular."""
    try:
        T = psd_sqrt(target_K) @ psd_inv_sqrt(emp_K, rel_tol)
    except InverseUnstable:
        return _gaussian_columns(seed, layer, target_K, sigma1, actual.shape[1]), True
    return T @ actual, False


def construct_ideal_dnn(net: DnnNet, cache: FeatureCache, chain: GramChain, seed: int = 0,
                        rel_tol: float = DEFAULT_REL_TOL) -> IdealInit:
    """Ideal particles coupled to an initial DNN.

    ``cache`` holds the (standard-init) features that the actual net reproduces.
    """
    L = net.depth
    if len(chain.K) != L:
        raise ShapeMismatch(f"chain has {len(chain.K)} matrices, net needs {L}")
    h = net.activation
    sigma1 = chain.sigma1
    thetas = [cache.thetas[0]]
    fallback = {}
    for ell in range(1, L):
        Khat = empirical_gram(cache.thetas[ell - 1], h)
        bar, used = _couple(chain.K[ell], Khat, cache.thetas[ell], sigma1, seed, ell + 1, rel_tol)
        thetas.append(bar)
        fallback[ell + 1] = used
    weights = [net.weights[0].copy()]
    for ell in range(1, L):
        K = chain.K[ell]
        check_invertible(K, rel_tol)
        weights.append(h(thetas[ell - 1]).T @ np.linalg.solve(K, thetas[ell]))
    weights.append(net.weights[-1].copy())
    particles = {f"theta_{ell + 1}": t for ell, t in enumerate(thetas)}
    return IdealInit("dnn", weights, particles, fallback)


def _colnorm(A: np.ndarray) -> np.ndarray:
    return np.max(np.abs(A), axis=0)


def eps1_audit_dnn(net: DnnNet, ideal: IdealInit) -> Eps1Report:
    """Largest deviation in each weight category divided by its closeness normalizer."""
    if len(ideal.weights) != len(net.weights) or any(a.shape != b.shape for a, b in zip(net.weights, ideal.weights)):
        raise ShapeMismatch("ideal and actual weights differ in shape")
    L = net.depth
    w1 = _colnorm(ideal.weights[0])
    tn = [_colnorm(ideal.particles[f"theta_{ell}"]) for ell in range(1, L + 1)]
    cats = {"w1": float(np.max(_colnorm(net.weights[0] - ideal.weights[0]) / (1.0 + w1)))}
    for ell in range(2, L + 1):
        left = w1 if ell == 2 else tn[ell - 2]
        q = 1.0 + left[:, None] + tn[ell - 1][None, :]
        dev = np.abs(net.weights[ell - 1] - ideal.weights[ell - 1])
        cats[f"w{ell}"] = float(np.max(dev / q))
    dev = np.abs(net.weights[L] - ideal.weights[L])[:, 0]
    cats[f"w{L + 1}"] = float(np.max(dev / (1.0 + tn[L - 1])))
    return Eps1Report(cats, max(cats.values()))


# --- Res-Net initialisations ---------------------------------------------------------------------

def _first_layer(data: Dataset, m: int, sigma1: float, seed: int) -> np.ndarray:
    if sigma1 <= 0:
        raise ValueError("sigma1 must be positive")
    return column_normals(seed, 1, data.d, m, np.sqrt(data.d) * sigma1)


def init_resnet_zero(data: Dataset, m: int, L: int, sigma1: float, seed: int, C5: float = 1.0,
                     h1="tanh", h2="tanh") -> ResNet:
    """V_1 ~ N(0, d sigma1^2), zero residual weights, V_{L+1} = C5."""
    if L < 1 or m < 1:
        raise ValueError("need L >= 1 and m >= 1")
    V = [_first_layer(data, m, sigma1, seed)] + [np.zeros((m, m)) for _ in range(L - 1)]
    V.append(np.full((m, 1), float(C5)))
    return ResNet(V, h1, h2)


def init_resnet_standard(data: Dataset, m: int, L: int, sigma1: float, seed: int, C5: float = 1.0,
                         h1="tanh", h2="tanh") -> tuple[ResNet, ResCache]:
    """V_1 ~ N(0, d sigma1^2), V_l ~ N(0, m sigma1^2) for l in 2..L, V_{L+1} = C5."""
    V = [_first_layer(data, m, sigma1, seed)]
    V += [column_normals(seed, ell, m, m, np.sqrt(m) * sigma1) for ell in range(2, L + 1)]
    V.append(np.full((m, 1), float(C5)))
    net = ResNet(V, h1, h2)
    return net, resnet_forward(net, data)


def regress_resnet(net: ResNet, cache: ResCache, C5: float = 1.0, rel_tol: float = DEFAULT_REL_TOL) -> ResNet:
    """Min-norm residual weights reproducing the residuals alpha in ``cache``."""
    m = net.m
    V = [net.V[0].copy()]
    for ell in range(2, net.depth + 1):
        V.append(min_norm_solve(net.h1(cache.betas[ell - 2]), cache.alpha(ell), m, rel_tol))
    V.append(np.full((m, 1), float(C5)))
    return ResNet(V, net.h1, net.h2)


def init_resnet_regression(data: Dataset, m: int, L: int, sigma1: float, seed: int, C5: float = 1.0,
                           h1="tanh", h2="tanh", rel_tol: float = DEFAULT_REL_TOL) -> ResNet:
    net, cache = init_resnet_standard(data, m, L, sigma1, seed, C5, h1, h2)
    return regress_resnet(net, cache, C5, rel_tol)


def mc_beta_gram(data: Dataset, sigma1: float, h1, h2, L: int, M_ref: int = DEFAULT_M_REF,
                 seed: int = 0) -> BetaGramChain:
    """Monte-Carlo K^beta_1..K^beta_{L-1} from M_ref independent skip-connected paths.

    beta_1 = X v / d with v ~ N(0, d sigma1^2 I); alpha_{l+1} ~ N(0, sigma1^2 K^beta_l)
    independently of the path so far; beta_{l+1} = beta_l + h2(alpha_{l+1}).
    """
    if M_ref < 1000:
        raise ValueError("M_ref must be >= 1000")
    if L < 2:
        raise ValueError("need L >= 2")
    h1, h2 = get_activation(h1), get_activation(h2)
    X = data.X
    N, d = X.shape
    rng = stream(seed, (0, 1, PURPOSE_MC))
    beta = X @ (rng.standard_normal((d, M_ref)) * (np.sqrt(d) * sigma1)) / d
    Ks, errs = [], []
    for ell in range(1, L):
        H = h1(beta)
        K = _psd_check(H @ H.T / M_ref, "K^beta")
        # per-entry standard error of the sample mean of h1(beta_i) h1(beta_j)
        sq = (H * H) @ (H * H).T / M_ref
        errs.append(np.sqrt(np.maximum(sq - K * K, 0.0) / M_ref))
        Ks.append(K)
        if ell == L - 1:
            break
        rng = stream(seed, (0, ell + 1, PURPOSE_MC))
        alpha = sigma1 * psd_sqrt(K) @ rng.standard_normal((N, M_ref))
        beta = beta + h2(alpha)
    return BetaGramChain(Ks, errs, int(M_ref), float(sigma1), (h1.id, h2.id), int(seed))


def construct_ideal_resnet(net: ResNet, cache: ResCache, beta_chain: BetaGramChain, seed: int = 0,
                           rel_tol: float = DEFAULT_REL_TOL) -> IdealInit:
    """Ideal path particles coupled to an initial Res-Net whose residuals are ``cache``."""
    L, h1, h2 = net.depth, net.h1, net.h2
    if len(beta_chain.K) != L - 1:
        raise ShapeMismatch(f"beta chain has {len(beta_chain.K)} matrices, net needs {L - 1}")
    sigma1 = beta_chain.sigma1
    beta_bar = [cache.betas[0]]
    alpha_bar = []
    fallback = {}
    for ell in range(1, L):
        Khat = empirical_gram(cache.betas[ell - 1], h1)
        bar, used = _couple(beta_chain.layer(ell), Khat, cache.alpha(ell + 1), sigma1, seed, ell + 1, rel_tol)
        alpha_bar.append(bar)
        fallback[ell + 1] = used
        beta_bar.append(beta_bar[-1] + h2(bar))
    V = [net.V[0].copy()]
    for ell in range(2, L + 1):
        K = beta_chain.layer(ell - 1)
        check_invertible(K, rel_tol)
        V.append(h1(beta_bar[ell - 2]).T @ np.linalg.solve(K, alpha_bar[ell - 2]))
    V.append(net.V[-1].copy())
    particles = {f"beta_{ell + 1}": b for ell, b in enumerate(beta_bar)}
    particles.update({f"alpha_{ell + 2}": a for ell, a in enumerate(alpha_bar)})
    path = np.vstack([V[0]] + alpha_bar)
    return IdealInit("resnet", V, particles, fallback, path)


def eps1_audit_resnet(net: ResNet, ideal: IdealInit, cache: ResCache | None = None) -> Eps1Report:
    """Closeness categories normalised by 1 + ||Theta_bar||_inf.

    When ``cache`` is given, residual deviations max_j ||alpha_hat_j - alpha_bar_j||_inf /
    (1 + ||Theta_bar_j||_inf) are added to ``info``; they do not enter eps1.
    """
    W = ideal.weights
    if len(W) != len(net.V) or any(a.shape != b.shape for a, b in zip(net.V, W)):
        raise ShapeMismatch("ideal and actual weights differ in shape")
    L = net.depth
    pn = _colnorm(ideal.path)
    cats = {"v1": float(np.max(_colnorm(net.V[0] - W[0]) / (1.0 + pn)))}
    q = 1.0 + pn[:, None] + pn[None, :]
    for ell in range(2, L + 1):
        cats[f"v{ell}"] = float(np.max(np.abs(net.V[ell - 1] - W[ell - 1]) / q))
    cats[f"v{L + 1}"] = float(np.max(np.abs(net.V[L] - W[L])[:, 0] / (1.0 + pn)))
    info = {}
    if cache is not None:
        for ell in range(2, L + 1):
            dev = _colnorm(cache.alpha(ell) - ideal.particles[f"alpha_{ell}"])
            info[f"alpha{ell}"] = float(np.max(dev / (1.0 + pn)))
    return Eps1Report(cats, max(cats.values()), info)
