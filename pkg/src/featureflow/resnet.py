"""Residual network with coupling beta_l = h2(alpha_l) + beta_{l-1}.

    beta_1 = X V_1 / d,   alpha_l = h1(beta_{l-1}) V_l / m,   out = h1(beta_L) V_{L+1} / m.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .config_io import Dataset, RunRecord, recording_steps
from .dnn import NonFiniteLoss, Observer, ShapeMismatch
from .funcs import Activation, Loss, get_activation, get_loss


@dataclass
class ResNet:
    V: list[np.ndarray]  # V_1 (d x m), V_2..V_L (m x m), V_{L+1} (m x 1)
    h1: Activation = field(default_factory=lambda: get_activation("tanh"))
    h2: Activation = field(default_factory=lambda: get_activation("tanh"))

    def __post_init__(self):
        self.h1 = get_activation(self.h1)
        self.h2 = get_activation(self.h2)
        self.V = [np.asarray(W, dtype=np.float64) for W in self.V]
        if len(self.V) < 2:
            raise ShapeMismatch("need V_1 and V_{L+1}")
        if any(W.ndim != 2 for W in self.V):
            raise ShapeMismatch("weights must be matrices")
        m = self.V[0].shape[1]
        for W in self.V[1:-1]:
            if W.shape != (m, m):
                raise ShapeMismatch(f"residual weight has shape {W.shape}, expected {(m, m)}")
        if self.V[-1].shape != (m, 1):
            raise ShapeMismatch(f"output weight has shape {self.V[-1].shape}, expected {(m, 1)}")
        if not all(np.all(np.isfinite(W)) for W in self.V):
            raise ValueError("weights must be finite")

    @property
    def d(self) -> int:
        return self.V[0].shape[0]

    @property
    def m(self) -> int:
        return self.V[0].shape[1]

    @property
    def depth(self) -> int:
        return len(self.V) - 1

    @property
    def widths(self) -> list[int]:
        return [self.d] + [self.m] * self.depth + [1]

    def copy(self) -> "ResNet":
        return ResNet([W.copy() for W in self.V], self.h1, self.h2)


@dataclass
class ResCache:
    betas: list[np.ndarray]  # beta_1..beta_L
    alphas: list[np.ndarray]  # alpha_2..alpha_L
    out: np.ndarray
    increments: list[np.ndarray] | None = None  # h2(alpha_l) = beta_l - beta_{l-1}, kept exact

    def alpha(self, ell: int) -> np.ndarray:
        """alpha_ell for ell in 2..L."""
        return self.alphas[ell - 2]


@dataclass
class ResBackward:
    D_out: np.ndarray
    D_beta: list[np.ndarray]  # l = 1..L
    D_alpha: list[np.ndarray]  # l = 2..L
    G: list[np.ndarray]  # same shapes as V


def resnet_forward(net: ResNet, data: Dataset | np.ndarray) -> ResCache:
    X = data.X if isinstance(data, Dataset) else np.asarray(data, dtype=np.float64)
    if X.shape[1] != net.d:
        raise ShapeMismatch(f"data has d={X.shape[1]}, net expects {net.d}")
    m = net.m
    beta = X @ net.V[0] / net.d
    betas, alphas, incs = [beta], [], []
    for W in net.V[1:-1]:
        alpha = net.h1(beta) @ W / m
        inc = net.h2(alpha)
        beta = inc + beta
        alphas.append(alpha)
        incs.append(inc)
        betas.append(beta)
    out = (net.h1(beta) @ net.V[-1])[:, 0] / m
    return ResCache(betas, alphas, out, incs)


def resnet_loss(cache: ResCache, y, loss: Loss | str) -> float:
    y = np.asarray(y, dtype=np.float64)
    if y.shape != cache.out.shape:
        raise ShapeMismatch(f"labels shape {y.shape} != outputs {cache.out.shape}")
    return float(np.mean(get_loss(loss)(cache.out, y)))


def resnet_backward(net: ResNet, cache: ResCache, data: Dataset, loss: Loss | str, y=None) -> ResBackward:
    loss = get_loss(loss)
    X = data.X
    y = data.y if y is None else np.asarray(y, dtype=np.float64)
    L, m, N = net.depth, net.m, X.shape[0]
    if X.shape[1] != net.d or len(cache.betas) != L or cache.out.shape != y.shape:
        raise ShapeMismatch("cache does not match net/data")
    h1, h2 = net.h1, net.h2

    D_out = loss.prime1(cache.out, y)
    G = [None] * (L + 1)
    G[L] = net.h1(cache.betas[L - 1]).T @ D_out[:, None] / (N * m)
    D_beta = [None] * L
    D_alpha = [None] * (L - 1)
    Db = (D_out[:, None] @ net.V[L].T) / m * h1.prime(cache.betas[L - 1])
    D_beta[L - 1] = Db
    for ell in range(L, 1, -1):
        Da = Db * h2.prime(cache.alpha(ell))
        D_alpha[ell - 2] = Da
        below = cache.betas[ell - 2]
        G[ell - 1] = h1(below).T @ Da / (N * m)
        Db = (Da @ net.V[ell - 1].T) / m * h1.prime(below) + Db
        D_beta[ell - 2] = Db
    G[0] = X.T @ Db / (N * net.d)
    return ResBackward(D_out, D_beta, D_alpha, G)


def resnet_step(net: ResNet, grads: ResBackward | list[np.ndarray], eta: float) -> ResNet:
    """V_l <- V_l - eta * (m_{l-1} m_l G_l) with m_0 = d, m_l = m, m_{L+1} = 1."""
    G = grads.G if isinstance(grads, ResBackward) else grads
    if len(G) != len(net.V) or any(g.shape != W.shape for g, W in zip(G, net.V)):
        raise ShapeMismatch("gradient shapes do not match the net")
    widths = net.widths
    scales = [float(widths[i] * widths[i + 1]) for i in range(len(net.V))]
    return ResNet([W - eta * (s * g) for W, s, g in zip(net.V, scales, G)], net.h1, net.h2)


def skip_perturbation(cache: ResCache) -> float:
    """max over l in 2..L of ||beta_l - beta_{l-1}||_inf; bounded by sup|h2|.

    Uses the stored increments h2(alpha_l) when present: recomputing the
    difference from the rounded sums can overshoot the bound by one ulp of beta.
    """
    if len(cache.betas) < 2:
        raise ValueError("skip perturbation needs L >= 2")
    if cache.increments is not None:
        return float(max(np.max(np.abs(inc)) for inc in cache.increments))
    return float(max(np.max(np.abs(b - a)) for a, b in zip(cache.betas[:-1], cache.betas[1:])))


def default_resnet_stats(net: ResNet, cache: ResCache) -> dict[str, float]:
    stats = {f"maxv_{i + 1}": float(np.max(np.abs(W))) for i, W in enumerate(net.V)}
    if len(cache.betas) >= 2:
        stats["skip"] = skip_perturbation(cache)
    return stats


def train_resnet(net: ResNet, data: Dataset, loss: Loss | str, eta: float, K: int,
                 observe: Observer | None = default_resnet_stats,
                 record_at: list[int] | None = None) -> tuple[ResNet, list[RunRecord]]:
    """K steps of scaled GD; recording follows train_dnn."""
    if K < 0:
        raise ValueError("K must be >= 0")
    loss = get_loss(loss)
    marks = set(recording_steps(K) if record_at is None else record_at)
    records = []
    for k in range(K + 1):
        cache = resnet_forward(net, data)
        value = resnet_loss(cache, data.y, loss)
        if not np.isfinite(value):
            raise NonFiniteLoss(k, value)
        if k in marks:
            stats = observe(net, cache) if observe else {}
            records.append(RunRecord(k, k * eta, value, stats))
        if k == K:
            break
        net = resnet_step(net, resnet_backward(net, cache, data, loss), eta)
    return net, records
