"""Fully-connected DNN with mean-field (1/m) averaging, backprop and scaled GD.

Weights are stored unscaled; layer l computes
    theta_1 = X W_1 / d,    theta_l = h(theta_{l-1}) W_l / m_{l-1},    out = h(theta_L) W_{L+1} / m_L.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .config_io import Dataset, RunRecord, recording_steps
from .funcs import Activation, Loss, get_activation, get_loss


class ShapeMismatch(ValueError):
    pass


class NonFiniteLoss(FloatingPointError):
    def __init__(self, step: int, value: float):
        super().__init__(f"loss became non-finite ({value}) at step {step}")
        self.step = step


class DegenerateWidth(ValueError):
    pass


@dataclass
class DnnNet:
    weights: list[np.ndarray]
    activation: Activation = field(default_factory=lambda: get_activation("tanh"))

    def __post_init__(self):
        self.activation = get_activation(self.activation)
        self.weights = [np.asarray(W, dtype=np.float64) for W in self.weights]
        if len(self.weights) < 2:
            raise ShapeMismatch("need at least one hidden layer")
        for a, b in zip(self.weights[:-1], self.weights[1:]):
            if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
                raise ShapeMismatch(f"incompatible layer shapes {a.shape} -> {b.shape}")
        if self.weights[-1].shape[1] != 1:
            raise ShapeMismatch("output layer must have a single unit")
        if not all(np.all(np.isfinite(W)) for W in self.weights):
            raise ValueError("weights must be finite")

    @property
    def widths(self) -> list[int]:
        """[m_0 = d, m_1, ..., m_L, m_{L+1} = 1]."""
        return [self.weights[0].shape[0]] + [W.shape[1] for W in self.weights]

    @property
    def depth(self) -> int:
        return len(self.weights) - 1

    def copy(self) -> "DnnNet":
        return DnnNet([W.copy() for W in self.weights], self.activation)

    @classmethod
    def zeros(cls, widths, activation="tanh") -> "DnnNet":
        return cls([np.zeros((a, b)) for a, b in zip(widths[:-1], widths[1:])], activation)


@dataclass
class FeatureCache:
    thetas: list[np.ndarray]  # theta_1..theta_L, each N x m_l
    acts: list[np.ndarray]  # h(theta_l)
    out: np.ndarray  # length N


@dataclass
class BackwardCache:
    D_out: np.ndarray  # length N
    D: list[np.ndarray]  # D_1..D_L, each N x m_l


@dataclass
class DnnGrads:
    G: list[np.ndarray]


def _check_input(net: DnnNet, X: np.ndarray) -> None:
    if X.shape[1] != net.widths[0]:
        raise ShapeMismatch(f"data has d={X.shape[1]}, net expects {net.widths[0]}")


def dnn_forward(net: DnnNet, data: Dataset | np.ndarray) -> FeatureCache:
    X = data.X if isinstance(data, Dataset) else np.asarray(data, dtype=np.float64)
    _check_input(net, X)
    h = net.activation
    widths = net.widths
    theta = X @ net.weights[0] / widths[0]
    thetas, acts = [theta], [h(theta)]
    for ell in range(1, net.depth):
        theta = acts[-1] @ net.weights[ell] / widths[ell]
        thetas.append(theta)
        acts.append(h(theta))
    out = (acts[-1] @ net.weights[-1])[:, 0] / widths[-2]
    return FeatureCache(thetas, acts, out)


def dnn_loss(cache: FeatureCache, y, loss: Loss | str) -> float:
    y = np.asarray(y, dtype=np.float64)
    if y.shape != cache.out.shape:
        raise ShapeMismatch(f"labels shape {y.shape} != outputs {cache.out.shape}")
    return float(np.mean(get_loss(loss)(cache.out, y)))


def dnn_backward(net: DnnNet, cache: FeatureCache, data: Dataset, loss: Loss | str,
                 y=None) -> tuple[BackwardCache, DnnGrads]:
    """Back-propagate N * dLoss/dtheta and return dLoss/dW for every layer."""
    loss = get_loss(loss)
    X = data.X
    y = data.y if y is None else np.asarray(y, dtype=np.float64)
    _check_input(net, X)
    if len(cache.thetas) != net.depth or cache.out.shape != y.shape:
        raise ShapeMismatch("cache does not match net/data")
    h = net.activation
    widths = net.widths
    N = X.shape[0]
    L = net.depth

    D_out = loss.prime1(cache.out, y)
    D_next = D_out[:, None]  # N x m_{l+1}
    D = [None] * L
    G = [None] * (L + 1)
    for ell in range(L, 0, -1):  # hidden layer index 1..L
        W_up = net.weights[ell]  # m_l x m_{l+1}
        A = cache.acts[ell - 1]
        G[ell] = A.T @ D_next / (N * widths[ell])
        D_cur = (D_next @ W_up.T) / widths[ell] * h.prime(cache.thetas[ell - 1])
        D[ell - 1] = D_cur
        D_next = D_cur
    G[0] = X.T @ D_next / (N * widths[0])
    return BackwardCache(D_out, D), DnnGrads(G)


def layer_scales(widths: list[int]) -> list[float]:
    return [float(widths[i] * widths[i + 1]) for i in range(len(widths) - 1)]


def scaled_gd_step(net: DnnNet, grads: DnnGrads, eta: float) -> DnnNet:
    """W_l <- W_l - eta * (m_{l-1} m_l G_l); returns a new net."""
    if len(grads.G) != len(net.weights) or any(g.shape != W.shape for g, W in zip(grads.G, net.weights)):
        raise ShapeMismatch("gradient shapes do not match the net")
    scales = layer_scales(net.widths)
    return DnnNet([W - eta * (s * g) for W, s, g in zip(net.weights, scales, grads.G)], net.activation)


def feature_spread(cache: FeatureCache, layer: int) -> float:
    """max over node pairs of ||theta_{l,i} - theta_{l,i'}||_inf (layer is 1-based)."""
    if not 1 <= layer <= len(cache.thetas):
        raise ValueError(f"layer {layer} outside 1..{len(cache.thetas)}")
    theta = cache.thetas[layer - 1]
    if theta.shape[1] < 2:
        raise DegenerateWidth("feature spread needs at least two nodes")
    # the pairwise max of |a_n - b_n| over (pairs, n) is the per-sample range
    return float(np.max(theta.max(axis=1) - theta.min(axis=1)))


Observer = Callable[[object, object], dict]


def default_dnn_stats(net: DnnNet, cache: FeatureCache) -> dict[str, float]:
    return {f"maxw_{i + 1}": float(np.max(np.abs(W))) for i, W in enumerate(net.weights)}


def train_dnn(net: DnnNet, data: Dataset, loss: Loss | str, eta: float, K: int,
              observe: Observer | None = default_dnn_stats,
              record_at: list[int] | None = None) -> tuple[DnnNet, list[RunRecord]]:
    """Run K iterations of forward, backward and scaled step.

    Records (step, time, loss, observer stats) at ``record_at`` or, by default,
    at every step for K <= 1000 and every ceil(K/1000) steps otherwise. The
    record at step k describes the net *before* the k-th update.
    """
    if K < 0:
        raise ValueError("K must be >= 0")
    loss = get_loss(loss)
    marks = set(recording_steps(K) if record_at is None else record_at)
    records = []
    for k in range(K + 1):
        cache = dnn_forward(net, data)
        value = dnn_loss(cache, data.y, loss)
        if not np.isfinite(value):
            raise NonFiniteLoss(k, value)
        if k in marks:
            stats = observe(net, cache) if observe else {}
            records.append(RunRecord(k, k * eta, value, stats))
        if k == K:
            break
        _, grads = dnn_backward(net, cache, data, loss)
        net = scaled_gd_step(net, grads, eta)
    return net, records
