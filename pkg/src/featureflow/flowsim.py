"""Explicit time-stepping of the particle ensemble, plus step and width refinement studies.

Each weight entry is a particle. Its drift is minus the layer-scaled gradient
(the mean-field time scale), so an Euler step of size eta reproduces scaled GD
exactly. The continuous flow itself is never available; the refinement studies
measure how trajectories move as eta shrinks or m grows.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .config_io import Dataset, RunRecord, recording_steps
from .dnn import (DnnNet, NonFiniteLoss, default_dnn_stats, dnn_backward, dnn_forward, dnn_loss,
                  feature_spread)
from .funcs import Loss, get_loss
from .numerics import DegenerateFit, fit_loglog_slope
from .resnet import ResNet, default_resnet_stats, resnet_backward, resnet_forward, resnet_loss

INTEGRATORS = ("euler", "midpoint")


class _Family:
    """Uniform access to forward, loss, drift and reassembly for either architecture."""

    def __init__(self, net):
        if isinstance(net, DnnNet):
            self.is_res = False
        elif isinstance(net, ResNet):
            self.is_res = True
        else:
            raise TypeError(f"unsupported network type {type(net).__name__}")
        self.template = net

    def params(self, net) -> list[np.ndarray]:
        return net.V if self.is_res else net.weights

    def build(self, params):
        t = self.template
        return ResNet(params, t.h1, t.h2) if self.is_res else DnnNet(params, t.activation)

    def forward(self, net, data):
        return resnet_forward(net, data) if self.is_res else dnn_forward(net, data)

    def loss(self, cache, y, loss) -> float:
        return resnet_loss(cache, y, loss) if self.is_res else dnn_loss(cache, y, loss)

    def drift(self, net, cache, data, loss) -> list[np.ndarray]:
        if self.is_res:
            G = resnet_backward(net, cache, data, loss).G
        else:
            G = dnn_backward(net, cache, data, loss)[1].G
        widths = net.widths
        return [-(float(widths[i] * widths[i + 1]) * g) for i, g in enumerate(G)]

    def default_observe(self):
        return default_resnet_stats if self.is_res else default_dnn_stats


def _advance(params, velocity, dt):
    return [W + dt * v for W, v in zip(params, velocity)]


@dataclass
class Trajectory:
    times: np.ndarray
    losses: np.ndarray
    observables: dict[str, np.ndarray]
    records: list[RunRecord]
    final: object = None
    integrator: str = "euler"
    snapshots: list = field(default_factory=list)

    def __post_init__(self):
        if self.times.size > 1 and np.any(np.diff(self.times) <= 0):
            raise ValueError("trajectory times must be strictly increasing")


def evolve(net, data: Dataset, loss: Loss | str, eta: float, K: int, integrator: str = "euler",
           observe=None, record_at=None, keep_snapshots: bool = False) -> Trajectory:
    """Integrate the particle flow for K steps of size eta.

    ``euler``: W <- W + eta * v(W). ``midpoint``: one extra half-step drift
    evaluation, W <- W + eta * v(W + eta/2 * v(W)).
    """
    if K < 1:
        raise ValueError("K must be >= 1")
    if integrator not in INTEGRATORS:
        raise ValueError(f"integrator must be one of {INTEGRATORS}")
    loss = get_loss(loss)
    fam = _Family(net)
    observe = fam.default_observe() if observe is None else observe
    marks = set(recording_steps(K) if record_at is None else record_at)
    records, snaps = [], []
    for k in range(K + 1):
        cache = fam.forward(net, data)
        value = fam.loss(cache, data.y, loss)
        if not np.isfinite(value):
            raise NonFiniteLoss(k, value)
        if k in marks:
            records.append(RunRecord(k, k * eta, value, observe(net, cache) if observe else {}))
            if keep_snapshots:
                snaps.append([W.copy() for W in fam.params(net)])
        if k == K:
            break
        v = fam.drift(net, cache, data, loss)
        if integrator == "midpoint":
            half = fam.build(_advance(fam.params(net), v, 0.5 * eta))
            v = fam.drift(half, fam.forward(half, data), data, loss)
        net = fam.build(_advance(fam.params(net), v, eta))
    names = list(records[0].stats) if records else []
    obs = {n: np.array([r.stats[n] for r in records]) for n in names}
    return Trajectory(np.array([r.t for r in records]), np.array([r.loss for r in records]), obs,
                      records, net, integrator, snaps)


def spread_observer(layers):
    """Observer recording feature_spread at the given (1-based) DNN layers."""
    def observe(net, cache):
        return {f"spread_{ell}": feature_spread(cache, ell) for ell in layers}
    return observe


def weight_deviation(a: list[np.ndarray], b: list[np.ndarray]) -> float:
    """max over layers of max|a - b| / (1 + max|b|)."""
    return float(max(np.max(np.abs(x - y)) / (1.0 + np.max(np.abs(y))) for x, y in zip(a, b)))


@dataclass
class RefinementResult:
    weight_deviation: float
    loss_deviation: float
    times: np.ndarray
    weight_path: np.ndarray
    loss_path: np.ndarray


def step_refinement(net, data: Dataset, loss: Loss | str, T: float, eta: float, r: int = 2,
                    integrator: str = "euler") -> RefinementResult:
    """Run at eta and eta/r from the same start and compare states at times k*eta.

    Both runs advance in lock-step, so no trajectory is stored.
    """
    if r < 1 or int(r) != r:
        raise ValueError("r must be a positive integer")
    K = int(round(T / eta))
    if K < 1 or not np.isclose(K * eta, T, rtol=1e-9, atol=0):
        raise ValueError("T / eta must be a positive integer")
    loss = get_loss(loss)
    fam = _Family(net)
    coarse, fine = net, net
    w_dev, l_dev = [], []

    def one_step(cur, h):
        cache = fam.forward(cur, data)
        v = fam.drift(cur, cache, data, loss)
        if integrator == "midpoint":
            half = fam.build(_advance(fam.params(cur), v, 0.5 * h))
            v = fam.drift(half, fam.forward(half, data), data, loss)
        return fam.build(_advance(fam.params(cur), v, h))

    for k in range(K + 1):
        lc = fam.loss(fam.forward(coarse, data), data.y, loss)
        lf = fam.loss(fam.forward(fine, data), data.y, loss)
        if not (np.isfinite(lc) and np.isfinite(lf)):
            raise NonFiniteLoss(k, lc if not np.isfinite(lc) else lf)
        w_dev.append(weight_deviation(fam.params(coarse), fam.params(fine)))
        l_dev.append(abs(lc - lf))
        if k == K:
            break
        coarse = one_step(coarse, eta)
        for _ in range(int(r)):
            fine = one_step(fine, eta / r)
    w_dev, l_dev = np.array(w_dev), np.array(l_dev)
    return RefinementResult(float(w_dev.max()), float(l_dev.max()), eta * np.arange(K + 1), w_dev, l_dev)


@dataclass
class WidthRefinement:
    m_grid: list[int]
    m_ref: int
    deviations: list[float]
    slope: float | None
    intercept: float | None
    note: str = ""


def width_refinement(data: Dataset, loss: Loss | str, eta: float, T: float, m_grid, m_ref: int,
                     depth: int = 3, sigma1: float = 1.0, C3: float = 1.0, seed: int = 0,
                     activation="tanh") -> WidthRefinement:
    """sup over recorded times of |loss_m - loss_{m_ref}| for regression-initialised DNNs.

    All runs share the seed, so the per-column streams couple the first-layer
    weights of the narrow nets to those of the reference net.
    """
    from .meanfield import init_dnn_regression

    m_grid = [int(m) for m in m_grid]
    if m_ref < max(m_grid):
        raise ValueError("m_ref must be at least every grid width")
    K = int(round(T / eta))
    if K < 0:
        raise ValueError("T must be >= 0")

    def losses(m):
        net = init_dnn_regression(data, [m] * depth, sigma1, seed, activation=activation, C3=C3)
        if K == 0:
            return np.array([dnn_loss(dnn_forward(net, data), data.y, loss)])
        return evolve(net, data, loss, eta, K, observe=lambda n, c: {},
                      record_at=range(K + 1)).losses

    ref = losses(m_ref)
    devs = [float(np.max(np.abs(losses(m) - ref))) for m in m_grid]
    try:
        slope, intercept = fit_loglog_slope(m_grid, devs)
        note = ""
    except DegenerateFit as exc:
        slope = intercept = None
        note = str(exc)
    return WidthRefinement(m_grid, int(m_ref), devs, slope, intercept, note)
