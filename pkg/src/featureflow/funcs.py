"""Activation and loss catalog, with grid audits of boundedness/Lipschitz constants."""

from __future__ import annotations

import math
import re
from dataclasses import dataclass
from typing import Callable

import numpy as np

Array = np.ndarray

TANH_L3 = 4.0 / (3.0 * math.sqrt(3.0))  # sup |tanh''|


@dataclass(frozen=True)
class Activation:
    id: str
    fn: Callable[[Array], Array]
    deriv: Callable[[Array], Array]
    L1: float
    L2: float
    L3: float

    def __call__(self, x):
        return self.fn(np.asarray(x, dtype=np.float64))

    def prime(self, x):
        return self.deriv(np.asarray(x, dtype=np.float64))


@dataclass(frozen=True)
class Loss:
    id: str
    fn: Callable[[Array, Array], Array]
    deriv1: Callable[[Array, Array], Array]
    L4: float
    L5: float
    compliant: bool
    min_value: float = 0.0  # min over the first argument, for every label

    def __call__(self, x, y):
        return self.fn(np.asarray(x, dtype=np.float64), np.asarray(y, dtype=np.float64))

    def prime1(self, x, y):
        return self.deriv1(np.asarray(x, dtype=np.float64), np.asarray(y, dtype=np.float64))


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def _softplus(x):
    return np.logaddexp(0.0, x)


def tanh() -> Activation:
    return Activation("tanh", np.tanh, lambda x: 1.0 - np.tanh(x) ** 2, 1.0, 1.0, TANH_L3)


def scaled_tanh(c: float) -> Activation:
    """h(x) = tanh(c x)."""
    c = float(c)
    if c <= 0:
        raise ValueError("scaled_tanh needs c > 0")
    return Activation(f"scaled_tanh({c:g})", lambda x: np.tanh(c * x),
                      lambda x: c * (1.0 - np.tanh(c * x) ** 2), 1.0, c, c * c * TANH_L3)


def bounded_softplus() -> Activation:
    """softplus(x) - softplus(x - 1): a smooth ramp from 0 to 1."""
    return Activation(
        "bounded_softplus",
        lambda x: _softplus(x) - _softplus(x - 1.0),
        lambda x: _sigmoid(x) - _sigmoid(x - 1.0),
        1.0,
        math.tanh(0.25),  # attained at x = 1/2
        0.25,  # sup |sigmoid'|, a valid (loose) bound on the derivative's Lipschitz constant
    )


def identity() -> Activation:
    """Test-only: unbounded, so it fails the activation assumptions."""
    return Activation("identity", lambda x: np.array(x, dtype=np.float64, copy=True),
                      lambda x: np.ones_like(x, dtype=np.float64), math.inf, 1.0, 0.0)


def zero() -> Activation:
    """Test-only: h == 0, freezes residual updates."""
    return Activation("zero", np.zeros_like, np.zeros_like, 0.0, 0.0, 0.0)


def pseudo_huber(delta: float = 1.0) -> Loss:
    delta = float(delta)
    if delta <= 0:
        raise ValueError("pseudo_huber needs delta > 0")

    def fn(x, y):
        r = (x - y) / delta
        return delta * delta * (np.sqrt(1.0 + r * r) - 1.0)

    def d1(x, y):
        r = (x - y) / delta
        return (x - y) / np.sqrt(1.0 + r * r)

    return Loss(f"pseudo_huber({delta:g})", fn, d1, delta, 1.0, True)


def squared() -> Loss:
    return Loss("squared", lambda x, y: (x - y) ** 2, lambda x, y: 2.0 * (x - y), math.inf, 2.0, False)


def logistic() -> Loss:
    """log(1 + exp(-x y)); bounded gradient for labels in [-1, 1], infimum 0 not attained."""
    return Loss("logistic", lambda x, y: _softplus(-x * y), lambda x, y: -y * _sigmoid(-x * y),
                1.0, 0.25, True)


_ACTIVATIONS = {"tanh": tanh, "scaled_tanh": scaled_tanh, "bounded_softplus": bounded_softplus,
                "identity": identity, "zero": zero}
_LOSSES = {"pseudo_huber": pseudo_huber, "squared": squared, "logistic": logistic}
_ID = re.compile(r"^\s*([a-z_]+)\s*(?:\(\s*([^)]*)\s*\))?\s*$")


def _lookup(ident: str, table: dict):
    match = _ID.match(ident)
    if not match or match.group(1) not in table:
        raise ValueError(f"unknown id {ident!r}; choose from {sorted(table)}")
    name, arg = match.groups()
    return table[name](float(arg)) if arg else table[name]()


def get_activation(ident: str | Activation) -> Activation:
    return ident if isinstance(ident, Activation) else _lookup(ident, _ACTIVATIONS)


def get_loss(ident: str | Loss) -> Loss:
    return ident if isinstance(ident, Loss) else _lookup(ident, _LOSSES)


def h_eval(a: Activation | str, x) -> Array:
    return get_activation(a)(x)


def h_prime(a: Activation | str, x) -> Array:
    return get_activation(a).prime(x)


def phi_eval(loss: Loss | str, x, y) -> Array:
    return get_loss(loss)(x, y)


def phi_prime1(loss: Loss | str, x, y) -> Array:
    return get_loss(loss).prime1(x, y)


@dataclass(frozen=True)
class AuditRecord:
    id: str
    estimates: dict[str, float]
    declared: dict[str, float]
    compliant: bool


def _lipschitz(values: Array, grid: Array, axis: int = -1) -> float:
    dv = np.abs(np.diff(values, axis=axis))
    dx = np.diff(grid)
    shape = [1] * values.ndim
    shape[axis] = dx.size
    return float(np.max(dv / dx.reshape(shape)))


def _activation_estimates(a: Activation, grid: Array) -> dict[str, float]:
    hp = a.prime(grid)
    return {"L1": float(np.max(np.abs(a(grid)))), "L2": float(np.max(np.abs(hp))),
            "L3": _lipschitz(hp, grid)}


def _loss_estimates(loss: Loss, grid: Array, labels: Array) -> dict[str, float]:
    xx, yy = np.meshgrid(grid, labels, indexing="ij")
    d1 = loss.prime1(xx, yy)
    return {"L4": float(np.max(np.abs(d1))), "L5": _lipschitz(d1, grid, axis=0)}


def assumption_audit(f: Activation | Loss | str, grid=(-10.0, 10.0), points: int = 2001,
                     labels=None) -> AuditRecord:
    """Estimate the regularity constants as maxima over a grid.

    ``grid`` is either an explicit 1-D array or a (lo, hi) range; losses are
    audited on grid x labels (labels default to the grid itself). A member is compliant when every declared
    constant is finite and each estimate stays under its declared value.
    """
    if isinstance(f, str):
        try:
            f = get_activation(f)
        except ValueError:
            f = get_loss(f)
    if isinstance(grid, tuple):
        grid = np.linspace(grid[0], grid[1], points)
    grid = np.asarray(grid, dtype=np.float64)
    if grid.size < 1000:
        raise ValueError("audit grid needs at least 10^3 points")
    if isinstance(f, Activation):
        est = _activation_estimates(f, grid)
        declared = {"L1": f.L1, "L2": f.L2, "L3": f.L3}
        flag = True
    else:
        labels = grid if labels is None else np.asarray(labels, dtype=np.float64)
        est = _loss_estimates(f, grid, labels)
        declared = {"L4": f.L4, "L5": f.L5}
        flag = f.compliant
    compliant = (
        flag
        and all(math.isfinite(v) for v in declared.values())
        and all(math.isfinite(v) and v <= declared[k] * (1 + 1e-9) + 1e-12 for k, v in est.items())
    )
    return AuditRecord(f.id, est, declared, bool(compliant))
