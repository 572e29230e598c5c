"""Configuration, synthetic data, addressable random streams and result files."""

from __future__ import annotations

import csv
import dataclasses
import itertools
import json
import math
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Sequence

import numpy as np

# stream purposes
PURPOSE_INIT = 0
PURPOSE_FALLBACK = 1
PURPOSE_MC = 2
PURPOSE_DATA = 3
PURPOSE_MISC = 4

_MASK64 = (1 << 64) - 1


@dataclass(frozen=True)
class Dataset:
    X: np.ndarray
    y: np.ndarray
    x_inf_bound: float
    non_parallel: bool | None = None

    def __post_init__(self):
        X = np.asarray(self.X, dtype=np.float64)
        y = np.asarray(self.y, dtype=np.float64).reshape(-1)
        if X.ndim != 2 or X.shape[0] < 1 or X.shape[1] < 1:
            raise ValueError(f"X must be a non-empty N x d matrix, got shape {X.shape}")
        if y.shape[0] != X.shape[0]:
            raise ValueError(f"y has length {y.shape[0]}, expected {X.shape[0]}")
        if not (np.all(np.isfinite(X)) and np.all(np.isfinite(y))):
            raise ValueError("dataset entries must be finite")
        X.setflags(write=False)
        y.setflags(write=False)
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "y", y)
        bound = float(np.max(np.abs(X)))
        if self.x_inf_bound != bound:
            raise ValueError(f"x_inf_bound {self.x_inf_bound} != max|X| {bound}")

    @classmethod
    def from_arrays(cls, X, y, check_parallel: bool = False) -> "Dataset":
        X = np.asarray(X, dtype=np.float64)
        flag = rows_non_parallel(X) if check_parallel else None
        return cls(X=X, y=y, x_inf_bound=float(np.max(np.abs(X))), non_parallel=flag)

    @property
    def n(self) -> int:
        return self.X.shape[0]

    @property
    def d(self) -> int:
        return self.X.shape[1]

    def with_labels(self, y) -> "Dataset":
        return Dataset(self.X, y, self.x_inf_bound, self.non_parallel)


def rows_non_parallel(X: np.ndarray) -> bool:
    """True when no row of X is a scalar multiple of another.

    Two rows a, b are parallel iff every 2x2 minor a_i b_j - a_j b_i vanishes;
    the check is exact (no tolerance). A zero row counts as parallel to everything.
    """
    X = np.asarray(X, dtype=np.float64)
    for a, b in itertools.combinations(range(X.shape[0]), 2):
        minors = np.outer(X[a], X[b]) - np.outer(X[b], X[a])
        if not np.any(minors != 0.0):
            return False
    return True


def split_stream(seed: int, tag: Sequence[int]) -> int:
    """Derive a 128-bit substream key from ``seed`` and a (layer, node, purpose) tag."""
    if any(int(t) < 0 for t in tag):
        raise ValueError(f"tag components must be non-negative, got {tuple(tag)}")
    ss = np.random.SeedSequence(entropy=int(seed) & _MASK64, spawn_key=tuple(int(t) for t in tag))
    lo, hi = ss.generate_state(2, dtype=np.uint64)
    return int(lo) | (int(hi) << 64)


def stream(seed: int, tag: Sequence[int]) -> np.random.Generator:
    """Counter-based (Philox) generator addressed by ``tag``."""
    return np.random.Generator(np.random.Philox(key=split_stream(seed, tag)))


def column_normals(seed: int, layer: int, rows: int, cols: int, scale: float,
                   purpose: int = PURPOSE_INIT) -> np.ndarray:
    """rows x cols Gaussian matrix whose column j comes from stream (layer, j, purpose)."""
    out = np.empty((rows, cols))
    for j in range(cols):
        out[:, j] = stream(seed, (layer, j, purpose)).standard_normal(rows)
    return out * scale


def make_synthetic_dataset(n: int, d: int, seed: int, kind: str = "gaussian_regression") -> Dataset:
    if n < 1 or d < 1:
        raise ValueError(f"need n >= 1 and d >= 1, got n={n}, d={d}")
    rng = stream(seed, (0, 0, PURPOSE_DATA))
    if kind == "gaussian_regression":
        X = rng.standard_normal((n, d))
        direction = rng.standard_normal(d)
        X /= np.max(np.abs(X), axis=1, keepdims=True)
        y = np.sin(X @ direction / math.sqrt(d))
    elif kind == "two_cluster":
        center = rng.standard_normal(d)
        center /= np.max(np.abs(center))
        labels = np.where(np.arange(n) % 2 == 0, 1.0, -1.0)
        X = labels[:, None] * center[None, :] + 0.5 * rng.standard_normal((n, d))
        X /= np.max(np.abs(X), axis=1, keepdims=True)
        y = 0.5 * labels
    else:
        raise ValueError(f"unknown dataset kind {kind!r}")
    flag = rows_non_parallel(X) if n <= 64 else None
    return Dataset(X=X, y=y, x_inf_bound=float(np.max(np.abs(X))), non_parallel=flag)


@dataclass
class ExperimentConfig:
    seed: int = 0
    widths: list[int] = field(default_factory=lambda: [64, 64])
    depth: int = 2
    sigma1: float = 1.0
    eta: float = 0.01
    steps: int = 100
    activation: str = "tanh"
    loss: str = "pseudo_huber(1.0)"
    dataset: dict[str, Any] = field(default_factory=lambda: {"kind": "gaussian_regression", "n": 4, "d": 3})
    m_grid: list[int] = field(default_factory=lambda: [64, 256, 1024])
    tolerances: dict[str, Any] = field(default_factory=dict)
    output: str = "results"

    KEYS = ("seed", "widths", "depth", "sigma1", "eta", "steps", "activation", "loss",
            "dataset", "m_grid", "tolerances", "output")

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.depth < 1:
            raise ValueError("depth must be >= 1")
        if len(self.widths) not in (1, self.depth):
            raise ValueError(f"widths has {len(self.widths)} entries; expected 1 or depth={self.depth}")
        if any(int(w) < 1 for w in self.widths) or any(int(m) < 1 for m in self.m_grid):
            raise ValueError("widths and m_grid entries must be positive")
        if self.sigma1 <= 0 or self.eta <= 0:
            raise ValueError("sigma1 and eta must be positive")
        if self.steps < 0:
            raise ValueError("steps must be >= 0")
        if not {"kind", "n", "d"} <= set(self.dataset):
            raise ValueError("dataset needs keys kind, n, d")

    def hidden_widths(self) -> list[int]:
        return list(self.widths) * self.depth if len(self.widths) == 1 else list(self.widths)

    def make_dataset(self) -> Dataset:
        ds = self.dataset
        return make_synthetic_dataset(int(ds["n"]), int(ds["d"]), self.seed, ds["kind"])

    def to_dict(self) -> dict[str, Any]:
        return {k: getattr(self, k) for k in self.KEYS}

    @classmethod
    def from_dict(cls, raw: dict[str, Any]) -> "ExperimentConfig":
        unknown = set(raw) - set(cls.KEYS)
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**raw)

    @classmethod
    def load(cls, path: str | os.PathLike) -> "ExperimentConfig":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))

    def dump(self, path: str | os.PathLike) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2)

    def replace(self, **changes) -> "ExperimentConfig":
        return dataclasses.replace(self, **changes)


@dataclass
class RunRecord:
    k: int
    t: float
    loss: float
    stats: dict[str, float] = field(default_factory=dict)

    def row(self) -> dict[str, float]:
        return {"k": self.k, "t": self.t, "loss": self.loss, **self.stats}


def _fmt(value) -> str:
    if isinstance(value, (bool, np.bool_)):
        return str(int(value))
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if isinstance(value, (float, np.floating)):
        return format(float(value), ".17g")
    return str(value)


def _parse(text: str):
    try:
        return int(text)
    except ValueError:
        pass
    try:
        return float(text)
    except ValueError:
        return text


def emit_results(records: Sequence[RunRecord] | Sequence[dict], path: str | os.PathLike,
                 format: str = "csv") -> Path:
    """Write records as CSV (header + one row each) or a JSON list."""
    if not records:
        raise ValueError("records must be non-empty")
    rows = [r.row() if isinstance(r, RunRecord) else dict(r) for r in records]
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        if format == "csv":
            header = list(rows[0])
            for r in rows[1:]:
                header += [k for k in r if k not in header]
            with open(path, "w", newline="") as fh:
                writer = csv.writer(fh)
                writer.writerow([h.lower() for h in header])
                for r in rows:
                    writer.writerow([_fmt(r[h]) if h in r else "" for h in header])
        elif format == "json":
            with open(path, "w") as fh:
                json.dump(rows, fh, indent=2, default=_json_default)
        else:
            raise ValueError(f"unknown format {format!r}")
    except OSError as exc:
        raise OSError(f"failed writing results to {path}: {exc}") from exc
    return path


def read_results(path: str | os.PathLike, format: str = "csv") -> list[dict]:
    path = Path(path)
    if format == "json":
        with open(path) as fh:
            return json.load(fh)
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        return [{k: _parse(v) for k, v in row.items() if v != ""} for row in reader]


def read_run_records(path: str | os.PathLike) -> list[RunRecord]:
    out = []
    for row in read_results(path):
        k, t, loss = int(row.pop("k")), float(row.pop("t")), float(row.pop("loss"))
        out.append(RunRecord(k, t, loss, {key: float(v) for key, v in row.items()}))
    return out


def _json_default(obj):
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, np.generic):
        return obj.item()
    raise TypeError(f"not JSON serializable: {type(obj).__name__}")


def write_json(obj: Any, path: str | os.PathLike) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, default=_json_default)
    return path


def write_matrix_csv(matrix: np.ndarray, path: str | os.PathLike) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    np.savetxt(path, np.atleast_2d(matrix), delimiter=",", fmt="%.17g")
    return path


def recording_steps(K: int) -> Iterable[int]:
    """Steps at which a K-step run records: all of them for K <= 1000, else every ceil(K/1000)."""
    every = 1 if K <= 1000 else math.ceil(K / 1000)
    steps = list(range(0, K + 1, every))
    if steps[-1] != K:
        steps.append(K)
    return steps
