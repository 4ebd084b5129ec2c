"""Local-update tasks, divergence meters and the convergence bound.

Two desk-scale tasks stand in for a deep network:

* :class:`QuadraticTask` -- per-worker strongly convex quadratics with a
  closed-form global optimum, so every quantity in the convergence bound
  (mu, L, delta, rho, W*) is measurable.
* :class:`LogisticTask` -- logistic regression on two Gaussian classes with
  a shared validation set, for accuracy-style curves.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from . import _kernels
from .params import ModelParams
from .rng import Purpose, stream

DIVERGENCE_NORM = 1e12


class NumericError(ArithmeticError):
    """Raised when a local update blows up."""


class BoundError(ValueError):
    pass


@dataclass(frozen=True)
class SgdConfig:
    alpha: float = 0.1
    batch_size: int = 128
    tau: int = 40
    seed: int = 0

    def __post_init__(self):
        if not (self.alpha > 0 and self.batch_size > 0 and self.tau > 0):
            raise ValueError("alpha, batch_size and tau must be positive")


def _dataset_sizes(n: int, sizes, seed: int) -> np.ndarray:
    if isinstance(sizes, (int, np.integer)):
        return np.full(n, int(sizes), dtype=np.int64)
    lo, hi = sizes
    return np.array(
        [stream(seed, Purpose.TASK, i, sub=1).integers(lo, hi + 1) for i in range(n)], dtype=np.int64
    )


def _check_finite(w: np.ndarray) -> None:
    norm = float(np.linalg.norm(w))
    if not math.isfinite(norm) or norm > DIVERGENCE_NORM:
        raise NumericError(f"local update diverged (|w| = {norm:.3g})")


# --------------------------------------------------------------------------
# quadratic
# --------------------------------------------------------------------------

@dataclass
class QuadraticTask:
    """F_i(w) = 0.5 (w - c_i)^T A_i (w - c_i), F = sum_i |D_i| F_i / sum |D_i|."""

    A: np.ndarray
    centers: np.ndarray
    weights: np.ndarray
    mu: float
    L: float
    optimum: np.ndarray = field(init=False, repr=False)
    min_loss: float = field(init=False)

    kind = "quadratic"

    def __post_init__(self):
        self.A = np.ascontiguousarray(self.A, dtype=np.float64)
        self.centers = np.ascontiguousarray(self.centers, dtype=np.float64)
        self.weights = np.asarray(self.weights, dtype=np.int64)
        if not 0 < self.mu <= self.L:
            raise ValueError(f"need 0 < mu <= L, got mu={self.mu}, L={self.L}")
        for i, Ai in enumerate(self.A):
            eig = np.linalg.eigvalsh(Ai)
            if eig[0] < self.mu * (1 - 1e-9) or eig[-1] > self.L * (1 + 1e-9):
                raise ValueError(f"A_{i} eigenvalues {eig[0]:.4g}..{eig[-1]:.4g} outside [mu, L]")
        w = self.weights.astype(np.float64)
        self._abar = np.einsum("i,ijk->jk", w, self.A) / w.sum()
        self._bbar = np.einsum("i,ijk,ik->j", w, self.A, self.centers) / w.sum()
        self.optimum = np.linalg.solve(self._abar, self._bbar)
        self.min_loss = float(
            sum(wt * self.local_loss(i, self.optimum) for i, wt in enumerate(w)) / w.sum()
        )

    @classmethod
    def generate(cls, n: int, dim: int, seed: int, mu: float = 0.1, L: float = 1.0,
                 spread: float = 1.0, sizes=100, curvature_noise: float = 0.5,
                 basis: str = "axis") -> "QuadraticTask":
        """Workers share one eigenbasis and a log-uniform spectrum in [mu, L];
        each worker scales the eigenvalues by its own lognormal factors
        (clipped back into [mu, L]) and gets a Gaussian center of scale
        ``spread``.  The shared basis keeps the global objective as badly
        conditioned as the local ones.

        ``basis="axis"`` makes every Hessian diagonal, so coordinates evolve
        independently; ``"rotated"`` uses a random orthogonal basis.
        """
        g = stream(seed, Purpose.TASK)
        if basis == "axis":
            q = np.eye(dim)
        elif basis == "rotated":
            q, _ = np.linalg.qr(g.standard_normal((dim, dim)))
        else:
            raise ValueError(f"basis must be 'axis' or 'rotated', got {basis!r}")
        base = np.exp(g.uniform(np.log(mu), np.log(L), size=dim))
        A = np.empty((n, dim, dim))
        C = np.empty((n, dim))
        for i in range(n):
            rng = stream(seed, Purpose.TASK, i)
            eig = np.clip(base * np.exp(curvature_noise * rng.standard_normal(dim)), mu, L)
            A[i] = (q * eig) @ q.T
            A[i] = 0.5 * (A[i] + A[i].T)
            C[i] = spread * rng.standard_normal(dim)
        return cls(A, C, _dataset_sizes(n, sizes, seed), mu, L)

    @property
    def n_workers(self) -> int:
        return self.A.shape[0]

    @property
    def dim(self) -> int:
        return self.A.shape[1]

    def local_loss(self, worker: int, w: np.ndarray) -> float:
        d = w - self.centers[worker]
        return 0.5 * float(d @ self.A[worker] @ d)

    def gradient(self, worker: int, w: np.ndarray) -> np.ndarray:
        return self.A[worker] @ (w - self.centers[worker])

    def gradients(self, points: np.ndarray) -> np.ndarray:
        """Local gradients at many points, shape (n_workers, n_points, dim)."""
        diff = points[None, :, :] - self.centers[:, None, :]
        return np.einsum("ijk,ipk->ipj", self.A, diff)

    def global_gradient(self, w: np.ndarray) -> np.ndarray:
        return self._abar @ w - self._bbar

    def suboptimality(self, w: np.ndarray) -> float:
        # F(w) - F(W*) = 0.5 (w - W*)^T Abar (w - W*) exactly, no cancellation
        d = w - self.optimum
        return 0.5 * float(d @ self._abar @ d)

    def loss(self, w: np.ndarray) -> float:
        return self.min_loss + self.suboptimality(w)

    def descend(self, worker: int, w: np.ndarray, sgd: SgdConfig) -> np.ndarray:
        """tau exact gradient steps; returns the path including the start point."""
        path = _kernels.quadratic_descent(
            self.A[worker], self.centers[worker], np.ascontiguousarray(w, dtype=np.float64),
            float(sgd.alpha), int(sgd.tau),
        )
        _check_finite(path[-1])
        return path

    def evaluate(self, w: np.ndarray) -> dict:
        sub = self.suboptimality(w)
        return {
            "loss": self.min_loss + sub,
            "suboptimality": sub,
            "distance": float(np.linalg.norm(w - self.optimum)),
        }


# --------------------------------------------------------------------------
# logistic regression
# --------------------------------------------------------------------------

def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def _logistic_loss(X, y, w, l2):
    z = X @ w
    # log(1 + e^z) - y z, computed stably
    return float(np.mean(np.logaddexp(0.0, z) - y * z) + 0.5 * l2 * (w @ w))


def _logistic_grad(X, y, w, l2):
    return X.T @ (_sigmoid(X @ w) - y) / X.shape[0] + l2 * w


@dataclass
class _Sampler:
    rng: np.random.Generator
    n: int
    perm: np.ndarray = None
    cursor: int = 0

    def next_batch(self, size: int) -> np.ndarray:
        if self.perm is None or self.cursor >= self.n:
            self.perm = self.rng.permutation(self.n)
            self.cursor = 0
        idx = self.perm[self.cursor:self.cursor + size]
        self.cursor += idx.shape[0]
        return idx


@dataclass
class LogisticTask:
    """Binary logistic regression; the last parameter is the bias."""

    X: list
    y: list
    X_val: np.ndarray
    y_val: np.ndarray
    l2: float = 1e-4
    _samplers: dict = field(default_factory=dict, init=False, repr=False)

    kind = "logistic"

    def __post_init__(self):
        self.weights = np.array([x.shape[0] for x in self.X], dtype=np.int64)

    @classmethod
    def generate(cls, n: int, dim: int, seed: int, sizes=200, separation: float = 1.0,
                 noise: float = 1.0, val_size: int = 2000, l2: float = 1e-4) -> "LogisticTask":
        if dim < 2:
            raise ValueError("logistic task needs dim >= 2 (features + bias)")
        feat = dim - 1
        g = stream(seed, Purpose.TASK)
        direction = g.standard_normal(feat)
        mean = separation * direction / np.linalg.norm(direction)

        def draw(rng, count):
            labels = rng.integers(0, 2, size=count).astype(np.float64)
            x = (2 * labels - 1)[:, None] * mean + noise * rng.standard_normal((count, feat))
            return np.hstack([x, np.ones((count, 1))]), labels

        X, Y = [], []
        for i, size in enumerate(_dataset_sizes(n, sizes, seed)):
            x, lab = draw(stream(seed, Purpose.TASK, i), int(size))
            X.append(x)
            Y.append(lab)
        X_val, y_val = draw(g, val_size)
        return cls(X, Y, X_val, y_val, l2)

    @property
    def n_workers(self) -> int:
        return len(self.X)

    @property
    def dim(self) -> int:
        return self.X_val.shape[1]

    def local_loss(self, worker: int, w: np.ndarray) -> float:
        return _logistic_loss(self.X[worker], self.y[worker], w, self.l2)

    def gradient(self, worker: int, w: np.ndarray, batch: np.ndarray | None = None) -> np.ndarray:
        X, y = self.X[worker], self.y[worker]
        if batch is not None:
            X, y = X[batch], y[batch]
        return _logistic_grad(X, y, w, self.l2)

    def gradients(self, points: np.ndarray) -> np.ndarray:
        return np.stack([[self.gradient(i, p) for p in points] for i in range(self.n_workers)])

    def global_gradient(self, w: np.ndarray) -> np.ndarray:
        wts = self.weights.astype(np.float64)
        return sum(wt * self.gradient(i, w) for i, wt in enumerate(wts)) / wts.sum()

    def loss(self, w: np.ndarray) -> float:
        wts = self.weights.astype(np.float64)
        return float(sum(wt * self.local_loss(i, w) for i, wt in enumerate(wts)) / wts.sum())

    def descend(self, worker: int, w: np.ndarray, sgd: SgdConfig) -> np.ndarray:
        sampler = self._samplers.get(worker)
        if sampler is None:
            sampler = _Sampler(stream(sgd.seed, Purpose.SGD, worker), self.X[worker].shape[0])
            self._samplers[worker] = sampler
        path = np.empty((sgd.tau + 1, w.shape[0]))
        path[0] = w
        cur = np.array(w, dtype=np.float64)
        for s in range(sgd.tau):
            cur = cur - sgd.alpha * self.gradient(worker, cur, sampler.next_batch(sgd.batch_size))
            _check_finite(cur)
            path[s + 1] = cur
        return path

    def evaluate(self, w: np.ndarray) -> dict:
        pred = (self.X_val @ w) > 0
        return {
            "loss": _logistic_loss(self.X_val, self.y_val, w, self.l2),
            "accuracy": float(np.mean(pred == (self.y_val > 0.5))),
        }


# --------------------------------------------------------------------------
# task-generic operations
# --------------------------------------------------------------------------

def local_update(task, worker: int, model: ModelParams, sgd: SgdConfig,
                 visited: list | None = None) -> ModelParams:
    """Run ``sgd.tau`` local gradient steps for ``worker``.

    If ``visited`` is given, every iterate at which a gradient was taken is
    appended to it.
    """
    path = task.descend(worker, model.values, sgd)
    if visited is not None:
        visited.extend(path[:-1])
    return ModelParams(path[-1])


def evaluate(task, model: ModelParams) -> dict:
    if model.dim != task.dim:
        raise ValueError(f"model dim {model.dim} != task dim {task.dim}")
    return task.evaluate(model.values)


def measure_delta(task, points: Iterable, workers: Sequence[int] | None = None) -> float:
    """Empirical gradient divergence: max_i,W ||grad F_i(W) - grad F(W)||."""
    pts = np.array([p.values if isinstance(p, ModelParams) else p for p in points], dtype=np.float64)
    if pts.size == 0:
        raise ValueError("no sample points")
    pts = pts.reshape(-1, task.dim)
    wts = task.weights.astype(np.float64)
    rows = slice(None) if workers is None else list(workers)
    best = 0.0
    # one point per call: batched contractions may round a point differently
    # depending on what else is in the batch, which would break monotonicity
    for p in pts:
        local = task.gradients(p[None])[:, 0, :]
        glob = wts @ local / wts.sum()
        best = max(best, float(np.linalg.norm(local[rows] - glob, axis=1).max()))
    return best


def measure_rho(records: Iterable[dict]) -> float:
    """Max distance between each worker's aggregate and the full-average aggregate.

    ``records`` are trace records: ``kind == "oracle"`` carries the full
    average for a round, ``kind == "round"`` a worker's post-aggregation
    model.  Both need a ``model`` field.
    """
    oracle: dict[int, np.ndarray] = {}
    pending: dict[int, list[np.ndarray]] = {}
    rho = 0.0
    for rec in records:
        kind = rec.get("kind")
        if kind == "oracle":
            t = rec["round"]
            oracle[t] = np.asarray(rec["model"])
            for m in pending.pop(t, []):
                rho = max(rho, float(np.linalg.norm(m - oracle[t])))
        elif kind == "round" and rec.get("model") is not None:
            t = rec["round"]
            m = np.asarray(rec["model"])
            if t in oracle:
                rho = max(rho, float(np.linalg.norm(m - oracle[t])))
            else:
                pending.setdefault(t, []).append(m)
    if pending:
        raise ValueError(f"rounds without an oracle record: {sorted(pending)}")
    return rho


@dataclass(frozen=True)
class BoundParams:
    mu: float
    L: float
    alpha: float
    tau: int
    delta: float
    rho: float
    d0: float

    def __post_init__(self):
        if not 0 < self.mu <= self.L:
            raise BoundError("need 0 < mu <= L")
        if not 0 < self.alpha <= 1.0 / self.L:
            raise BoundError(f"learning rate {self.alpha} must be in (0, 1/L]")
        if min(self.delta, self.rho, self.d0) < 0:
            raise BoundError("delta, rho and d0 must be non-negative")

    @property
    def theta(self) -> float:
        return 1.0 - self.alpha * self.mu


def convergence_bound(p: BoundParams, t: int) -> float:
    """Upper bound on ||W_{t,i} - W*|| after t aggregation rounds of tau steps each."""
    theta = p.theta
    if not 0 < theta < 1:
        raise BoundError(f"theta = 1 - alpha*mu = {theta} outside (0, 1)")
    decay = theta ** (t * p.tau)
    ball = p.rho / (1.0 - theta ** p.tau) + p.alpha * p.delta / (1.0 - theta)
    return decay * p.d0 + (1.0 - decay) * ball


def bound_limit(p: BoundParams) -> float:
    theta = p.theta
    return p.rho / (1.0 - theta ** p.tau) + p.alpha * p.delta / (1.0 - theta)


def make_task(kind: str, n: int, dim: int, seed: int, **params):
    if kind == "quadratic":
        return QuadraticTask.generate(n, dim, seed, **params)
    if kind == "logistic":
        return LogisticTask.generate(n, dim, seed, **params)
    raise ValueError(f"unknown task kind {kind!r}")
