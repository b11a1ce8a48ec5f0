"""Fixed-point engines: Picard, Anderson and limited-memory Broyden.

The engines work on any ndarray state and a map ``f(state) -> state``.
Each iteration records the relative residual
``||f(x_k) - x_k|| / ||f(x_k)||`` (for Picard this is the relative change
between consecutive iterates) and stops once it drops to ``tol``.
"""

from __future__ import annotations

import csv
import logging
import math
import time
from collections import deque
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

logger = logging.getLogger(__name__)

_NORM_FLOOR = 1e-12


class FixedPointError(RuntimeError):
    """A non-finite iterate was produced."""


@dataclass
class SolverConfig:
    engine: str = "anderson"
    memory: int = 5
    beta: float = 1.0
    ridge: float = 1e-10
    tol: float = 1e-3
    max_iter: int = 100

    def __post_init__(self):
        if self.engine not in ENGINES:
            raise ValueError(f"unknown engine {self.engine!r}; choose from {sorted(ENGINES)}")
        if self.memory < 1:
            raise ValueError("memory must be >= 1")
        if not self.tol > 0:
            raise ValueError("tol must be > 0")
        if not 0 < self.beta <= 1:
            raise ValueError("beta must lie in (0, 1]")
        if self.max_iter < 1:
            raise ValueError("max_iter must be >= 1")


@dataclass
class FixedPointResult:
    point: np.ndarray
    residual_history: list[float]
    iterations: int
    converged: bool
    seconds: float
    step_norms: list[float] = field(default_factory=list)
    times: list[float] = field(default_factory=list)
    best_point: np.ndarray | None = None
    evaluations: int = 0
    state: np.ndarray | None = None  # full state when point is a view of it

    @property
    def final_residual(self) -> float:
        return self.residual_history[-1] if self.residual_history else math.inf


class _Tracker:
    """Shared residual bookkeeping and stopping rule."""

    def __init__(self, cfg: SolverConfig):
        self.cfg = cfg
        self.start = time.perf_counter()
        self.history: list[float] = []
        self.steps: list[float] = []
        self.times: list[float] = []
        self.best = math.inf
        self.best_point = None
        self.evaluations = 0

    def evaluate(self, f, x):
        fx = f(x)
        self.evaluations += 1
        if not np.all(np.isfinite(fx)):
            last = self.history[-1] if self.history else float("nan")
            raise FixedPointError(
                f"non-finite iterate after {len(self.history)} iterations (last residual {last:.3e})")
        return fx

    def record(self, x, fx) -> bool:
        step = float(np.linalg.norm(fx - x))
        rel = step / max(float(np.linalg.norm(fx)), _NORM_FLOOR)
        self.history.append(rel)
        self.steps.append(step)
        self.times.append(time.perf_counter() - self.start)
        if rel < self.best:
            self.best = rel
            self.best_point = fx
        return rel <= self.cfg.tol

    def result(self, point, converged) -> FixedPointResult:
        return FixedPointResult(
            point=point, residual_history=self.history, iterations=len(self.history),
            converged=converged, seconds=time.perf_counter() - self.start,
            step_norms=self.steps, times=self.times,
            best_point=self.best_point if self.best_point is not None else point,
            evaluations=self.evaluations)


def solve_picard(f: Callable, x0: np.ndarray, cfg: SolverConfig) -> FixedPointResult:
    tr = _Tracker(cfg)
    x = np.asarray(x0, dtype=np.float64)
    for _ in range(cfg.max_iter):
        fx = tr.evaluate(f, x)
        done = tr.record(x, fx)
        x = fx
        if done:
            return tr.result(x, True)
    return tr.result(x, False)


def anderson_alpha(G: np.ndarray, ridge: float = 1e-10) -> np.ndarray:
    """Mixing weights ``alpha`` minimizing ``||G alpha||^2 + lam ||alpha||^2``
    subject to ``sum(alpha) = 1``.

    ``G`` holds one flattened residual per column, most recent first. The
    Gram matrix is normalized by its mean diagonal before the ridge is
    added, so ``ridge`` is relative. Singular systems fall back to
    ``alpha = e_0`` (a plain step from the newest iterate).
    """
    G = np.asarray(G, dtype=np.float64)
    if G.ndim == 1:
        G = G[:, None]
    k = G.shape[1]
    if k == 1:
        return np.ones(1)
    H = G.T @ G
    scale = np.trace(H) / k
    fallback = np.zeros(k)
    fallback[0] = 1.0
    if not np.isfinite(scale) or scale <= 0:
        logger.debug("anderson: zero residual matrix, falling back to e_0")
        return fallback
    bordered = np.zeros((k + 1, k + 1))
    bordered[:k, :k] = H / scale + ridge * np.eye(k)
    bordered[:k, k] = 1.0
    bordered[k, :k] = 1.0
    rhs = np.zeros(k + 1)
    rhs[k] = 1.0
    try:
        sol = np.linalg.solve(bordered, rhs)
    except np.linalg.LinAlgError:
        logger.debug("anderson: singular bordered system, falling back to e_0")
        return fallback
    if not np.all(np.isfinite(sol)):
        logger.debug("anderson: non-finite weights, falling back to e_0")
        return fallback
    return sol[:k]


def _combine(weights, arrays):
    out = weights[0] * arrays[0]
    for w, a in zip(weights[1:], arrays[1:]):
        out = out + w * a
    return out


def solve_anderson(f: Callable, x0: np.ndarray, cfg: SolverConfig) -> FixedPointResult:
    """Anderson(m) acceleration with relaxation ``beta``.

    ``x_{k+1} = (1 - beta) sum_i alpha_i x_{k-i} + beta sum_i alpha_i f(x_{k-i})``
    over the ``min(m, k + 1)`` most recent iterates.
    """
    tr = _Tracker(cfg)
    xs: deque = deque(maxlen=cfg.memory)
    fs: deque = deque(maxlen=cfg.memory)
    x = np.asarray(x0, dtype=np.float64)
    fx = x
    for _ in range(cfg.max_iter):
        fx = tr.evaluate(f, x)
        if tr.record(x, fx):
            return tr.result(fx, True)
        xs.appendleft(x)
        fs.appendleft(fx)
        if len(xs) == 1:
            alpha = np.ones(1)
        else:
            G = np.stack([(fi - xi).ravel() for fi, xi in zip(fs, xs)], axis=1)
            alpha = anderson_alpha(G, cfg.ridge)
        x = _combine(alpha, list(fs))
        if cfg.beta != 1.0:
            x = cfg.beta * x + (1.0 - cfg.beta) * _combine(alpha, list(xs))
    return tr.result(fx, False)


def solve_broyden(f: Callable, x0: np.ndarray, cfg: SolverConfig) -> FixedPointResult:
    """Limited-memory good Broyden on ``g(x) = f(x) - x``.

    The inverse Jacobian estimate is ``-I + sum_i u_i v_i^T`` with at most
    ``memory`` rank-one terms; when the history is full it restarts from
    ``-I``. A step whose residual norm grows is halved up
    to 5 times, after which a plain fixed-point step is taken.
    """
    tr = _Tracker(cfg)
    x = np.asarray(x0, dtype=np.float64)
    fx = tr.evaluate(f, x)
    gx = fx - x
    if tr.record(x, fx):
        return tr.result(fx, True)
    us: deque = deque(maxlen=cfg.memory)
    vs: deque = deque(maxlen=cfg.memory)

    def hmul(v):
        out = -v
        for u, w in zip(us, vs):
            out = out + u * np.vdot(w, v)
        return out

    def htmul(v):
        out = -v
        for u, w in zip(us, vs):
            out = out + w * np.vdot(u, v)
        return out

    for _ in range(cfg.max_iter - 1):
        direction = -hmul(gx)
        gnorm = np.linalg.norm(gx)
        t = 1.0
        for _trial in range(6):
            x_new = x + t * direction
            f_new = tr.evaluate(f, x_new)
            g_new = f_new - x_new
            if np.linalg.norm(g_new) <= gnorm:
                break
            t *= 0.5
        else:
            logger.debug("broyden: line search exhausted, taking a plain step")
            x_new = fx
            f_new = tr.evaluate(f, x_new)
            g_new = f_new - x_new
        s = x_new - x
        y = g_new - gx
        hy = hmul(y)
        denom = float(np.vdot(s, hy))
        if len(us) == cfg.memory:
            # the stored pairs build on each other, so dropping only the
            # oldest would leave an inconsistent estimate
            us.clear()
            vs.clear()
            hy = -y
            denom = float(np.vdot(s, hy))
        if abs(denom) > 1e-30:
            us.append((s - hy) / denom)
            vs.append(htmul(s))
        x, fx, gx = x_new, f_new, g_new
        if tr.record(x, fx):
            return tr.result(fx, True)
    return tr.result(fx, False)


ENGINES = {"picard": solve_picard, "anderson": solve_anderson, "broyden": solve_broyden}


def solve(f: Callable, x0: np.ndarray, cfg: SolverConfig) -> FixedPointResult:
    return ENGINES[cfg.engine](f, x0, cfg)


def write_residual_csv(result: FixedPointResult, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["iteration", "residual", "cumulative_seconds"])
        for i, (r, t) in enumerate(zip(result.residual_history, result.times), start=1):
            w.writerow([i, repr(r), repr(t)])
