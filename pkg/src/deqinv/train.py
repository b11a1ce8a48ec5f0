"""End-to-end training of the regularizer inside an iteration map.

Equilibrium training differentiates through the fixed point implicitly:
with ``r = x_inf - x_star`` it solves ``b = J^T b + r`` (``J`` the state
Jacobian of the map at ``x_inf``) from ``b = 0`` and returns
``(df/dtheta)^T b``. Unrolled training backpropagates exactly through ``K``
recorded steps, so its memory grows with ``K``.
"""

from __future__ import annotations

import csv
import logging
import math
import os
import time
import tracemalloc
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import fixpoint
from .core import NoiseSpec, add_noise, make_rng, sub_seed
from .deq import IterationMap, apply_map, initial_image, quality, reconstruct
from .linops import LinearOperator
from .optim import Adam
from .regnet import RegNet, TrainingDivergence, lipschitz_estimate

logger = logging.getLogger(__name__)

LOG_FIELDS = ("epoch", "train_loss", "val_psnr", "mean_forward_iters", "mean_backward_iters",
              "epsilon_estimate", "wall_seconds")
SPECTRAL_SLACK = 1e-3


def _forward_default():
    return fixpoint.SolverConfig(engine="anderson", max_iter=100, tol=1e-3)


def _backward_default():
    return fixpoint.SolverConfig(engine="anderson", max_iter=50, tol=1e-3)


@dataclass
class TrainConfig:
    lr: float = 1e-4
    epochs: int = 10
    batch_size: int = 8
    optimizer: str = "adam"
    forward: fixpoint.SolverConfig = field(default_factory=_forward_default)
    backward: fixpoint.SolverConfig = field(default_factory=_backward_default)
    seed: int = 0
    loss: str = "mse"
    power_iters: int = 5
    x0_policy: str = "auto"
    epsilon_probes: int = 4
    debug_spectral: bool = False
    debug_iters: int = 100

    def __post_init__(self):
        # lr = 0 is accepted as a frozen-parameter run
        if not self.lr >= 0:
            raise ValueError("lr must be >= 0")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.optimizer != "adam":
            raise ValueError(f"unsupported optimizer {self.optimizer!r}")
        if self.loss != "mse":
            raise ValueError(f"unsupported loss {self.loss!r}")


@dataclass
class PairSet:
    """Measurements ``y`` with ground truth ``x`` (leading axis indexes images)."""
    y: np.ndarray
    x: np.ndarray
    sigma: float = 0.0

    def __len__(self):
        return len(self.x)

    def subset(self, idx) -> "PairSet":
        return PairSet(self.y[idx], self.x[idx], self.sigma)


def make_pairs(op: LinearOperator, images, noise: NoiseSpec) -> PairSet:
    x = np.stack([np.asarray(i, dtype=np.float64) for i in images])
    y = add_noise(op.forward(x), noise)
    return PairSet(y, x, noise.sigma)


@dataclass
class TrainLog:
    rows: list[dict] = field(default_factory=list)
    max_layer_norm: float = 0.0
    backward_warnings: int = 0
    best_epoch: int = 0

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=LOG_FIELDS)
            w.writeheader()
            for row in self.rows:
                w.writerow(row)

    def deterministic_rows(self) -> list[dict]:
        return [{k: v for k, v in r.items() if k != "wall_seconds"} for r in self.rows]


def mse_loss(x: np.ndarray, x_star: np.ndarray) -> tuple[float, np.ndarray]:
    x = np.asarray(x, dtype=np.float64)
    x_star = np.asarray(x_star, dtype=np.float64)
    if x.shape != x_star.shape:
        raise ValueError(f"shape mismatch {x.shape} vs {x_star.shape}")
    r = x - x_star
    return 0.5 * float(np.sum(r * r)), r


# ---------------------------------------------------------------------------
# gradients
# ---------------------------------------------------------------------------

@dataclass
class BackwardResult:
    grad: np.ndarray
    iterations: int
    converged: bool
    residual: float


def backward_solve(m, y, x_star, x_inf, cfg: fixpoint.SolverConfig) -> BackwardResult:
    """Implicit gradient with solver diagnostics. ``x_inf`` is the full state."""
    lin = m.linearize(x_inf, y)
    _, r = mse_loss(m.image(x_inf), x_star)
    r = m.image_cotangent(r)
    res = fixpoint.solve(lambda b: lin.vjp(b) + r, np.zeros_like(r), cfg)
    beta = res.point if res.converged else res.best_point
    if not res.converged:
        logger.debug("backward solve stopped at residual %.3e after %d iterations",
                       res.final_residual, res.iterations)
    return BackwardResult(lin.vjp_params(beta), res.iterations, res.converged, res.final_residual)


def implicit_gradient(m, y, x_star, x_inf, backward_cfg: fixpoint.SolverConfig) -> np.ndarray:
    return backward_solve(m, y, x_star, x_inf, backward_cfg).grad


def unrolled_gradient(m, y, x_star, state0, K: int) -> tuple[float, np.ndarray, int]:
    """Loss and exact gradient through ``K`` recorded steps from ``state0``.

    Returns ``(loss, grad, stored_bytes)``; every step's linearization is
    kept until the backward sweep.
    """
    if K < 1:
        raise ValueError("K must be >= 1")
    tape = []
    s = state0
    for _ in range(K):
        lin = m.linearize(s, y)
        tape.append(lin)
        s = lin.output
    loss, r = mse_loss(m.image(s), x_star)
    b = m.image_cotangent(r)
    stored = sum(t.nbytes for t in tape)
    grad = None
    for lin in reversed(tape):
        b, g = lin.vjp_both(b)
        grad = g if grad is None else grad + g
    return loss, grad, stored


# ---------------------------------------------------------------------------
# training loops
# ---------------------------------------------------------------------------

def _debug_enabled(cfg: TrainConfig) -> bool:
    return cfg.debug_spectral or os.environ.get("DEQ_DEBUG", "") not in ("", "0")


def _validate(m: IterationMap, val: PairSet | None, solver, policy, K=None) -> float:
    if val is None or len(val) == 0:
        return float("nan")
    scores = []
    for i in range(len(val)):
        x = evaluate_image(m, val.y[i], solver, policy, val.sigma, K)
        scores.append(quality(x, val.x[i]))
    return float(np.mean(scores))


def evaluate_image(m: IterationMap, y, solver, policy="auto", sigma=0.0, K=None) -> np.ndarray:
    """Reconstruct one image by equilibrium solve, or by exactly ``K`` steps."""
    if K is None:
        return reconstruct(m, y, solver, policy, sigma).point
    s = m.pack(initial_image(m.operator, y, policy, sigma))
    for _ in range(K):
        s = apply_map(m, s, y)
    return m.image(s)


def _run(m: IterationMap, data: PairSet, cfg: TrainConfig, val: PairSet | None, step_fn,
         K=None):
    net = m.net.copy()
    log = TrainLog()
    if cfg.epochs == 0:
        return net, log
    rng = make_rng(cfg.seed)
    opt = Adam(cfg.lr)
    debug = _debug_enabled(cfg)
    start = time.perf_counter()
    best_score = _validate(m.with_net(net), val, cfg.forward, cfg.x0_policy, K)
    best_net = net.copy()
    steps = 0
    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(len(data))
        total, f_iters, b_iters, batches, epoch_warnings = 0.0, 0, 0, 0, 0
        for lo in range(0, len(data), cfg.batch_size):
            idx = np.sort(order[lo:lo + cfg.batch_size])
            batch = data.subset(idx)
            cur = m.with_net(net)
            try:
                loss, grad, fi, bi, warn = step_fn(cur, batch)
            except fixpoint.FixedPointError as exc:
                raise TrainingDivergence(f"epoch {epoch}: {exc}", last_good=net.copy()) from exc
            if not (math.isfinite(loss) and np.all(np.isfinite(grad))):
                raise TrainingDivergence(f"non-finite loss at epoch {epoch}", last_good=net.copy())
            epoch_warnings += warn
            n = len(batch)
            total += loss
            f_iters += fi
            b_iters += bi
            batches += 1
            net = net.copy()
            net.set_params(opt.step(net.get_params(), net.tangent_gradient(grad / n)))
            steps += 1
            # a fresh start per step, so no mode is missed every time
            net.spectral_project(cfg.power_iters, seed=sub_seed(cfg.seed, f"project {steps}"))
            if debug:
                worst = max(net.layer_norms(iters=cfg.debug_iters, seed=cfg.seed + epoch))
                log.max_layer_norm = max(log.max_layer_norm, worst)
                assert worst <= 1.0 + SPECTRAL_SLACK, f"layer norm {worst} exceeds 1 + {SPECTRAL_SLACK}"
        log.backward_warnings += epoch_warnings
        cur = m.with_net(net)
        score = _validate(cur, val, cfg.forward, cfg.x0_policy, K)
        # training images as probes: noise images understate the constant
        eps = lipschitz_estimate(net, probes=data.x[:max(1, cfg.epsilon_probes)],
                                 power_iters=20, seed=cfg.seed).epsilon
        log.rows.append({
            "epoch": epoch,
            "train_loss": total / len(data),
            "val_psnr": score,
            "mean_forward_iters": f_iters / batches,
            "mean_backward_iters": b_iters / batches,
            "epsilon_estimate": eps,
            "wall_seconds": time.perf_counter() - start,
        })
        logger.info("epoch %d loss %.5f val %.3f dB fwd %.1f bwd %.1f", epoch,
                    total / len(data), score, f_iters / batches, b_iters / batches)
        if epoch_warnings:
            logger.warning("epoch %d: %d of %d backward solves hit the iteration cap",
                           epoch, epoch_warnings, batches)
        if val is not None and score > best_score:
            best_score, best_net = score, net.copy()
            log.best_epoch = epoch
    return (best_net if val is not None else net), log


def train_deq(m: IterationMap, data: PairSet, cfg: TrainConfig, val: PairSet | None = None):
    """Adam on implicit gradients; returns ``(net, TrainLog)``.

    Each minibatch is solved as one stacked fixed point. When ``val`` is
    given, the network with the best validation PSNR (including the
    starting network) is returned.
    """

    def step(cur, batch):
        x0 = initial_image(cur.operator, batch.y, cfg.x0_policy, batch.sigma)
        fwd = fixpoint.solve(lambda s: apply_map(cur, s, batch.y), cur.pack(x0), cfg.forward)
        x_inf = fwd.point if fwd.converged else fwd.best_point
        loss, _ = mse_loss(cur.image(x_inf), batch.x)
        bwd = backward_solve(cur, batch.y, batch.x, x_inf, cfg.backward)
        return loss, bwd.grad, fwd.iterations, bwd.iterations, int(not bwd.converged)

    return _run(m, data, cfg, val, step)


def train_unrolled(m: IterationMap, K: int, data: PairSet, cfg: TrainConfig,
                   val: PairSet | None = None):
    """Adam on exact gradients through ``K`` tied-weight steps."""
    if K < 1:
        raise ValueError("K must be >= 1")

    def step(cur, batch):
        x0 = initial_image(cur.operator, batch.y, cfg.x0_policy, batch.sigma)
        loss, grad, _ = unrolled_gradient(cur, batch.y, batch.x, cur.pack(x0), K)
        return loss, grad, K, K, 0

    return _run(m, data, cfg, val, step, K=K)


def peak_allocation(fn, *args, **kwargs):
    """Run ``fn`` and return ``(result, peak traced bytes above the start)``."""
    started = tracemalloc.is_tracing()
    if not started:
        tracemalloc.start()
    base, _ = tracemalloc.get_traced_memory()
    tracemalloc.reset_peak()
    try:
        out = fn(*args, **kwargs)
        _, peak = tracemalloc.get_traced_memory()
    finally:
        if not started:
            tracemalloc.stop()
    return out, peak - base


# ---------------------------------------------------------------------------
# hyperparameter search
# ---------------------------------------------------------------------------

def _default_steps():
    return list(np.logspace(-4, 1, 20))


@dataclass
class GridSpec:
    steps: list[float] = field(default_factory=_default_steps)
    sigmas: list[float] = field(default_factory=list)  # pretrained denoiser levels
    alphas: list[float] | None = None  # ADMM penalty axis

    def __post_init__(self):
        if not self.steps or not self.sigmas or (self.alphas is not None and not self.alphas):
            raise ValueError("every grid axis must be nonempty")


@dataclass
class GridResult:
    step: float
    sigma: float
    score: float
    table: list[tuple[float, float, float]]  # (sigma, step, mean psnr)


def score_point(m: IterationMap, val: PairSet, solver, policy="auto", threads: int = 1,
                K: int | None = None) -> float:
    """Mean validation PSNR of plain inference; a non-finite run scores -inf.

    With ``K`` the score is taken after exactly ``K`` plain steps, as an
    unrolled method would run.
    """

    def one(i):
        with np.errstate(over="ignore", invalid="ignore"):
            try:
                x = evaluate_image(m, val.y[i], solver, policy, val.sigma, K)
            except (fixpoint.FixedPointError, ArithmeticError):
                return -math.inf
        return quality(x, val.x[i]) if np.all(np.isfinite(x)) else -math.inf

    with ThreadPoolExecutor(max_workers=max(1, threads)) as pool:
        scores = list(pool.map(one, range(len(val))))
    return float(np.mean(scores))


def grid_search(kind: str, op: LinearOperator, family: dict[float, RegNet], grid: GridSpec,
                val: PairSet, solver: fixpoint.SolverConfig | None = None, policy: str = "auto",
                threads: int = 1, K: int | None = None) -> GridResult:
    """Exhaustive search for the best plug-in (pretrained) configuration.

    Points are scored by equilibrium inference, or by ``K`` plain steps
    when tuning an unrolled method. Ties go to the smaller step, then the
    smaller noise level.
    """
    solver = solver or _forward_default()
    axis = grid.alphas if (kind == "de-admm" and grid.alphas) else grid.steps
    table = []
    for sigma in sorted(grid.sigmas):
        if sigma not in family:
            raise KeyError(f"no pretrained denoiser for sigma={sigma}")
        for step in sorted(axis):
            m = IterationMap(kind, op, family[sigma], float(step))
            score = score_point(m, val, solver, policy, threads, K)
            logger.debug("grid sigma=%g step=%.3g psnr=%.3f", sigma, step, score)
            table.append((float(sigma), float(step), score))
    best = max(table, key=lambda t: (t[2], -t[1], -t[0]))
    return GridResult(step=best[1], sigma=best[0], score=best[2], table=table)
