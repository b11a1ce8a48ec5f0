"""Experiment suites: iteration sweeps, engine timing, noise sweeps and the
initialization study.

Every suite returns a list of :class:`ResultRecord`, one per
(image, method, sweep point), and can be written as CSV plus a JSON
manifest carrying hashes of the spec and of every checkpoint used.
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import platform
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import fixpoint
from .core import NoiseSpec, add_noise, magnitude, psnr, ssim, sub_seed
from .deq import IterationMap, apply_map, initial_image, reconstruct
from .linops import LinearOperator, make_blur, make_gaussian_cs, make_mri_mask
from .regnet import RegNet
from .train import PairSet, TrainConfig, train_deq

logger = logging.getLogger(__name__)

VERSION = "0.1.0"

# operator family, parameters, measurement noise, image size
PROBLEMS = {
    "deblur-hi": {"operator": "blur", "size": 32, "sigma": 0.01},
    "deblur-lo": {"operator": "blur", "size": 32, "sigma": 1e-4},
    "cs4x": {"operator": "gaussian-cs", "size": 32, "sigma": 0.01, "undersampling": 4},
    "mri4x": {"operator": "subsampled-fourier", "size": 64, "sigma": 0.01, "acceleration": 4},
    "mri8x": {"operator": "subsampled-fourier", "size": 64, "sigma": 0.01, "acceleration": 8},
}

METHODS = ("de-grad", "de-prox", "de-admm", "du-grad", "du-prox", "du-admm", "pnp-prox", "pnp-admm")


def method_kind(method: str) -> str:
    """Iteration-map kind behind a method tag (``du-prox`` -> ``de-prox``)."""
    return "de-" + method.split("-", 1)[1]


def problem_channels(problem: str) -> int:
    return 2 if PROBLEMS[problem]["operator"] == "subsampled-fourier" else 1


def build_operator(problem: str, size: int | None = None, seed: int = 0) -> LinearOperator:
    if problem not in PROBLEMS:
        raise ValueError(f"unknown problem {problem!r}; choose from {sorted(PROBLEMS)}")
    p = PROBLEMS[problem]
    n = size or p["size"]
    if p["operator"] == "blur":
        return make_blur(9, 5.0, (1, n, n))
    if p["operator"] == "gaussian-cs":
        return make_gaussian_cs((1, n, n), p["undersampling"], seed=seed)
    return make_mri_mask(n, p["acceleration"], seed=seed)


class MissingCheckpoint(LookupError):
    pass


@dataclass
class MethodModel:
    """A trained (or pretrained) network with the map settings it runs under.

    ``K`` is set for unrolled methods and is their training depth.
    """
    method: str
    net: RegNet
    step: float
    K: int | None = None
    digest: str = ""

    def iteration_map(self, op: LinearOperator) -> IterationMap:
        return IterationMap(method_kind(self.method), op, self.net, self.step)


@dataclass
class ExperimentSpec:
    problem: str
    methods: list[str]
    engine: str = "anderson"
    iterations: list[int] = field(default_factory=lambda: [1, 5, 10, 20, 40])
    noise: list[float] = field(default_factory=lambda: [0.005, 0.01, 0.02, 0.04])
    seeds: list[int] = field(default_factory=lambda: [0])
    name: str = "experiment"
    tol: float = 1e-3
    max_iter: int = 100
    x0_policy: str = "auto"

    def __post_init__(self):
        if self.problem not in PROBLEMS:
            raise ValueError(f"unknown problem {self.problem!r}")
        if not self.methods:
            raise ValueError("methods must be nonempty")
        for m in self.methods:
            if m not in METHODS:
                raise ValueError(f"unknown method {m!r}")
        if any(k < 1 for k in self.iterations):
            raise ValueError("iteration sweep values must be >= 1")
        if not self.seeds:
            raise ValueError("seeds must be nonempty")

    def digest(self) -> str:
        blob = json.dumps(asdict(self), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()

    def solver(self, engine: str | None = None) -> fixpoint.SolverConfig:
        return fixpoint.SolverConfig(engine=engine or self.engine, tol=self.tol,
                                     max_iter=self.max_iter)


@dataclass
class ResultRecord:
    experiment: str
    method: str
    image: int
    sweep: str
    value: str
    psnr: float
    ssim: float
    iterations: int
    seconds: float
    seconds_per_iteration: float
    converged: bool


RECORD_FIELDS = [f.name for f in ResultRecord.__dataclass_fields__.values()]


def image_metrics(x, ref) -> tuple[float, float]:
    """(PSNR, SSIM), on magnitudes for two-channel images."""
    if x.shape[-3] == 2:
        x, ref = magnitude(x)[None], magnitude(ref)[None]
    return psnr(x, ref), ssim(x, ref)


def _require(models: dict, methods):
    missing = [m for m in methods if m not in models]
    if missing:
        raise MissingCheckpoint(f"missing checkpoints for: {', '.join(missing)}")


def _fan_out(fn, items, threads: int):
    with ThreadPoolExecutor(max_workers=max(1, threads)) as pool:
        return list(pool.map(fn, items))


def run_budget(m: IterationMap, y, engine: str, K: int, policy="auto", sigma=0.0):
    """Exactly ``K`` iterations of the engine; returns the last image."""
    x0 = initial_image(m.operator, y, policy, sigma)
    cfg = fixpoint.SolverConfig(engine=engine, tol=np.finfo(float).tiny, max_iter=K)
    res = fixpoint.solve(lambda s: apply_map(m, s, y), m.pack(x0), cfg)
    return m.image(res.point), res


def _evaluate(spec, mm: MethodModel, op, y, x, sigma, K=None, engine=None):
    """One reconstruction as (image, iterations, seconds, converged).

    Unrolled methods run their own depth (or ``K``) plain steps; others run
    the equilibrium solve, or exactly ``K`` engine steps when ``K`` is set.
    """
    m = mm.iteration_map(op)
    t0 = time.perf_counter()
    if mm.method.startswith("du-"):
        steps = K or mm.K
        s = m.pack(initial_image(op, y, spec.x0_policy, sigma))
        for _ in range(steps):
            s = apply_map(m, s, y)
        return m.image(s), steps, time.perf_counter() - t0, True
    if K is not None:
        img, res = run_budget(m, y, engine or spec.engine, K, spec.x0_policy, sigma)
        return img, res.iterations, time.perf_counter() - t0, res.converged
    res = reconstruct(m, y, spec.solver(engine), spec.x0_policy, sigma)
    return res.point, res.iterations, res.seconds, res.converged


def _record(spec, method, i, sweep, value, out, x):
    img, iters, secs, conv = out
    p, s = image_metrics(img, x)
    return ResultRecord(spec.name, method, i, sweep, str(value), p, s, iters, secs,
                        secs / max(iters, 1), bool(conv))


def run_iteration_sweep(spec: ExperimentSpec, models: dict, test: PairSet, op: LinearOperator,
                        threads: int = 1) -> list[ResultRecord]:
    """Every method at every iteration budget in ``spec.iterations``."""
    _require(models, spec.methods)
    jobs = [(i, meth, K) for i in range(len(test)) for meth in spec.methods for K in spec.iterations]

    def job(j):
        i, meth, K = j
        out = _evaluate(spec, models[meth], op, test.y[i], test.x[i], test.sigma, K=K)
        return _record(spec, meth, i, "K", K, out, test.x[i])

    return _fan_out(job, jobs, threads)


def run_engine_comparison(spec: ExperimentSpec, models: dict, test: PairSet, op: LinearOperator,
                          threads: int = 1) -> list[ResultRecord]:
    """One equilibrium model solved by every engine on every test image."""
    meth = spec.methods[0]
    _require(models, [meth])
    jobs = [(i, eng) for i in range(len(test)) for eng in fixpoint.ENGINES]

    def job(j):
        i, eng = j
        out = _evaluate(spec, models[meth], op, test.y[i], test.x[i], test.sigma, engine=eng)
        return _record(spec, meth, i, "engine", eng, out, test.x[i])

    return _fan_out(job, jobs, threads)


def run_noise_sensitivity(spec: ExperimentSpec, models: dict, images, op: LinearOperator,
                          threads: int = 1) -> list[ResultRecord]:
    """Every method at every test noise level, without retraining."""
    _require(models, spec.methods)
    x = np.stack(images) if len(images) else np.zeros((0,))
    clean = op.forward(x) if len(images) else None
    jobs = [(i, meth, s) for s in spec.noise for i in range(len(images)) for meth in spec.methods]

    def job(j):
        i, meth, s = j
        seed = sub_seed(spec.seeds[0], f"noise-{s!r}-{i}")
        y = add_noise(clean[i], NoiseSpec(s, seed))
        out = _evaluate(spec, models[meth], op, y, x[i], s)
        return _record(spec, meth, i, "sigma", s, out, x[i])

    return _fan_out(job, jobs, threads)


def run_init_study(spec: ExperimentSpec, pretrained: RegNet, random_net: RegNet, step: float,
                   train: PairSet, val: PairSet | None, test: PairSet, op: LinearOperator,
                   cfg: TrainConfig, threads: int = 1) -> list[ResultRecord]:
    """Train the proximal map from both initializations with one budget."""
    records = []
    for tag, net in (("pretrained", pretrained), ("random", random_net)):
        try:
            m = IterationMap("de-prox", op, net, step)
            trained, _ = train_deq(m, train, cfg, val)
        except Exception as exc:  # a failed run is an absent record
            logger.warning("init study: %s run failed: %s", tag, exc)
            continue
        mm = MethodModel("de-prox", trained, step)

        def job(i, mm=mm, tag=tag):
            out = _evaluate(spec, mm, op, test.y[i], test.x[i], test.sigma)
            return _record(spec, "de-prox", i, "init", tag, out, test.x[i])

        records.extend(_fan_out(job, range(len(test)), threads))
    return records


def aggregate(records: list[ResultRecord]) -> dict[tuple[str, str], dict[str, float]]:
    """Means over images keyed by (method, sweep value)."""
    groups: dict = {}
    for r in records:
        groups.setdefault((r.method, r.value), []).append(r)
    out = {}
    for key, rs in groups.items():
        out[key] = {
            "psnr": float(np.mean([r.psnr for r in rs])),
            "ssim": float(np.mean([r.ssim for r in rs])),
            "iterations": float(np.mean([r.iterations for r in rs])),
            "seconds": float(np.mean([r.seconds for r in rs])),
            "seconds_per_iteration": float(np.mean([r.seconds_per_iteration for r in rs])),
            "count": len(rs),
        }
    return out


def write_records(records: list[ResultRecord], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=RECORD_FIELDS)
        w.writeheader()
        for r in records:
            w.writerow(asdict(r))


def read_records(path) -> list[ResultRecord]:
    out = []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            out.append(ResultRecord(
                row["experiment"], row["method"], int(row["image"]), row["sweep"], row["value"],
                float(row["psnr"]), float(row["ssim"]), int(row["iterations"]),
                float(row["seconds"]), float(row["seconds_per_iteration"]),
                row["converged"] == "True"))
    return out


def file_digest(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def write_manifest(spec: ExperimentSpec, models: dict, path, extra: dict | None = None) -> None:
    manifest = {
        "spec": asdict(spec),
        "spec_hash": spec.digest(),
        "checkpoints": {k: v.digest for k, v in sorted(models.items())},
        "seeds": list(spec.seeds),
        "version": VERSION,
        "python": platform.python_version(),
        "numpy": np.__version__,
        "created": time.strftime("%Y-%m-%dT%H:%M:%S"),
    }
    if extra:
        manifest.update(extra)
    Path(path).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
