"""Command-line entry point: ``deqinv {pretrain,train,reconstruct,certify,bench}``.

Settings come from built-in defaults, then an optional JSON ``--config``
file, then command-line flags. Exit status is 0 on success, 1 on a runtime
failure and 2 on a usage or configuration error. ``DEQ_LOG`` selects the
log level (``error``, ``info`` or ``debug``).
"""

from __future__ import annotations

import argparse
import copy
import json
import logging
import os
import sys
from pathlib import Path

import jsonschema
import numpy as np

from . import bench, fixpoint
from .core import (DatasetSpec, NoiseSpec, load_dataset, read_tensor, split_dataset, sub_seed,
                   write_tensor)
from .deq import (THEOREM_FOR_KIND, IterationMap, certify_contraction, empirical_contraction,
                  initial_image, reconstruct)
from .linops import spectral_bounds
from .regnet import RegNet, lipschitz_estimate, load_checkpoint, pretrain_denoiser, save_checkpoint
from .train import GridSpec, TrainConfig, grid_search, make_pairs, train_deq, train_unrolled

logger = logging.getLogger("deqinv")

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE = 0, 1, 2


class ConfigError(ValueError):
    pass


_SOLVER = {
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "engine": {"enum": sorted(fixpoint.ENGINES)},
        "memory": {"type": "integer", "minimum": 1},
        "beta": {"type": "number", "exclusiveMinimum": 0, "maximum": 1},
        "ridge": {"type": "number", "minimum": 0},
        "tol": {"type": "number", "exclusiveMinimum": 0},
        "max_iter": {"type": "integer", "minimum": 1},
    },
}

_NUMBERS = {"type": "array", "minItems": 1, "items": {"type": "number", "exclusiveMinimum": 0}}

SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "seed": {"type": "integer", "minimum": 0},
        "out": {"type": "string"},
        "threads": {"type": "integer", "minimum": 1},
        "problem": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "name": {"enum": sorted(bench.PROBLEMS)},
                "size": {"type": "integer", "minimum": 16},
                "sigma": {"type": "number", "minimum": 0},
            },
        },
        "dataset": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "kind": {"enum": ["synthetic-phantom", "image-directory"]},
                "count": {"type": "integer", "minimum": 1},
                "split": {"type": "array", "items": {"type": "number", "minimum": 0},
                          "minItems": 3, "maxItems": 3},
                "directory": {"type": "string"},
            },
        },
        "net": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "hidden": {"type": "integer", "minimum": 1},
                "depth": {"type": "integer", "minimum": 2},
                "kernel": {"type": "integer", "minimum": 1},
                "slope": {"type": "number", "minimum": 0, "maximum": 1},
            },
        },
        "pretrain": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "sigmas": _NUMBERS,
                "epochs": {"type": "integer", "minimum": 0},
                "lr": {"type": "number", "minimum": 0},
                "batch_size": {"type": "integer", "minimum": 1},
            },
        },
        "forward": _SOLVER,
        "backward": _SOLVER,
        "train": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "lr": {"type": "number", "minimum": 0},
                "epochs": {"type": "integer", "minimum": 0},
                "batch_size": {"type": "integer", "minimum": 1},
                "K": {"type": "integer", "minimum": 1},
                "step": {"type": "number", "exclusiveMinimum": 0},
                "steps": _NUMBERS,
                "alphas": _NUMBERS,
            },
        },
        "bench": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "methods": {"type": "array", "minItems": 1, "items": {"enum": list(bench.METHODS)}},
                "iterations": {"type": "array", "minItems": 1,
                               "items": {"type": "integer", "minimum": 1}},
                "noise": {"type": "array", "items": {"type": "number", "minimum": 0}},
                "images": {"type": "integer", "minimum": 1},
            },
        },
    },
}

DEFAULTS = {
    "seed": 0,
    "out": "out",
    "threads": os.cpu_count() or 1,
    "problem": {"name": "deblur-hi"},
    "dataset": {"kind": "synthetic-phantom", "count": 200, "split": [0.8, 0.1, 0.1]},
    "net": {"hidden": 32, "depth": 6, "kernel": 3, "slope": 0.1},
    "pretrain": {"sigmas": [0.05, 0.02, 0.01], "epochs": 10, "lr": 1e-3, "batch_size": 8},
    "forward": {"engine": "anderson", "memory": 5, "beta": 1.0, "ridge": 1e-10, "tol": 1e-3,
                "max_iter": 100},
    "backward": {"engine": "anderson", "memory": 5, "beta": 1.0, "ridge": 1e-10, "tol": 1e-3,
                 "max_iter": 50},
    "train": {"lr": 1e-4, "epochs": 10, "batch_size": 8, "K": 10, "step": 1.0,
              "steps": [float(s) for s in np.logspace(-4, 1, 20)]},
    "bench": {"methods": ["de-prox"], "iterations": [1, 5, 10, 20, 40],
              "noise": [0.005, 0.01, 0.02, 0.04], "images": 32},
}


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------

def _locate(text: str, path) -> int:
    """1-based line of the last key in ``path`` (best effort)."""
    pos, line = 0, 1
    for key in path:
        if isinstance(key, int):
            continue
        i = text.find(json.dumps(key), pos)
        if i < 0:
            break
        pos = i + 1
        line = text.count("\n", 0, i) + 1
    return line


def _merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def load_config(path: str | None) -> dict:
    """Defaults merged with a validated JSON file.

    Errors carry ``file:line`` of the offending entry.
    """
    if path is None:
        return copy.deepcopy(DEFAULTS)
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"{path}: cannot read config: {exc.strerror}") from exc
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}:{exc.lineno}:{exc.colno}: invalid JSON: {exc.msg}") from exc
    validator = jsonschema.Draft202012Validator(SCHEMA)
    errors = sorted(validator.iter_errors(data), key=lambda e: list(e.absolute_path))
    if errors:
        msgs = []
        for err in errors:
            where = list(err.absolute_path)
            if err.validator == "additionalProperties" and isinstance(err.instance, dict):
                allowed = err.schema.get("properties", {})
                extra = [k for k in err.instance if k not in allowed]
                for k in extra:
                    msgs.append(f"{path}:{_locate(text, where + [k])}: unknown key "
                                f"{'.'.join(map(str, where + [k]))!r}")
                continue
            key = ".".join(map(str, where)) or "<root>"
            msgs.append(f"{path}:{_locate(text, where)}: {key}: {err.message}")
        raise ConfigError("\n".join(msgs))
    return _merge(DEFAULTS, data)


def apply_flags(cfg: dict, args: argparse.Namespace) -> dict:
    cfg = copy.deepcopy(cfg)
    top = {"seed": "seed", "out": "out", "threads": "threads"}
    for flag, key in top.items():
        if getattr(args, flag, None) is not None:
            cfg[key] = getattr(args, flag)
    nested = {
        "problem": ("problem", "name"),
        "size": ("problem", "size"),
        "images": ("bench", "images"),
        "epochs": None,  # command-specific, handled below
        "lr": None,
        "K": ("train", "K"),
        "step": ("train", "step"),
        "max_iter": ("forward", "max_iter"),
        "engine": ("forward", "engine"),
        "tol": ("forward", "tol"),
    }
    for flag, dest in nested.items():
        val = getattr(args, flag, None)
        if val is None or dest is None:
            continue
        cfg[dest[0]][dest[1]] = val
    section = "pretrain" if args.command == "pretrain" else "train"
    for flag in ("epochs", "lr"):
        val = getattr(args, flag, None)
        if val is not None:
            cfg[section][flag] = val
    try:
        fixpoint.SolverConfig(**cfg["forward"])
        fixpoint.SolverConfig(**cfg["backward"])
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    return cfg


# ---------------------------------------------------------------------------
# shared plumbing
# ---------------------------------------------------------------------------

class Setup:
    """Operator, data splits and measurement pairs derived from one config."""

    def __init__(self, cfg: dict):
        self.cfg = cfg
        seed = cfg["seed"]
        prob = cfg["problem"]
        self.problem = prob["name"]
        self.size = prob.get("size") or bench.PROBLEMS[self.problem]["size"]
        self.sigma = prob.get("sigma", bench.PROBLEMS[self.problem]["sigma"])
        self.channels = bench.problem_channels(self.problem)
        self.op = bench.build_operator(self.problem, self.size, sub_seed(seed, "operator"))
        ds = cfg["dataset"]
        self.dataset = DatasetSpec(kind=ds["kind"], count=ds["count"], size=self.size,
                                   split=tuple(ds["split"]), seed=sub_seed(seed, "dataset"),
                                   directory=ds.get("directory"), channels=self.channels)
        self._splits = None

    @property
    def splits(self):
        if self._splits is None:
            self._splits = split_dataset(load_dataset(self.dataset), self.dataset.split)
        return self._splits

    def pairs(self, which: str, sigma: float | None = None):
        idx = {"train": 0, "val": 1, "test": 2}[which]
        images = self.splits[idx]
        if not images:
            raise RuntimeError(f"the {which} split is empty; increase dataset.count")
        s = self.sigma if sigma is None else sigma
        return make_pairs(self.op, images, NoiseSpec(s, sub_seed(self.cfg["seed"], f"noise-{which}")))

    def solver(self, which="forward") -> fixpoint.SolverConfig:
        return fixpoint.SolverConfig(**self.cfg[which])

    def train_config(self) -> TrainConfig:
        t = self.cfg["train"]
        return TrainConfig(lr=t["lr"], epochs=t["epochs"], batch_size=t["batch_size"],
                           forward=self.solver("forward"), backward=self.solver("backward"),
                           seed=sub_seed(self.cfg["seed"], "training"))

    def new_net(self, init: str) -> RegNet:
        n = self.cfg["net"]
        return RegNet.create(self.channels, hidden=n["hidden"], depth=n["depth"],
                             kernel=n["kernel"], slope=n["slope"],
                             image_shape=(self.size, self.size),
                             seed=sub_seed(self.cfg["seed"], "init"), init=init)


def _out(cfg, *parts) -> Path:
    p = Path(cfg["out"]).joinpath(*parts)
    p.parent.mkdir(parents=True, exist_ok=True)
    return p


def _write_json(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _load_family(cfg) -> dict[float, RegNet]:
    manifest = Path(cfg["out"]) / "pretrained" / "manifest.json"
    if not manifest.exists():
        raise FileNotFoundError(f"missing pretraining artifacts: {manifest} (run 'pretrain' first)")
    entries = json.loads(manifest.read_text())["checkpoints"]
    return {float(e["sigma"]): load_checkpoint(manifest.parent / e["file"]) for e in entries}


def _load_method(cfg, method: str) -> bench.MethodModel:
    d = Path(cfg["out"]) / method
    net_path, params_path = d / "net.dqw", d / "params.json"
    if not (net_path.exists() and params_path.exists()):
        raise bench.MissingCheckpoint(str(d))
    params = json.loads(params_path.read_text())
    return bench.MethodModel(method, load_checkpoint(net_path), params["step"], params.get("K"),
                             bench.file_digest(net_path))


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_pretrain(cfg: dict, args) -> int:
    setup = Setup(cfg)
    p = cfg["pretrain"]
    train_images = setup.splits[0]
    net = setup.new_net("identity")
    family = pretrain_denoiser(net, train_images, tuple(p["sigmas"]), epochs=p["epochs"],
                               lr=p["lr"], batch_size=p["batch_size"],
                               seed=sub_seed(cfg["seed"], "pretrain"))
    entries = []
    for sigma, model in family.items():
        name = f"sigma_{sigma:g}.dqw"
        path = _out(cfg, "pretrained", name)
        save_checkpoint(model, path)
        entries.append({"sigma": sigma, "file": name, "sha256": bench.file_digest(path)})
    _write_json(_out(cfg, "pretrained", "manifest.json"), {
        "problem": setup.problem, "seed": cfg["seed"], "epochs": p["epochs"],
        "checkpoints": entries})
    logger.info("wrote %d pretrained checkpoints to %s", len(entries), _out(cfg, "pretrained"))
    return EXIT_OK


def _certify(m: IterationMap, images, theorem: int | None = None, seed: int = 0):
    """Certificate with epsilon probed at ``images`` and as many noise images.

    Noise images alone understate the constant on natural-looking inputs.
    """
    bounds = spectral_bounds(m.operator)
    images = np.asarray(images, dtype=np.float64)
    noise = np.random.default_rng(seed).uniform(0.0, 1.0, images.shape)
    eps = lipschitz_estimate(m.net, probes=np.concatenate([images, noise]), power_iters=50)
    th = theorem or THEOREM_FOR_KIND[m.kind]
    cert = certify_contraction(th, bounds.L, bounds.mu, eps.epsilon, m.step)
    cert.extra.update({"layerwise_bound": eps.layerwise_bound, "spectral_method": bounds.method,
                       "map": m.kind})
    return cert


def cmd_train(cfg: dict, args) -> int:
    setup = Setup(cfg)
    method = args.method
    kind = bench.method_kind(method)
    t = cfg["train"]
    train, val = setup.pairs("train"), setup.pairs("val")
    grid_info = None
    try:
        family = _load_family(cfg)
    except FileNotFoundError:
        if args.init == "pretrained":
            raise
        family = None
    K = t["K"] if method.startswith("du-") else None
    if family:
        axis = t.get("alphas") if kind == "de-admm" else None
        grid = GridSpec(steps=t["steps"], sigmas=sorted(family), alphas=axis)
        g = grid_search(kind, setup.op, family, grid, val, setup.solver(), threads=cfg["threads"], K=K)
        step, sigma = g.step, g.sigma
        grid_info = {"sigma": g.sigma, "step": g.step, "score": g.score, "table": g.table}
        logger.info("grid search: sigma=%g step=%g val psnr %.3f", g.sigma, g.step, g.score)
    else:
        step, sigma = t["step"], None
        logger.info("no pretrained family; using configured step %g", step)
    net = family[sigma] if args.init == "pretrained" else setup.new_net("he")
    if kind == "de-grad" and args.init != "pretrained":
        net.residual = False
    m = IterationMap(kind, setup.op, net, step)
    cert = _certify(m, val.x[:8], seed=sub_seed(cfg["seed"], "certify"))
    if not cert.satisfied:
        logger.warning("theorem %d certificate not satisfied: %s", cert.theorem, cert.reason)
    tc = setup.train_config()
    if K is not None:
        trained, log = train_unrolled(m, K, train, tc, val)
    else:
        trained, log = train_deq(m, train, tc, val)
    save_checkpoint(trained, _out(cfg, method, "net.dqw"))
    log.to_csv(_out(cfg, method, "train_log.csv"))
    _write_json(_out(cfg, method, "params.json"), {
        "method": method, "kind": kind, "step": step, "K": K, "init": args.init,
        "pretrained_sigma": sigma, "grid": grid_info, "certificate": cert.to_dict(),
        "best_epoch": log.best_epoch, "backward_warnings": log.backward_warnings})
    logger.info("trained %s for %d epochs", method, len(log.rows))
    return EXIT_OK


def _model_from_args(cfg, setup, args) -> bench.MethodModel:
    method = args.method
    ckpt = Path(args.checkpoint) if args.checkpoint else Path(cfg["out"]) / method / "net.dqw"
    if not ckpt.exists():
        raise FileNotFoundError(f"checkpoint not found: {ckpt}")
    params_path = ckpt.parent / "params.json"
    params = json.loads(params_path.read_text()) if params_path.exists() else {}
    method = params.get("method", method)
    step = cfg["train"]["step"] if params.get("step") is None else params["step"]
    if getattr(args, "step", None) is not None:
        step = args.step
    return bench.MethodModel(method, load_checkpoint(ckpt), step, params.get("K"),
                             bench.file_digest(ckpt))


def cmd_reconstruct(cfg: dict, args) -> int:
    setup = Setup(cfg)
    mm = _model_from_args(cfg, setup, args)
    y = read_tensor(args.input)
    if tuple(y.shape) != tuple(setup.op.range_shape):
        raise ValueError(f"measurement shape {tuple(y.shape)} does not match operator range "
                         f"{tuple(setup.op.range_shape)}")
    m = mm.iteration_map(setup.op)
    solver = setup.solver()
    x0 = initial_image(setup.op, y, "auto", setup.sigma)
    if mm.method.startswith("du-"):
        # unrolled models run a fixed number of plain steps
        steps = args.max_iter or mm.K
        solver = fixpoint.SolverConfig(engine="picard", tol=np.finfo(float).tiny, max_iter=steps)
    res = reconstruct(m, y, solver, x0=x0)
    out = Path(args.output) if args.output else _out(cfg, "reconstruct", "x.dqt")
    out.parent.mkdir(parents=True, exist_ok=True)
    write_tensor(out, res.point)
    metrics = {"iterations": res.iterations, "seconds": res.seconds, "converged": res.converged,
               "final_residual": res.final_residual}
    if args.truth:
        truth = read_tensor(args.truth)
        metrics["psnr"], metrics["ssim"] = bench.image_metrics(res.point, truth)
        metrics["input_psnr"], _ = bench.image_metrics(x0, truth)
    _write_json(out.with_suffix(".json"), metrics)
    fixpoint.write_residual_csv(res, out.with_name(out.stem + "_residuals.csv"))
    logger.info("reconstructed in %d iterations (converged=%s)", res.iterations, res.converged)
    return EXIT_OK


def cmd_certify(cfg: dict, args) -> int:
    setup = Setup(cfg)
    mm = _model_from_args(cfg, setup, args)
    m = mm.iteration_map(setup.op)
    test = setup.pairs("test")
    cert = _certify(m, test.x[:8], args.theorem, seed=sub_seed(cfg["seed"], "certify"))
    # empirical rate over 10 probes built from test images
    rng = np.random.default_rng(sub_seed(cfg["seed"], "certify"))
    idx = [i % len(test) for i in range(10)]
    x0s = [rng.uniform(0, 1, test.x[i].shape) for i in idx]
    rates = empirical_contraction(m, [test.y[i] for i in idx], x0s, iters=20)
    cert.extra["empirical_rate"] = float(rates.max()) if rates.size else 0.0
    cert.extra["empirical_rate_median"] = float(np.median(rates)) if rates.size else 0.0
    out = _out(cfg, "certificate.json")
    _write_json(out, cert.to_dict())
    print(json.dumps(cert.to_dict(), indent=2, sort_keys=True))
    return EXIT_OK


SUITES = ("iterations", "engines", "noise", "init")


def cmd_bench(cfg: dict, args) -> int:
    setup = Setup(cfg)
    b = cfg["bench"]
    methods = list(b["methods"])
    spec = bench.ExperimentSpec(problem=setup.problem, methods=methods,
                                engine=cfg["forward"]["engine"], iterations=list(b["iterations"]),
                                noise=list(b["noise"]), seeds=[cfg["seed"]], name=args.suite,
                                tol=cfg["forward"]["tol"], max_iter=cfg["forward"]["max_iter"])
    models, missing = {}, []
    if args.suite == "init":
        try:
            family = _load_family(cfg)
        except FileNotFoundError as exc:
            missing.append(str(exc))
    else:
        for meth in (methods if args.suite != "engines" else methods[:1]):
            try:
                models[meth] = _load_method(cfg, meth)
            except bench.MissingCheckpoint as exc:
                missing.append(f"missing checkpoint: {exc}")
    if missing:
        for line in missing:
            logger.error("%s", line)
        return EXIT_RUNTIME
    test = setup.pairs("test")
    n = min(b["images"], len(test))
    test = test.subset(slice(0, n))
    threads = cfg["threads"]
    if args.suite == "iterations":
        records = bench.run_iteration_sweep(spec, models, test, setup.op, threads)
    elif args.suite == "engines":
        records = bench.run_engine_comparison(spec, models, test, setup.op, threads)
    elif args.suite == "noise":
        records = bench.run_noise_sensitivity(spec, models, list(test.x), setup.op, threads)
    else:
        sigma = min(family)
        records = bench.run_init_study(spec, family[sigma], setup.new_net("he"),
                                       cfg["train"]["step"], setup.pairs("train"),
                                       setup.pairs("val"), test, setup.op, setup.train_config(),
                                       threads)
    csv_path = _out(cfg, "bench", f"{args.suite}.csv")
    bench.write_records(records, csv_path)
    bench.write_manifest(spec, models, _out(cfg, "bench", f"{args.suite}_manifest.json"),
                         {"records": len(records)})
    logger.info("wrote %d records to %s", len(records), csv_path)
    return EXIT_OK


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="deqinv",
                                     description="Equilibrium models for linear inverse problems.")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config file")
    common.add_argument("--seed", type=int, help="root seed (u64)")
    common.add_argument("--threads", type=int, help="worker threads (default: logical cores)")
    common.add_argument("--out", help="output directory")
    common.add_argument("--problem", choices=sorted(bench.PROBLEMS))
    common.add_argument("--size", type=int, help="image side length")
    common.add_argument("--engine", choices=sorted(fixpoint.ENGINES), help="forward engine")
    common.add_argument("--tol", type=float, help="forward stopping tolerance")
    common.add_argument("--max-iter", dest="max_iter", type=int, help="forward iteration cap")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("pretrain", parents=[common], help="train the denoiser family")
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)

    p = sub.add_parser("train", parents=[common], help="tune and train one method")
    p.add_argument("--method", required=True,
                   choices=[m for m in bench.METHODS if not m.startswith("pnp")])
    p.add_argument("--init", choices=["pretrained", "random"], default="pretrained")
    p.add_argument("--K", type=int, help="unrolled depth")
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)

    for name, helptext in (("reconstruct", "reconstruct one measurement"),
                           ("certify", "contraction certificate for a checkpoint")):
        p = sub.add_parser(name, parents=[common], help=helptext)
        p.add_argument("--checkpoint", help="DQW1 checkpoint (default: OUT/METHOD/net.dqw)")
        p.add_argument("--method", default="de-prox", choices=list(bench.METHODS))
        p.add_argument("--step", type=float, help="step size when the checkpoint has no params")
        if name == "reconstruct":
            p.add_argument("--input", required=True, help="measurement tensor (DQT1)")
            p.add_argument("--truth", help="ground-truth tensor for metrics")
            p.add_argument("--output", help="restored tensor path")
        else:
            p.add_argument("--theorem", type=int, choices=[1, 2, 3])

    p = sub.add_parser("bench", parents=[common], help="run an experiment suite")
    p.add_argument("--suite", required=True, choices=SUITES)
    p.add_argument("--images", type=int, help="number of test images")
    return parser


COMMANDS = {"pretrain": cmd_pretrain, "train": cmd_train, "reconstruct": cmd_reconstruct,
            "certify": cmd_certify, "bench": cmd_bench}


def _configure_logging():
    level = os.environ.get("DEQ_LOG", "info").lower()
    levels = {"error": logging.ERROR, "info": logging.INFO, "debug": logging.DEBUG,
              "warning": logging.WARNING}
    logging.basicConfig(level=levels.get(level, logging.INFO),
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")


def main(argv=None) -> int:
    _configure_logging()
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = apply_flags(load_config(args.config), args)
    except ConfigError as exc:
        print(f"deqinv: config error:\n{exc}", file=sys.stderr)
        return EXIT_USAGE
    try:
        return COMMANDS[args.command](cfg, args)
    except (FileNotFoundError, bench.MissingCheckpoint) as exc:
        logger.error("%s", exc)
        return EXIT_RUNTIME
    except Exception as exc:  # noqa: BLE001 - top-level reporter
        logger.error("%s failed: %s", args.command, exc)
        logger.debug("traceback", exc_info=True)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
