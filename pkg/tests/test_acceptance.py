"""End-to-end acceptance criteria at toy scale.

Each test prints one ``CRITERION n PASS|FAIL`` line (also collected into the
terminal summary) before asserting. Expensive artifacts (pretrained
families, trained models) are module fixtures. A criterion's runtime is its
own body plus the build time of the fixtures it names: the training it is
about is counted, while the shared denoiser pretraining and models it only
takes as given are not. A criterion with a runtime budget fails when it
overruns it.
"""

import time

import numpy as np
import pytest

from conftest import ACCEPTANCE_LINES
from deqinv import bench, fixpoint
from deqinv.core import DatasetSpec, NoiseSpec, generate_phantoms
from deqinv.deq import (IterationMap, apply_map, certify_contraction, empirical_contraction,
                        initial_image, quality)
from deqinv.fixpoint import SolverConfig
from deqinv.linops import BlurOperator, make_blur, make_gaussian_cs, make_mri_mask, spectral_bounds
from deqinv.regnet import ConvLayer, RegNet, lipschitz_estimate, pretrain_denoiser
from deqinv.train import (GridSpec, TrainConfig, evaluate_image, grid_search, implicit_gradient,
                          make_pairs, mse_loss, peak_allocation, score_point, train_deq,
                          train_unrolled, unrolled_gradient)

pytestmark = pytest.mark.slow

SIZE = 32
HIDDEN, DEPTH = 16, 5
SIGMAS = (0.05, 0.02, 0.01)
NOISE = 0.01
ANDERSON = SolverConfig(engine="anderson", tol=1e-3, max_iter=100)
PICARD = SolverConfig(engine="picard", tol=1e-3, max_iter=100)

_COST: dict[str, float] = {}


def _built(name, t0):
    _COST[name] = time.perf_counter() - t0


def report(n, title, passed, detail, t0, fixtures=(), budget=None):
    seconds = time.perf_counter() - t0 + sum(_COST.get(f, 0.0) for f in fixtures)
    timing = f"{seconds:.0f}s"
    if budget is not None:
        timing += f" (budget {budget:.0f}s)"
        passed = passed and seconds <= budget
    line = f"CRITERION {n} {'PASS' if passed else 'FAIL'}: {title}: {detail}; {timing}"
    print(line)
    ACCEPTANCE_LINES.append((n, line))
    return passed


def _split(images):
    return images[:96], images[96:112], images[112:144]


def _pairs(op, split, sigma=NOISE):
    tr, va, te = split
    return (make_pairs(op, tr, NoiseSpec(sigma, 1)), make_pairs(op, va, NoiseSpec(sigma, 2)),
            make_pairs(op, te, NoiseSpec(sigma, 3)))


def _family(images, channels, sigmas=SIGMAS, epochs=8, seed=0):
    net = RegNet.create(channels, HIDDEN, DEPTH, image_shape=(SIZE, SIZE), seed=seed)
    return pretrain_denoiser(net, images, sigmas, epochs=epochs, lr=1e-3, seed=seed + 1)


def _mean_psnr(m, data, solver=ANDERSON, K=None):
    return float(np.mean([quality(evaluate_image(m, data.y[i], solver, "auto", data.sigma, K),
                                  data.x[i]) for i in range(len(data))]))


# ---------------------------------------------------------------------------
# shared artifacts
# ---------------------------------------------------------------------------

@pytest.fixture(scope="module")
def gray():
    t0 = time.perf_counter()
    split = _split(generate_phantoms(DatasetSpec(count=144, size=SIZE, seed=0)))
    family = _family(split[0], 1)
    _built("gray", t0)
    return split, family


@pytest.fixture(scope="module")
def deblur(gray):
    t0 = time.perf_counter()
    split, family = gray
    op = bench.build_operator("deblur-hi", SIZE)
    train, val, test = _pairs(op, split)
    _built("deblur", t0)
    return {"op": op, "train": train, "val": val, "test": test, "family": family}


@pytest.fixture(scope="module")
def pnp_prox(deblur):
    t0 = time.perf_counter()
    g = grid_search("de-prox", deblur["op"], deblur["family"], GridSpec(sigmas=list(SIGMAS)),
                    deblur["val"], solver=ANDERSON)
    m = IterationMap("de-prox", deblur["op"], deblur["family"][g.sigma], g.step)
    _built("pnp_prox", t0)
    return g, m


@pytest.fixture(scope="module")
def de_prox(deblur, pnp_prox):
    """DE-Prox trained end to end from the best plug-in configuration, with
    the per-step spectral check switched on."""
    t0 = time.perf_counter()
    _, m = pnp_prox
    cfg = TrainConfig(lr=1e-3, epochs=3, batch_size=8, forward=ANDERSON,
                      backward=SolverConfig(engine="anderson", tol=1e-3, max_iter=50),
                      seed=4, debug_spectral=True)
    try:
        net, log = train_deq(m, deblur["train"], cfg, deblur["val"])
        out = {"map": m.with_net(net), "log": log, "error": None}
    except AssertionError as exc:
        out = {"map": None, "log": None, "error": str(exc)}
    _built("de_prox", t0)
    return out


@pytest.fixture(scope="module")
def du_prox(deblur):
    """DU-Prox at K = 10, tuned with the unrolled grid and trained by backprop."""
    t0 = time.perf_counter()
    g = grid_search("de-prox", deblur["op"], deblur["family"], GridSpec(sigmas=list(SIGMAS)),
                    deblur["val"], K=10)
    m = IterationMap("de-prox", deblur["op"], deblur["family"][g.sigma], g.step)
    cfg = TrainConfig(lr=1e-3, epochs=6, batch_size=8, seed=5, debug_spectral=True)
    net, log = train_unrolled(m, 10, deblur["train"], cfg, deblur["val"])
    _built("du_prox", t0)
    return m.with_net(net), log


# ---------------------------------------------------------------------------
# criteria
# ---------------------------------------------------------------------------

def _tiny_deblur():
    op = make_blur(3, 0.25, (1, 8, 8))
    rng = np.random.default_rng(0)
    layers = [ConvLayer(rng.standard_normal((4, 1, 3, 3)) * 0.5, rng.standard_normal(4) * 0.1),
              ConvLayer(rng.standard_normal((1, 4, 3, 3)) * 0.5, rng.standard_normal(1) * 0.1)]
    net = RegNet(layers, image_shape=(8, 8))
    net.spectral_project(power_iters=50)
    m = IterationMap("de-prox", op, net, 1.0)
    x_star = rng.random((1, 8, 8))
    y = op.forward(x_star) + 0.05 * rng.standard_normal((1, 8, 8))
    return m, y, x_star


def test_criterion_01_gradient_oracles():
    t0 = time.perf_counter()
    m, y, x_star = _tiny_deblur()
    tight = SolverConfig(engine="anderson", tol=1e-13, max_iter=500)

    def solve(cur):
        x0 = initial_image(cur.operator, y, "adjoint")
        return fixpoint.solve(lambda s: apply_map(cur, s, y), cur.pack(x0), tight).point

    def loss(theta):
        net = m.net.copy()
        net.set_params(theta)
        cur = m.with_net(net)
        return mse_loss(cur.image(solve(cur)), x_star)[0]

    implicit = implicit_gradient(m, y, x_star, solve(m), tight)
    x0 = m.pack(initial_image(m.operator, y, "adjoint"))
    _, unrolled, _ = unrolled_gradient(m, y, x_star, x0, 200)
    theta = m.net.get_params()
    coords = np.random.default_rng(1).choice(theta.size, 20, replace=False)
    h = 1e-6
    fd = np.empty(20)
    for j, i in enumerate(coords):
        up, down = theta.copy(), theta.copy()
        up[i] += h
        down[i] -= h
        fd[j] = (loss(up) - loss(down)) / (2 * h)

    def rel(a, b):
        return float(np.linalg.norm(a - b) / max(np.linalg.norm(a), np.linalg.norm(b)))

    errs = {"implicit-unrolled": rel(implicit, unrolled),
            "implicit-fd": rel(implicit[coords], fd),
            "unrolled-fd": rel(unrolled[coords], fd)}
    ok = max(errs.values()) <= 1e-3
    detail = ", ".join(f"{k} {v:.1e}" for k, v in errs.items())
    assert report(1, "gradient oracle equivalence", ok, detail + " (tol 1e-3)", t0, budget=60)


def test_criterion_02_adjoints():
    t0 = time.perf_counter()
    ops = {
        "blur": make_blur(9, 5.0, (1, SIZE, SIZE)),
        "blur-asymmetric": BlurOperator(np.random.default_rng(0).random((5, 5)), (1, 12, 12)),
        "gaussian-cs": make_gaussian_cs((1, SIZE, SIZE), 4, seed=1),
        "subsampled-fourier": make_mri_mask(64, 4, seed=2),
    }
    worst = {}
    for name, op in ops.items():
        rng = np.random.default_rng(7)
        w = 0.0
        for _ in range(100):
            u = rng.standard_normal(op.domain_shape)
            v = rng.standard_normal(op.range_shape)
            lhs = np.vdot(op.forward(u), v)
            rhs = np.vdot(u, op.adjoint(v))
            w = max(w, abs(lhs - rhs) / (np.linalg.norm(u) * np.linalg.norm(v)))
        worst[name] = w
    ok = max(worst.values()) <= 1e-10
    detail = ", ".join(f"{k} {v:.1e}" for k, v in worst.items())
    assert report(2, "adjoint dot tests (100 probes each)", ok, detail + " (tol 1e-10)", t0,
                  budget=10)


def test_criterion_03_contraction_certificate(deblur):
    t0 = time.perf_counter()
    op = deblur["op"]
    sb = spectral_bounds(op)
    # the least regularizing member, as the tightest case for the certificate
    net = deblur["family"][0.05]
    # probe at test images as well as noise images; noise alone understates
    # the constant where the iterates actually live
    noise = np.random.default_rng(2).uniform(0, 1, (16, 1, SIZE, SIZE))
    probes = np.concatenate([deblur["test"].x, noise])
    eps = lipschitz_estimate(net, probes=probes, power_iters=50).epsilon
    eta = 0.9 / (sb.L + 1)
    cert = certify_contraction(1, sb.L, sb.mu, eps, eta)
    m = IterationMap("de-grad", op, net, eta)
    test = deblur["test"]
    rng = np.random.default_rng(3)
    idx = [i % len(test) for i in range(50)]
    rates = empirical_contraction(m, [test.y[i] for i in idx],
                                  [rng.uniform(0, 1, test.x[i].shape) for i in idx], iters=20)
    worst = float(rates.max())
    ok = eps < 1 + sb.mu and cert.satisfied and cert.gamma < 1 and worst <= cert.gamma + 0.05
    detail = (f"eps {eps:.3f} < 1 + mu {1 + sb.mu:.2e}, eta {eta:.3f}, gamma {cert.gamma:.4f}, "
              f"max ratio {worst:.4f} over 50 probes (limit gamma + 0.05)")
    assert report(3, "contraction certificate", ok, detail, t0, budget=120)


def test_criterion_04_anderson_speedup(deblur, de_prox):
    t0 = time.perf_counter()
    if de_prox["error"]:
        assert report(4, "Anderson speedup", False, f"training aborted: {de_prox['error']}", t0,
                      budget=300)
    m, test = de_prox["map"], deblur["test"]
    iters, psnrs, conv = {}, {}, {}
    for name, cfg in (("anderson", ANDERSON), ("picard", PICARD)):
        its, ps, ok_count = [], [], 0
        for i in range(len(test)):
            x0 = initial_image(m.operator, test.y[i], "auto", test.sigma)
            res = fixpoint.solve(lambda s, i=i: apply_map(m, s, test.y[i]), m.pack(x0), cfg)
            its.append(res.iterations)
            ps.append(quality(m.image(res.point), test.x[i]))
            ok_count += bool(res.converged)
        iters[name], psnrs[name] = float(np.median(its)), float(np.mean(ps))
        conv[name] = ok_count
    ratio = iters["anderson"] / iters["picard"]
    gap = abs(psnrs["anderson"] - psnrs["picard"])
    ok = ratio <= 0.7 and gap <= 0.1
    detail = (f"median iterations anderson {iters['anderson']:.0f} vs picard {iters['picard']:.0f} "
              f"(ratio {ratio:.2f}, limit 0.7), PSNR {psnrs['anderson']:.2f} vs "
              f"{psnrs['picard']:.2f} dB (gap {gap:.2f}, limit 0.1), converged "
              f"{conv['anderson']}/{len(test)} vs {conv['picard']}/{len(test)}")
    assert report(4, "Anderson speedup", ok, detail, t0, budget=300)


def test_criterion_05_stability(deblur, de_prox, du_prox):
    t0 = time.perf_counter()
    test = deblur["test"]
    du, _ = du_prox
    du10, du40 = _mean_psnr(du, test, K=10), _mean_psnr(du, test, K=40)
    if de_prox["error"]:
        de_gap, k_note = float("inf"), "DE-Prox training aborted"
    else:
        m = de_prox["map"]
        gaps, ks = [], []
        for i in range(len(test)):
            x0 = m.pack(initial_image(m.operator, test.y[i], "auto", test.sigma))
            res = fixpoint.solve(lambda s, i=i: apply_map(m, s, test.y[i]), x0, ANDERSON)
            k = res.iterations
            img2, _ = bench.run_budget(m, test.y[i], "anderson", 2 * k, "auto", test.sigma)
            gaps.append(quality(m.image(res.point), test.x[i]) - quality(img2, test.x[i]))
            ks.append(k)
        de_gap = abs(float(np.mean(gaps)))
        k_note = f"median K* {np.median(ks):.0f}"
    drop = du10 - du40
    ok = drop >= 0.5 and de_gap <= 0.1
    detail = (f"DU-Prox K=10 {du10:.2f} dB, K=40 {du40:.2f} dB (drop {drop:.2f}, need >= 0.5); "
              f"DE-Prox change K* -> 2K* {de_gap:.3f} dB (limit 0.1, {k_note})")
    assert report(5, "DE stability vs DU brittleness", ok, detail, t0,
                  ("pnp_prox", "de_prox", "du_prox"),
                  budget=600)


def test_criterion_06_beats_pnp(deblur, pnp_prox, de_prox):
    t0 = time.perf_counter()
    g, m = pnp_prox
    pnp = _mean_psnr(m, deblur["test"])
    if de_prox["error"]:
        assert report(6, "end-to-end benefit over PnP", False,
                      f"training aborted: {de_prox['error']}", t0, ("pnp_prox", "de_prox"),
                      budget=900)
    de = _mean_psnr(de_prox["map"], deblur["test"])
    ok = de - pnp >= 0.3
    detail = (f"DE-Prox {de:.2f} dB vs PnP-Prox {pnp:.2f} dB (sigma {g.sigma:g}, step {g.step:.3g}); "
              f"gain {de - pnp:.2f} dB (need >= 0.3)")
    assert report(6, "end-to-end benefit over PnP", ok, detail, t0, ("pnp_prox", "de_prox"),
                  budget=900)


def _init_arms(op, family, train, val, test, seed):
    """Train DE-Prox from the pretrained and a random net with one budget."""
    g = grid_search("de-prox", op, family, GridSpec(sigmas=list(SIGMAS)), val, solver=ANDERSON)
    random_net = RegNet.create(1, HIDDEN, DEPTH, image_shape=(SIZE, SIZE), seed=seed, init="he")
    cfg = TrainConfig(lr=1e-3, epochs=2, batch_size=8, seed=seed,
                      backward=SolverConfig(engine="anderson", tol=1e-3, max_iter=50))
    spec = bench.ExperimentSpec("deblur-hi", ["de-prox"])
    recs = bench.run_init_study(spec, family[g.sigma], random_net, g.step, train.subset(slice(0, 48)),
                                val, test, op, cfg)
    agg = bench.aggregate(recs)
    pre = agg.get(("de-prox", "pretrained"), {}).get("psnr", -np.inf)
    rnd = agg.get(("de-prox", "random"), {}).get("psnr", -np.inf)
    return pre, rnd


def test_criterion_07_pretraining_advantage(deblur, gray):
    t0 = time.perf_counter()
    results = {}
    results["deblur"] = _init_arms(deblur["op"], deblur["family"], deblur["train"], deblur["val"],
                                   deblur["test"], seed=21)
    op = bench.build_operator("cs4x", SIZE)
    train, val, test = _pairs(op, gray[0])
    results["cs4x"] = _init_arms(op, gray[1], train, val, test, seed=22)
    ok = all(pre >= rnd - 0.1 for pre, rnd in results.values())
    detail = "; ".join(f"{k} pretrained {p:.2f} vs random {r:.2f} dB" for k, (p, r) in results.items())
    assert report(7, "pretraining advantage", ok, detail + " (need pretrained >= random - 0.1)", t0,
                  budget=1200)


def test_criterion_08_noise_robustness():
    t0 = time.perf_counter()
    images = generate_phantoms(DatasetSpec(count=144, size=SIZE, seed=1, channels=2))
    split = _split(images)
    family = _family(split[0], 2, sigmas=(0.02, 0.01), epochs=6, seed=30)
    op = bench.build_operator("mri4x", SIZE)
    train, val, _ = _pairs(op, split)
    test_imgs = split[2][:16]
    grid = GridSpec(sigmas=[0.02, 0.01])
    g = grid_search("de-prox", op, family, grid, val, solver=ANDERSON)
    de_cfg = TrainConfig(lr=1e-3, epochs=2, batch_size=8, seed=31, forward=ANDERSON,
                         backward=SolverConfig(engine="anderson", tol=1e-3, max_iter=50))
    de_net, _ = train_deq(IterationMap("de-prox", op, family[g.sigma], g.step), train, de_cfg, val)
    gu = grid_search("de-prox", op, family, grid, val, K=10)
    du_cfg = TrainConfig(lr=1e-3, epochs=6, batch_size=8, seed=32)
    du_net, _ = train_unrolled(IterationMap("de-prox", op, family[gu.sigma], gu.step), 10, train,
                               du_cfg, val)
    models = {"de-prox": bench.MethodModel("de-prox", de_net, g.step),
              "du-prox": bench.MethodModel("du-prox", du_net, gu.step, K=10)}
    spec = bench.ExperimentSpec("mri4x", list(models), noise=[NOISE, 2 * NOISE], seeds=[33])
    agg = bench.aggregate(bench.run_noise_sensitivity(spec, models, test_imgs, op))
    drop = {k: agg[(k, repr(NOISE))]["psnr"] - agg[(k, repr(2 * NOISE))]["psnr"] for k in models}
    ok = drop["de-prox"] <= drop["du-prox"]
    detail = ", ".join(
        f"{k} {agg[(k, repr(NOISE))]['psnr']:.2f} -> {agg[(k, repr(2 * NOISE))]['psnr']:.2f} dB "
        f"(drop {drop[k]:.3f})" for k in models)
    assert report(8, "noise robustness (sigma_test = 2 sigma_train, MRI 4x)", ok,
                  detail + " (need DE drop <= DU drop)", t0, budget=600)


def test_criterion_09_spectral_invariant(de_prox, du_prox):
    t0 = time.perf_counter()
    if de_prox["error"]:
        ok, detail = False, f"debug assertion fired: {de_prox['error']}"
    else:
        worst = max(de_prox["log"].max_layer_norm, du_prox[1].max_layer_norm)
        final = max(de_prox["map"].net.layer_norms(iters=1000, seed=9))
        ok = worst <= 1 + 1e-3 and final <= 1 + 1e-3
        detail = (f"max per-step layer norm {worst:.6f} across the DE-Prox and DU-Prox runs, "
                  f"final 1000-iteration check {final:.6f} (limit 1.001)")
    assert report(9, "spectral normalization invariant", ok, detail, t0)


def test_criterion_10_memory(deblur):
    t0 = time.perf_counter()
    data = deblur["train"].subset(slice(0, 8))
    m = IterationMap("de-prox", deblur["op"], deblur["family"][0.01], 1.0)

    def deq_peak(max_iter):
        # tol below reach so every solve runs the full budget
        cfg = TrainConfig(lr=1e-4, epochs=1, batch_size=8, seed=0,
                          forward=SolverConfig(engine="anderson", tol=1e-14, max_iter=max_iter),
                          backward=SolverConfig(engine="anderson", tol=1e-3, max_iter=20))
        return peak_allocation(train_deq, m, data, cfg)[1]

    def du_peak(K):
        return peak_allocation(train_unrolled, m, K, data, TrainConfig(lr=1e-4, epochs=1, batch_size=8,
                                                                       seed=0))[1]

    d20, d100 = deq_peak(20), deq_peak(100)
    u10, u40 = du_peak(10), du_peak(40)
    change = abs(d100 - d20) / d20
    growth = u40 / u10
    ok = change < 0.10 and growth >= 3.0
    detail = (f"train_deq peak {d20 / 2**20:.1f} -> {d100 / 2**20:.1f} MiB for max_iter 20 -> 100 "
              f"(change {change:.1%}, limit 10%); train_unrolled peak {u10 / 2**20:.1f} -> "
              f"{u40 / 2**20:.1f} MiB for K 10 -> 40 (x{growth:.2f}, need >= 3)")
    assert report(10, "memory contract", ok, detail, t0)
