"""Equilibrium iteration maps for linear inverse problems.

Three maps share one interface:

* ``de-grad``: ``x + eta A^T(y - Ax) - eta R(x)``
* ``de-prox``: ``R(x + eta A^T(y - Ax))``
* ``de-admm``: on the joint state ``(x, u)``,
  ``z = R(x - u)``, ``x' = (I + alpha A^T A)^{-1}(alpha A^T y + z + u)``,
  ``u' = u + z - x'``.

States are ndarrays. The ADMM state packs ``(x, u)`` along a new leading
axis. Images may carry a leading batch axis; every map acts per image.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from . import fixpoint
from .core import magnitude, psnr
from .linops import BlurOperator, LinearOperator, solve_regularized_normal
from .regnet import RegNet

logger = logging.getLogger(__name__)

KINDS = ("de-grad", "de-prox", "de-admm")
CG_TOL = 1e-10


@dataclass(frozen=True)
class IterationMap:
    kind: str
    operator: LinearOperator
    net: RegNet
    step: float  # eta for grad/prox, alpha for admm

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown map kind {self.kind!r}")
        if not self.step > 0:
            raise ValueError(f"step must be > 0, got {self.step}")
        channels = self.operator.domain_shape[0]
        if self.net.in_channels != channels:
            raise ValueError(f"net has {self.net.in_channels} channels, operator domain has {channels}")

    @property
    def joint(self) -> bool:
        return self.kind == "de-admm"

    def with_net(self, net: RegNet) -> "IterationMap":
        return IterationMap(self.kind, self.operator, net, self.step)

    def __call__(self, state: np.ndarray, y: np.ndarray) -> np.ndarray:
        return apply_map(self, state, y)

    # state packing -------------------------------------------------------

    def pack(self, x: np.ndarray, u: np.ndarray | None = None) -> np.ndarray:
        if not self.joint:
            return x
        return np.stack([x, np.zeros_like(x) if u is None else u])

    def image(self, state: np.ndarray) -> np.ndarray:
        return state[0] if self.joint else state

    def image_cotangent(self, r: np.ndarray) -> np.ndarray:
        """Lift a cotangent on the image to one on the state."""
        return self.pack(r, np.zeros_like(r))

    def linearize(self, state: np.ndarray, y: np.ndarray) -> "MapLinearization":
        return MapLinearization(self, state, y)


def de_grad_step(m: IterationMap, x: np.ndarray, y: np.ndarray, eta: float | None = None) -> np.ndarray:
    eta = m.step if eta is None else eta
    op = m.operator
    return x + eta * op.adjoint(y - op.forward(x)) - eta * m.net.forward(x)


def de_prox_step(m: IterationMap, x: np.ndarray, y: np.ndarray, eta: float | None = None) -> np.ndarray:
    eta = m.step if eta is None else eta
    op = m.operator
    return m.net.forward(x + eta * op.adjoint(y - op.forward(x)))


def _admm_solve(op, alpha, b, x0=None):
    return solve_regularized_normal(op, alpha, b, tol=CG_TOL, x0=x0)


def de_admm_step(m: IterationMap, state, y: np.ndarray, alpha: float | None = None):
    """One joint update. ``state`` is a packed array or an ``(x, u)`` pair."""
    alpha = m.step if alpha is None else alpha
    pair = isinstance(state, tuple)
    x, u = state if pair else (state[0], state[1])
    op = m.operator
    z = m.net.forward(x - u)
    x_new = _admm_solve(op, alpha, alpha * op.adjoint(y) + z + u, x0=x)
    u_new = u + z - x_new
    return (x_new, u_new) if pair else np.stack([x_new, u_new])


_STEPS = {"de-grad": de_grad_step, "de-prox": de_prox_step, "de-admm": de_admm_step}


def apply_map(m: IterationMap, state: np.ndarray, y: np.ndarray) -> np.ndarray:
    return _STEPS[m.kind](m, state, y)


class MapLinearization:
    """The map evaluated at one state with its transposed Jacobians.

    ``vjp`` gives ``(df/dstate)^T b`` and ``vjp_params`` gives
    ``(df/dtheta)^T b`` as a flat vector matching ``RegNet.get_params``.
    """

    def __init__(self, m: IterationMap, state: np.ndarray, y: np.ndarray):
        self.m = m
        op = m.operator
        if m.kind == "de-grad":
            self.lin = m.net.linearize(state)
            self.output = state + m.step * op.adjoint(y - op.forward(state)) - m.step * self.lin.output
        elif m.kind == "de-prox":
            z = state + m.step * op.adjoint(y - op.forward(state))
            self.lin = m.net.linearize(z)
            self.output = self.lin.output
        else:
            x, u = state[0], state[1]
            self.lin = m.net.linearize(x - u)
            zt = self.lin.output
            x_new = _admm_solve(op, m.step, m.step * op.adjoint(y) + zt + u, x0=x)
            self.output = np.stack([x_new, u + zt - x_new])

    @property
    def nbytes(self) -> int:
        return self.lin.nbytes

    def _net_cotangent(self, b):
        """Cotangent reaching the net output, plus the state part that bypasses it."""
        m = self.m
        op = m.operator
        if m.kind == "de-grad":
            return -m.step * b, b - m.step * op.normal(b)
        if m.kind == "de-prox":
            return b, None
        bx, bu = b[0], b[1]
        c = _admm_solve(op, m.step, bx - bu)
        w = c + bu
        return w, w

    def _finish(self, bypass, g_net):
        m = self.m
        if m.kind == "de-grad":
            return bypass + g_net
        if m.kind == "de-prox":
            return g_net - m.step * m.operator.normal(g_net)
        return np.stack([g_net, bypass - g_net])

    def vjp(self, b: np.ndarray) -> np.ndarray:
        net_ct, bypass = self._net_cotangent(b)
        return self._finish(bypass, self.lin.vjp(net_ct))

    def vjp_params(self, b: np.ndarray) -> np.ndarray:
        net_ct, _ = self._net_cotangent(b)
        return self.lin.vjp_params(net_ct)

    def vjp_both(self, b: np.ndarray):
        net_ct, bypass = self._net_cotangent(b)
        g_net, g_theta = self.lin.vjp_both(net_ct)
        return self._finish(bypass, g_net), g_theta


# ---------------------------------------------------------------------------
# reconstruction
# ---------------------------------------------------------------------------

def initial_image(op: LinearOperator, y: np.ndarray, policy: str = "auto",
                  sigma: float = 0.0) -> np.ndarray:
    """Starting image.

    ``adjoint`` is ``A^T y``. ``regularized`` is ``(A^T A + lam I)^{-1} A^T y``
    with ``lam = max(sigma, 1e-3)``. ``auto`` picks ``regularized`` for blur
    and ``adjoint`` otherwise.
    """
    if policy == "auto":
        policy = "regularized" if isinstance(op, BlurOperator) else "adjoint"
    aty = op.adjoint(y)
    if policy == "adjoint":
        return aty
    if policy == "regularized":
        lam = max(float(sigma), 1e-3)
        return solve_regularized_normal(op, 1.0 / lam, aty / lam, tol=CG_TOL)
    if policy == "zeros":
        return np.zeros_like(aty)
    raise ValueError(f"unknown x0 policy {policy!r}")


def reconstruct(m: IterationMap, y: np.ndarray, solver: fixpoint.SolverConfig,
                x0_policy: str = "auto", sigma: float = 0.0,
                x0: np.ndarray | None = None) -> fixpoint.FixedPointResult:
    """Run the configured engine on the map from the policy's starting image.

    ``result.point`` is the image; ``result.state`` is the full (possibly
    joint) state. A solve that does not converge returns its best iterate.
    """
    if x0 is None:
        x0 = initial_image(m.operator, y, x0_policy, sigma)
    res = fixpoint.solve(lambda s: apply_map(m, s, y), m.pack(x0), solver)
    state = res.point if res.converged else res.best_point
    if not res.converged:
        logger.debug("reconstruct: no convergence in %d iterations (residual %.3e)",
                     res.iterations, res.final_residual)
    res.state = state
    res.point = m.image(state)
    return res


def quality(x: np.ndarray, ref: np.ndarray) -> float:
    """PSNR on magnitudes for two-channel images, directly otherwise."""
    if x.shape[-3] == 2:
        return psnr(magnitude(x), magnitude(ref))
    return psnr(x, ref)


# ---------------------------------------------------------------------------
# contraction certificates
# ---------------------------------------------------------------------------

@dataclass
class ContractionCertificate:
    theorem: int
    L: float
    mu: float
    epsilon: float
    parameter: float  # eta (1, 2) or alpha (3)
    satisfied: bool
    gamma: float | None = None
    lower: float | None = None
    upper: float | None = None
    reason: str = ""
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        def clean(v):
            if isinstance(v, float) and not math.isfinite(v):
                return str(v)
            return v
        out = {k: clean(v) for k, v in self.__dict__.items() if k != "extra"}
        out.update({k: clean(v) for k, v in self.extra.items()})
        return out


def certify_contraction(theorem: int, L: float, mu: float, epsilon: float,
                        eta_or_alpha: float) -> ContractionCertificate:
    """Check the sufficient contraction condition for one map kind.

    1 (gradient map): ``gamma = 1 - eta(1 + mu) + eta eps`` with
    ``0 < eta < 1/(L + 1)``; satisfied when additionally ``gamma < 1``.
    2 (proximal map): ``1/(mu(1 + 1/eps)) < eta < 2/L - 1/(L(1 + 1/eps))``.
    3 (ADMM map): ``alpha > eps / ((1 + eps - 2 eps^2) mu)``.
    Theorems 2 and 3 need ``mu > 0``.
    """
    if theorem not in (1, 2, 3):
        raise ValueError(f"theorem must be 1, 2 or 3, got {theorem}")
    if not (L >= mu >= 0 and epsilon >= 0):
        raise ValueError("need L >= mu >= 0 and epsilon >= 0")
    p = float(eta_or_alpha)
    cert = ContractionCertificate(theorem, float(L), float(mu), float(epsilon), p, False)
    if theorem == 1:
        cert.gamma = 1.0 - p * (1.0 + mu) + p * epsilon
        cert.lower, cert.upper = 0.0, 1.0 / (L + 1.0)
        ok_step = cert.lower < p < cert.upper
        cert.satisfied = ok_step and cert.gamma < 1.0
        if not ok_step:
            cert.reason = "eta outside (0, 1/(L+1))"
        elif not cert.gamma < 1.0:
            cert.reason = "epsilon >= 1 + mu"
        return cert
    if mu <= 0:
        cert.reason = "λ_min = 0"
        return cert
    if theorem == 2:
        inv = math.inf if epsilon == 0 else 1.0 / epsilon
        cert.lower = 0.0 if epsilon == 0 else 1.0 / (mu * (1.0 + inv))
        cert.upper = 2.0 / L - (0.0 if epsilon == 0 else 1.0 / (L * (1.0 + inv)))
        cert.extra["epsilon_limit"] = math.inf if L == mu else 2.0 * mu / (L - mu)
        cert.satisfied = cert.lower < p < cert.upper
        if not cert.lower < cert.upper:
            cert.reason = "empty step window (epsilon >= 2 mu / (L - mu))"
        elif not cert.satisfied:
            cert.reason = "eta outside the step window"
        return cert
    denom = 1.0 + epsilon - 2.0 * epsilon ** 2
    if denom <= 0:
        cert.reason = "1 + eps - 2 eps^2 <= 0"
        return cert
    cert.lower = epsilon / (denom * mu)
    cert.satisfied = p > cert.lower
    if not cert.satisfied:
        cert.reason = "alpha below threshold"
    return cert


THEOREM_FOR_KIND = {"de-grad": 1, "de-prox": 2, "de-admm": 3}


def empirical_contraction(m: IterationMap, ys, x0s, iters: int = 20, skip: int = 3) -> np.ndarray:
    """Picard step-norm ratios ``r_{k+1}/r_k`` for ``k >= skip`` over probes.

    Returns an array of shape ``(probes, iters - skip - 1)``; ratios after a
    zero step are reported as 0.
    """
    rows = []
    for y, x0 in zip(ys, x0s):
        s = m.pack(x0)
        norms = []
        for _ in range(iters):
            s_new = apply_map(m, s, y)
            norms.append(float(np.linalg.norm(s_new - s)))
            s = s_new
        r = np.asarray(norms)
        num, den = r[skip + 1:], r[skip:-1]
        rows.append(np.divide(num, den, out=np.zeros_like(num), where=den > 0))
    return np.asarray(rows)
