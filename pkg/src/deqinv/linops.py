"""Forward measurement operators, spectral bounds of A^T A, and the CG solve.

Every operator maps image tensors ``(C, H, W)`` (optionally batched with a
leading axis) to measurement tensors and back. Adjoint pairs satisfy the
dot test ``<Av, w> = <v, A^T w>`` to rounding error.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np

from . import _conv
from .core import make_rng

logger = logging.getLogger(__name__)


class ConvergenceError(RuntimeError):
    """An iterative routine failed to reach its tolerance."""


def _batched(v: np.ndarray, shape: tuple) -> tuple[np.ndarray, bool]:
    v = np.asarray(v, dtype=np.float64)
    if v.shape == shape:
        return v[None], False
    if v.ndim == len(shape) + 1 and v.shape[1:] == shape:
        return v, True
    raise ValueError(f"shape mismatch: expected {shape} (optionally batched), got {v.shape}")


class LinearOperator:
    """Base class. Subclasses implement ``_forward``/``_adjoint`` on batches."""

    kind: str = "abstract"
    domain_shape: tuple
    range_shape: tuple

    #: True when A^T A is known to be singular (undersampled operators).
    has_nullspace: bool = False

    def forward(self, v: np.ndarray) -> np.ndarray:
        vb, batched = _batched(v, self.domain_shape)
        out = self._forward(vb)
        return out if batched else out[0]

    def adjoint(self, v: np.ndarray) -> np.ndarray:
        vb, batched = _batched(v, self.range_shape)
        out = self._adjoint(vb)
        return out if batched else out[0]

    def normal(self, v: np.ndarray) -> np.ndarray:
        """A^T A v."""
        return self.adjoint(self.forward(v))

    def to_config(self) -> dict:
        raise NotImplementedError

    def _forward(self, v):
        raise NotImplementedError

    def _adjoint(self, v):
        raise NotImplementedError


def operator_eval(op: LinearOperator, v: np.ndarray, direction: str = "forward") -> np.ndarray:
    if direction == "forward":
        return op.forward(v)
    if direction == "adjoint":
        return op.adjoint(v)
    raise ValueError(f"direction must be 'forward' or 'adjoint', got {direction!r}")


class BlurOperator(LinearOperator):
    """Channel-wise 2-D convolution with half-sample symmetric boundaries.

    With a symmetric kernel this operator is self-adjoint.
    """

    kind = "blur"

    def __init__(self, kernel: np.ndarray, shape: tuple, params: dict | None = None):
        kernel = np.asarray(kernel, dtype=np.float64)
        if kernel.ndim != 2 or kernel.shape[0] != kernel.shape[1] or kernel.shape[0] % 2 == 0:
            raise ValueError("blur kernel must be square with odd size")
        self.kernel = kernel
        self.domain_shape = self.range_shape = tuple(shape)
        self._params = params or {}
        # convolution = correlation with the flipped kernel
        self._w = np.flip(kernel)[None, None].copy()

    def _apply(self, v, w):
        n, c, h, wd = v.shape
        out = _conv.conv_same(v.reshape(n * c, 1, h, wd), w)
        return out.reshape(n, c, h, wd)

    def _forward(self, v):
        return self._apply(v, self._w)

    def _adjoint(self, v):
        n, c, h, wd = v.shape
        out = _conv.conv_same_adjoint(v.reshape(n * c, 1, h, wd), self._w)
        return out.reshape(n, c, h, wd)

    def to_config(self) -> dict:
        return {"kind": "blur", "shape": list(self.domain_shape), **self._params}


class DenseOperator(LinearOperator):
    """Dense ``m x n`` matrix acting on flattened images.

    Measurements are stored as ``(1, 1, m)`` tensors.
    """

    kind = "dense-matrix"

    def __init__(self, matrix: np.ndarray, shape: tuple, kind: str = "dense-matrix",
                 params: dict | None = None):
        matrix = np.asarray(matrix, dtype=np.float64)
        if matrix.ndim != 2 or matrix.shape[1] != int(np.prod(shape)):
            raise ValueError(f"matrix shape {matrix.shape} incompatible with image shape {shape}")
        self.matrix = matrix
        self.kind = kind
        self.domain_shape = tuple(shape)
        self.range_shape = (1, 1, matrix.shape[0])
        self.has_nullspace = matrix.shape[0] < matrix.shape[1]
        self._params = params or {}

    def _forward(self, v):
        out = v.reshape(v.shape[0], -1) @ self.matrix.T
        return out.reshape(v.shape[0], *self.range_shape)

    def _adjoint(self, v):
        out = v.reshape(v.shape[0], -1) @ self.matrix
        return out.reshape(v.shape[0], *self.domain_shape)

    def to_config(self) -> dict:
        return {"kind": self.kind, "shape": list(self.domain_shape), **self._params}


class FourierMaskOperator(LinearOperator):
    """Unitary 2-D DFT followed by selection of k-space columns.

    Complex images and k-space data are stored as 2 real channels. The
    adjoint zero-fills the missing columns before the inverse DFT.
    """

    kind = "subsampled-fourier"

    def __init__(self, columns: np.ndarray, shape: tuple, params: dict | None = None):
        if shape[0] != 2:
            raise ValueError("Fourier operator acts on 2-channel (complex) images")
        self.columns = np.sort(np.asarray(columns, dtype=np.int64))
        self.domain_shape = tuple(shape)
        self.range_shape = (2, shape[1], len(self.columns))
        self.has_nullspace = len(self.columns) < shape[2]
        self._params = params or {}

    @property
    def mask(self) -> np.ndarray:
        m = np.zeros(self.domain_shape[2], dtype=bool)
        m[self.columns] = True
        return m

    def _forward(self, v):
        z = v[:, 0] + 1j * v[:, 1]
        k = np.fft.fft2(z, norm="ortho")[:, :, self.columns]
        return np.stack([k.real, k.imag], axis=1)

    def _adjoint(self, v):
        n = v.shape[0]
        full = np.zeros((n, self.domain_shape[1], self.domain_shape[2]), dtype=np.complex128)
        full[:, :, self.columns] = v[:, 0] + 1j * v[:, 1]
        z = np.fft.ifft2(full, norm="ortho")
        return np.stack([z.real, z.imag], axis=1)

    def to_config(self) -> dict:
        return {"kind": "mri", "shape": list(self.domain_shape), **self._params}


def gaussian_kernel(size: int = 9, variance: float = 5.0) -> np.ndarray:
    if size < 1 or size % 2 == 0:
        raise ValueError(f"kernel size must be odd and >= 1, got {size}")
    r = np.arange(size) - size // 2
    g = np.exp(-(r[:, None] ** 2 + r[None, :] ** 2) / (2.0 * variance))
    return g / g.sum()


def make_blur(size: int = 9, variance: float = 5.0, shape: tuple = (1, 32, 32)) -> BlurOperator:
    """Gaussian blur, by default the 9x9 kernel with variance 5."""
    return BlurOperator(gaussian_kernel(size, variance), shape,
                        params={"blur_size": size, "blur_variance": variance})


def make_gaussian_cs(shape, undersampling: float = 4, seed: int = 0) -> DenseOperator:
    """Random Gaussian sensing matrix with i.i.d. N(0, 1/m) entries.

    ``shape`` is the image shape, or an int giving a flat ``(1, 1, n)`` domain.
    """
    if isinstance(shape, (int, np.integer)):
        shape = (1, 1, int(shape))
    shape = tuple(shape)
    if undersampling < 1:
        raise ValueError("undersampling must be >= 1")
    n = int(np.prod(shape))
    m = int(math.floor(n / undersampling))
    if m == 0:
        raise ValueError(f"undersampling {undersampling} leaves no measurements for n={n}")
    matrix = make_rng(seed).standard_normal((m, n)) / math.sqrt(m)
    return DenseOperator(matrix, shape, kind="gaussian-cs",
                         params={"undersampling": undersampling, "seed": seed})


def _round_half_up(v: float) -> int:
    return int(math.floor(v + 0.5))


def mri_columns(width: int, acceleration: float, center_fraction: float = 0.04,
                seed: int = 0) -> np.ndarray:
    """Indices (unshifted DFT order) of the k-space columns that are kept."""
    if width < 8:
        raise ValueError("width must be >= 8")
    n_center = int(math.ceil(center_fraction * width - 1e-12))
    n_total = _round_half_up(width / acceleration)
    if n_total < n_center:
        raise ValueError(f"{n_total} kept columns cannot cover {n_center} center columns")
    # centred coordinates: index width // 2 is zero frequency
    start = width // 2 - n_center // 2
    centered = set(range(start, start + n_center))
    rest = np.array([j for j in range(width) if j not in centered])
    n_extra = n_total - n_center
    chosen = []
    if n_extra > 0:
        f = (rest - width // 2) / (width / 2.0)
        p = np.exp(-f ** 2 / 2.0)
        chosen = make_rng(seed).choice(rest, size=n_extra, replace=False, p=p / p.sum()).tolist()
    shifted = np.array(sorted(centered) + chosen, dtype=np.int64)
    return np.sort(np.fft.ifftshift(np.arange(width))[shifted])


def make_mri_mask(width: int, acceleration: float = 4, center_fraction: float = 0.04,
                  seed: int = 0, height: int | None = None) -> FourierMaskOperator:
    """Cartesian column-subsampled single-coil MRI operator."""
    height = width if height is None else height
    cols = mri_columns(width, acceleration, center_fraction, seed)
    return FourierMaskOperator(cols, (2, height, width), params={
        "acceleration": acceleration, "center_fraction": center_fraction, "seed": seed})


# ---------------------------------------------------------------------------
# spectral bounds
# ---------------------------------------------------------------------------

@dataclass
class SpectralBounds:
    L: float
    mu: float
    method: str
    iterations: int
    tol: float
    residual: float


def _power_iteration(apply, shape, tol, max_iter, seed=0, scale=0.0):
    """Largest eigenvalue of a symmetric PSD map by power iteration.

    Stops when the eigen-residual ``||Bv - rho v|| <= tol max(rho, scale)``,
    or when the Rayleigh quotient has stopped moving (clustered top
    eigenvalues).
    """
    v = make_rng(seed).standard_normal(shape)
    v /= np.linalg.norm(v)
    rho_prev = 0.0
    stalled = 0
    for it in range(1, max_iter + 1):
        bv = apply(v)
        rho = float(np.vdot(v, bv))
        res = float(np.linalg.norm(bv - rho * v))
        nb = np.linalg.norm(bv)
        if nb == 0.0:
            return 0.0, it, 0.0, "power"
        if res <= tol * max(abs(rho), scale):
            return rho, it, res, "power"
        stalled = stalled + 1 if abs(rho - rho_prev) <= 1e-2 * tol * max(abs(rho), scale) else 0
        if stalled >= 10:
            return rho, it, res, "power-stagnated"
        rho_prev = rho
        v = bv / nb
    raise ConvergenceError(f"power iteration did not converge in {max_iter} iterations (residual {res:.3e})")


def spectral_bounds(op: LinearOperator, tol: float = 1e-6, max_iter: int = 5000) -> SpectralBounds:
    """Extreme eigenvalues L and mu of A^T A.

    L comes from power iteration on A^T A; mu from power iteration on
    ``L I - A^T A``. Operators with a known nullspace report ``mu = 0``.
    """
    L, it_l, res_l, tag = _power_iteration(op.normal, op.domain_shape, tol, max_iter)
    if op.has_nullspace:
        return SpectralBounds(L, 0.0, tag + "+nullspace", it_l, tol, res_l)
    lam, it_m, res_m, tag_m = _power_iteration(lambda v: L * v - op.normal(v), op.domain_shape,
                                              tol, max_iter, seed=1, scale=L)
    mu = min(max(L - lam, 0.0), L)
    method = tag if tag_m == tag else f"{tag}/{tag_m}"
    return SpectralBounds(L, mu, method, it_l + it_m, tol, max(res_l, res_m))


# ---------------------------------------------------------------------------
# (I + alpha A^T A) v = b
# ---------------------------------------------------------------------------

def solve_regularized_normal(op: LinearOperator, alpha: float, b: np.ndarray,
                             tol: float = 1e-8, max_iter: int = 500,
                             x0: np.ndarray | None = None) -> np.ndarray:
    """Conjugate-gradient solve of ``(I + alpha A^T A) v = b``.

    Only operator applications are used. A batched ``b`` is solved as one
    block-diagonal system.
    """
    if not alpha > 0:
        raise ValueError(f"alpha must be > 0, got {alpha}")
    b = np.asarray(b, dtype=np.float64)

    def apply(v):
        return v + alpha * op.normal(v)

    nb = np.linalg.norm(b)
    if nb == 0.0:
        return np.zeros_like(b)
    x = np.zeros_like(b) if x0 is None else np.array(x0, dtype=np.float64)
    r = b - apply(x) if x0 is not None else b.copy()
    p = r.copy()
    rs = float(np.vdot(r, r))
    best = math.sqrt(rs)
    since_best = 0
    for _ in range(max_iter):
        if math.sqrt(rs) <= tol * nb:
            return x
        ap = apply(p)
        step = rs / float(np.vdot(p, ap))
        x += step * p
        r -= step * ap
        rs_new = float(np.vdot(r, r))
        p = r + (rs_new / rs) * p
        rs = rs_new
        if math.sqrt(rs) < best:
            best, since_best = math.sqrt(rs), 0
        else:
            since_best += 1
            if since_best >= 50:
                raise ConvergenceError(f"CG stagnated at relative residual {best / nb:.3e}")
    if math.sqrt(rs) <= tol * nb:
        return x
    raise ConvergenceError(f"CG reached max_iter={max_iter} at relative residual {math.sqrt(rs) / nb:.3e}")
