"""
Dense linear-algebra and elementwise primitives shared by every other module.

Vectors are float64 arrays of shape (..., d) and states are float64 arrays of
shape (..., d_k, d_v); every leading axis is a batch/head lane and is carried
through unchanged.
"""
import logging
from typing import Iterable, Optional, Sequence, Tuple, Union

import numpy as np

from deltaKit.core.exceptions import DomainError, NonFiniteError, ShapeMismatchError

logger = logging.getLogger(__name__)

Vector = np.ndarray
Matrix = np.ndarray

DTYPE = np.float64
ELEMENTWISE_KINDS = ("sigmoid", "silu", "softplus", "sqrt", "exp")

_SIGMOID_LOW = np.finfo(DTYPE).tiny
_SIGMOID_HIGH = np.nextafter(1.0, 0.0)


def as_array(x, name: str = "array", timestep: Optional[int] = None) -> np.ndarray:
    """Convert to a float64 array and reject NaN/Inf."""
    arr = np.asarray(x, dtype=DTYPE)
    check_finite(arr, name, timestep)
    return arr


def check_finite(arr: np.ndarray, name: str = "array", timestep: Optional[int] = None) -> None:
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"{name} contains NaN or Inf", timestep=timestep,
                             errors=[{"field": name, "error": "non-finite entry"}])


def _require(cond: bool, message: str, field: str) -> None:
    if not cond:
        raise ShapeMismatchError(message, [{"field": field, "error": message}])


def outer(u: Vector, v: Vector) -> Matrix:
    """result[..., i, j] = u[..., i] * v[..., j]."""
    u = np.asarray(u, dtype=DTYPE)
    v = np.asarray(v, dtype=DTYPE)
    return u[..., :, None] * v[..., None, :]


def matvec_T(S: Matrix, q: Vector) -> Vector:
    """Read-out o = Sᵀq, i.e. result[..., j] = Σ_i S[..., i, j] q[..., i]."""
    S = np.asarray(S, dtype=DTYPE)
    q = np.asarray(q, dtype=DTYPE)
    _require(S.ndim >= 2 and q.shape[-1] == S.shape[-2],
             f"matvec_T: len(q)={q.shape[-1]} does not match S rows={S.shape[-2] if S.ndim >= 2 else None}",
             "q")
    return np.einsum("...ij,...i->...j", S, q)


def householder_apply(S: Matrix, k: Vector) -> Matrix:
    """
    Apply the generalized Householder reflector (I − k kᵀ) to S.

    Computed as the rank-1 correction S − k (kᵀS); the d×d reflector is never formed.
    """
    S = np.asarray(S, dtype=DTYPE)
    k = np.asarray(k, dtype=DTYPE)
    _require(S.ndim >= 2 and k.shape[-1] == S.shape[-2],
             f"householder_apply: len(k)={k.shape[-1]} does not match S rows={S.shape[-2] if S.ndim >= 2 else None}",
             "k")
    proj = np.einsum("...i,...ij->...j", k, S)
    return S - k[..., :, None] * proj[..., None, :]


def diag_scale(alpha: Vector, S: Matrix) -> Matrix:
    """Diag(α)·S: row i scaled by α[i]. A width-1 α acts as a scalar decay."""
    alpha = np.asarray(alpha, dtype=DTYPE)
    S = np.asarray(S, dtype=DTYPE)
    _require(S.ndim >= 2 and alpha.shape[-1] in (1, S.shape[-2]),
             f"diag_scale: len(alpha)={alpha.shape[-1]} does not match S rows={S.shape[-2] if S.ndim >= 2 else None}",
             "alpha")
    return alpha[..., :, None] * S


def l2_normalize(k: Vector, eps: float = 1e-12) -> Vector:
    """k / max(‖k‖₂, eps) along the last axis."""
    if eps <= 0:
        raise DomainError("l2_normalize: eps must be positive", [{"field": "eps", "error": "must be > 0"}])
    k = np.asarray(k, dtype=DTYPE)
    norm = np.sqrt(np.sum(k * k, axis=-1, keepdims=True))
    return k / np.maximum(norm, eps)


def sigmoid(x: np.ndarray) -> np.ndarray:
    """Logistic function clipped to the open interval (0, 1) in double precision."""
    x = np.asarray(x, dtype=DTYPE)
    out = np.exp(-np.logaddexp(0.0, -x))
    return np.clip(out, _SIGMOID_LOW, _SIGMOID_HIGH)


def logit(p: np.ndarray) -> np.ndarray:
    p = np.asarray(p, dtype=DTYPE)
    return np.log(p) - np.log1p(-p)


def elementwise(kind: str, x: Vector) -> Vector:
    """Apply one of sigmoid | silu | softplus | sqrt | exp entrywise."""
    x = np.asarray(x, dtype=DTYPE)
    if kind == "sigmoid":
        return sigmoid(x)
    if kind == "silu":
        return x * np.exp(-np.logaddexp(0.0, -x))
    if kind == "softplus":
        return np.logaddexp(0.0, x)
    if kind == "sqrt":
        if np.any(x < 0):
            raise DomainError("sqrt of negative entry", [{"field": "x", "error": "negative entry"}])
        return np.sqrt(x)
    if kind == "exp":
        return np.exp(x)
    raise DomainError(f"unknown elementwise kind '{kind}'; expected one of {ELEMENTWISE_KINDS}")


def elementwise_derivative(kind: str, x: Vector) -> Vector:
    """d/dx of `elementwise(kind, x)`, evaluated entrywise."""
    x = np.asarray(x, dtype=DTYPE)
    if kind == "sigmoid":
        s = np.exp(-np.logaddexp(0.0, -x))
        return s * (1.0 - s)
    if kind == "silu":
        s = np.exp(-np.logaddexp(0.0, -x))
        return s * (1.0 + x * (1.0 - s))
    if kind == "softplus":
        return np.exp(-np.logaddexp(0.0, -x))
    if kind == "sqrt":
        return 0.5 / np.sqrt(x)
    if kind == "exp":
        return np.exp(x)
    raise DomainError(f"unknown elementwise kind '{kind}'; expected one of {ELEMENTWISE_KINDS}")


def frobenius(S: Matrix) -> np.ndarray:
    S = np.asarray(S, dtype=DTYPE)
    return np.sqrt(np.sum(S * S, axis=(-2, -1)))


def log_softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    x = np.asarray(x, dtype=DTYPE)
    shifted = x - np.max(x, axis=axis, keepdims=True)
    return shifted - np.log(np.sum(np.exp(shifted), axis=axis, keepdims=True))


def softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    """Row-normalized exponentials; fully masked rows (all -inf) are not supported."""
    return np.exp(log_softmax(x, axis))


class Rng:
    """
    Counter-based deterministic generator (Philox) keyed by seed alone.

    Streams are identical on every platform for the same (seed, key). `spawn`
    derives an independent child stream from an integer key path, so per-layer
    or per-episode draws do not depend on the order other streams are consumed.
    """

    def __init__(self, seed: int, key: Sequence[int] = ()):
        if not 0 <= int(seed) < 2 ** 64:
            raise DomainError("Rng seed must be a 64-bit unsigned integer")
        self.seed = int(seed)
        self.key: Tuple[int, ...] = tuple(int(k) for k in key)
        seq = np.random.SeedSequence(entropy=self.seed, spawn_key=self.key)
        self._gen = np.random.Generator(np.random.Philox(seq))

    def spawn(self, *key: int) -> "Rng":
        return Rng(self.seed, self.key + tuple(key))

    def normal(self, size=None, scale: float = 1.0, loc: float = 0.0) -> np.ndarray:
        return self._gen.normal(loc, scale, size)

    def uniform(self, low: float = 0.0, high: float = 1.0, size=None) -> np.ndarray:
        return self._gen.uniform(low, high, size)

    def integers(self, low: int, high: Optional[int] = None, size=None) -> Union[int, np.ndarray]:
        return self._gen.integers(low, high, size)

    def permutation(self, n: Union[int, Iterable]) -> np.ndarray:
        return self._gen.permutation(n)

    def choice(self, a, size=None, replace: bool = True) -> np.ndarray:
        return self._gen.choice(a, size=size, replace=replace)

    def __repr__(self) -> str:
        return f"Rng(seed={self.seed}, key={self.key})"
