"""Dense float64 primitives shared by the model, the engine and the analysis code.

A "matrix" here is simply a 2-D C-contiguous ``numpy.ndarray`` of dtype float64.
Every operation validates its shapes and refuses to return non-finite values.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

Matrix = np.ndarray

_MASK64 = (1 << 64) - 1
_GOLDEN_GAMMA = 0x9E3779B97F4A7C15
_MIX1 = 0xBF58476D1CE4E5B9
_MIX2 = 0x94D049BB133111EB
_TWO_POW_M53 = 1.0 / (1 << 53)
_GELU_C = math.sqrt(2.0 / math.pi)


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


class NonFiniteError(FloatingPointError):
    """Raised when an operation would produce NaN or Inf."""


def as_matrix(x, name: str = "matrix") -> Matrix:
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim != 2:
        raise ShapeError(f"{name} must be 2-D, got shape {arr.shape}")
    return np.ascontiguousarray(arr)


def _finite(out: np.ndarray, op: str) -> np.ndarray:
    if not np.isfinite(out).all():
        raise NonFiniteError(f"{op} produced non-finite values")
    return out


def matmul(a: Matrix, b: Matrix) -> Matrix:
    """Standard matrix product ``a @ b``.

    Rows of the result depend only on the matching rows of ``a``: a product
    over a subset of rows is bit-identical to the same rows of the full
    product. Single-row operands are padded to two rows because BLAS routes
    them through a matrix-vector kernel with a different summation order.
    """
    a = as_matrix(a, "a")
    b = as_matrix(b, "b")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul dimension mismatch: {a.shape} x {b.shape}")
    with np.errstate(over="ignore", invalid="ignore"):
        if a.shape[0] == 1:
            out = (np.vstack([a, a]) @ b)[:1]
        else:
            out = a @ b
    return _finite(np.ascontiguousarray(out), "matmul")


def row_softmax(s: Matrix, scale: float = 1.0) -> Matrix:
    """Row-wise softmax of ``scale * s``, stabilised by subtracting the row max."""
    if not scale > 0:
        raise ValueError(f"scale must be positive, got {scale}")
    s = as_matrix(s, "s")
    if s.shape[1] == 0:
        return s.copy()
    z = s * scale
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return _finite(e / e.sum(axis=1, keepdims=True), "row_softmax")


def rms_norm(x: Matrix, gain, eps: float = 1e-6) -> Matrix:
    """``x_i / sqrt(mean(x**2) + eps) * g_i`` per row.

    With ``eps=0`` the result is exactly invariant to positive row scaling
    (up to rounding). A zero row with ``eps=0`` maps to zero.
    """
    x = as_matrix(x, "x")
    gain = np.asarray(gain, dtype=np.float64)
    if gain.shape != (x.shape[1],):
        raise ShapeError(f"gain shape {gain.shape} does not match x {x.shape}")
    ms = np.mean(x * x, axis=1, keepdims=True) + eps
    rms = np.sqrt(ms)
    with np.errstate(invalid="ignore", divide="ignore"):
        y = np.where(rms > 0, x / np.where(rms > 0, rms, 1.0), 0.0)
    return _finite(y * gain, "rms_norm")


def gelu(x: np.ndarray) -> np.ndarray:
    """Tanh-approximated GELU; ``gelu(0) == 0`` exactly."""
    inner = _GELU_C * (x + 0.044715 * (x * x * x))
    return 0.5 * x * (1.0 + np.tanh(inner))


def rope_rotate(x: Matrix, positions, theta_base: float, d_head: int) -> Matrix:
    """Rotary embedding over interleaved pairs ``(2k, 2k+1)`` of every head.

    ``positions`` are global sequence indices, one per row, so a row rotates
    the same way whether it arrives in a full or a response-only input.
    """
    x = as_matrix(x, "x")
    if d_head <= 0 or d_head % 2:
        raise ShapeError(f"d_head must be a positive even number, got {d_head}")
    if x.shape[1] % d_head:
        raise ShapeError(f"width {x.shape[1]} is not divisible by d_head={d_head}")
    pos = np.asarray(positions, dtype=np.float64)
    if pos.shape != (x.shape[0],):
        raise ShapeError(f"need one position per row: {pos.shape} vs {x.shape[0]} rows")
    n_heads = x.shape[1] // d_head
    half = d_head // 2
    inv_freq = theta_base ** (-2.0 * np.arange(half) / d_head)
    angle = pos[:, None] * inv_freq[None, :]
    cos = np.cos(angle)[:, None, :]
    sin = np.sin(angle)[:, None, :]
    xr = x.reshape(x.shape[0], n_heads, half, 2)
    even, odd = xr[..., 0], xr[..., 1]
    out = np.empty_like(xr)
    out[..., 0] = even * cos - odd * sin
    out[..., 1] = even * sin + odd * cos
    return _finite(out.reshape(x.shape), "rope_rotate")


def cosine_similarity_rows(a: Matrix, b: Matrix, zero_tol: float = 1e-12) -> np.ndarray:
    """Per-row cosine similarity.

    Both rows (near) zero gives 1; exactly one (near) zero row gives 0.
    Identical nonzero rows give exactly 1.0.
    """
    a = as_matrix(a, "a")
    b = as_matrix(b, "b")
    if a.shape != b.shape:
        raise ShapeError(f"cosine similarity shape mismatch: {a.shape} vs {b.shape}")
    dot = np.einsum("ij,ij->i", a, b)
    aa = np.einsum("ij,ij->i", a, a)
    bb = np.einsum("ij,ij->i", b, b)
    na = np.sqrt(aa)
    nb = np.sqrt(bb)
    a_zero = na < zero_tol
    b_zero = nb < zero_tol
    out = np.zeros(a.shape[0])
    ok = ~(a_zero | b_zero)
    # sqrt(aa * bb) rather than na * nb: equals aa exactly when a == b.
    out[ok] = dot[ok] / np.sqrt(aa[ok] * bb[ok])
    out[a_zero & b_zero] = 1.0
    return out


def _jacobi_pairs(n: int):
    """Round-robin schedule: n-1 rounds of n/2 disjoint column pairs (n even)."""
    players = list(range(n))
    for _ in range(n - 1):
        half = n // 2
        yield [(min(players[i], players[n - 1 - i]), max(players[i], players[n - 1 - i])) for i in range(half)]
        players = [players[0], players[-1], *players[1:-1]]


def singular_values(w: Matrix, tol: float = 1e-12, max_sweeps: int = 100) -> np.ndarray:
    """Singular values (descending) by one-sided Jacobi (Hestenes) rotations.

    Sweeps continue until the relative off-diagonal norm of ``W^T W`` falls
    below ``tol``.
    """
    a = as_matrix(w, "w").copy()
    n_rows, n = a.shape
    if n == 0:
        return np.zeros(0)
    if n % 2:
        a = np.hstack([a, np.zeros((n_rows, 1))])
    m = a.shape[1]
    schedule = [np.array(r, dtype=np.intp) for r in _jacobi_pairs(m)] if m > 1 else []
    for _ in range(max_sweeps):
        off = 0.0
        for rnd in schedule:
            p, q = rnd[:, 0], rnd[:, 1]
            ap, aq = a[:, p], a[:, q]
            alpha = np.einsum("ij,ij->j", ap, ap)
            beta = np.einsum("ij,ij->j", aq, aq)
            gamma = np.einsum("ij,ij->j", ap, aq)
            denom = np.sqrt(alpha * beta)
            live = (denom > 0) & (gamma != 0)
            if not live.any():
                continue
            rel = np.zeros_like(gamma)
            rel[live] = gamma[live] / denom[live]
            off += float(np.sum(rel**2))
            g = np.where(live, gamma, 1.0)
            with np.errstate(over="ignore"):
                zeta = (beta - alpha) / (2.0 * g)
                t = np.sign(zeta) / (np.abs(zeta) + np.sqrt(1.0 + zeta**2))
            t = np.where(zeta == 0, 1.0, t)
            c = 1.0 / np.sqrt(1.0 + t**2)
            s = c * t
            c = np.where(live, c, 1.0)
            s = np.where(live, s, 0.0)
            a[:, p] = c * ap - s * aq
            a[:, q] = s * ap + c * aq
        if math.sqrt(off) < tol:
            break
    # the padding column (odd n) stays zero and sorts last
    sv = np.sort(np.sqrt(np.einsum("ij,ij->j", a, a)))[::-1]
    return sv[:n]


def condition_number(w: Matrix) -> float:
    """``sigma_max / sigma_min`` of a square matrix; ``inf`` when sigma_min < 1e-14."""
    w = as_matrix(w, "w")
    if w.shape[0] != w.shape[1]:
        raise ShapeError(f"condition_number needs a square matrix, got {w.shape}")
    if w.shape[0] > 256:
        raise ShapeError(f"condition_number is limited to dimension 256, got {w.shape[0]}")
    sv = singular_values(w)
    if sv.size == 0:
        raise ShapeError("condition_number of an empty matrix")
    if sv[-1] < 1e-14:
        return math.inf
    return float(sv[0] / sv[-1])


def splitmix64(state: int) -> tuple[int, int]:
    """One SplitMix64 step on a Python int. Returns ``(new_state, output)``."""
    state = (state + _GOLDEN_GAMMA) & _MASK64
    z = state
    z = ((z ^ (z >> 30)) * _MIX1) & _MASK64
    z = ((z ^ (z >> 27)) * _MIX2) & _MASK64
    return state, z ^ (z >> 31)


@dataclass
class Rng:
    """SplitMix64 stream. ``state`` is advanced by every draw."""

    state: int

    def __post_init__(self):
        self.state &= _MASK64

    def next_u64(self) -> int:
        self.state, out = splitmix64(self.state)
        return out

    def u64_block(self, n: int) -> np.ndarray:
        """The next ``n`` outputs as a uint64 array (same values as ``n`` calls to next_u64)."""
        if n == 0:
            return np.zeros(0, dtype=np.uint64)
        k = np.arange(1, n + 1, dtype=np.uint64)
        z = np.uint64(self.state) + k * np.uint64(_GOLDEN_GAMMA)
        z = (z ^ (z >> np.uint64(30))) * np.uint64(_MIX1)
        z = (z ^ (z >> np.uint64(27))) * np.uint64(_MIX2)
        z = z ^ (z >> np.uint64(31))
        self.state = (self.state + n * _GOLDEN_GAMMA) & _MASK64
        return z

    def uniform_block(self, n: int) -> np.ndarray:
        """``n`` uniforms in [0, 1) from the top 53 bits of each output."""
        return (self.u64_block(n) >> np.uint64(11)).astype(np.float64) * _TWO_POW_M53


def rng_normal_fill(rng: Rng, rows: int, cols: int, stddev: float) -> Matrix:
    """Row-major Gaussian fill via Box-Muller.

    Each pair of normals consumes two uniforms ``(u_a, u_b)``:
    ``r = sqrt(-2 ln(1 - u_a))``, then ``r cos(2 pi u_b)`` and ``r sin(2 pi u_b)``
    in that order. An odd count discards the final sine value (its uniforms
    are still consumed). ``stddev == 0`` consumes draws and yields zeros.
    """
    if stddev < 0:
        raise ValueError(f"stddev must be >= 0, got {stddev}")
    n = rows * cols
    n_pairs = (n + 1) // 2
    u = rng.uniform_block(2 * n_pairs).reshape(n_pairs, 2)
    r = np.sqrt(-2.0 * np.log(1.0 - u[:, 0]))
    theta = 2.0 * math.pi * u[:, 1]
    z = np.empty((n_pairs, 2))
    z[:, 0] = r * np.cos(theta)
    z[:, 1] = r * np.sin(theta)
    return np.ascontiguousarray((z.reshape(-1)[:n] * stddev).reshape(rows, cols))
