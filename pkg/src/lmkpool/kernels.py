"""Hot numeric kernels with numba and pure-numpy implementations.

The attention softmax (forward and backward) and the rotary rotation are
the only inner loops that dominate runtime on long sequences; everything
else in the encoder is a BLAS matmul. Each kernel here exists twice: a
numba ``@njit`` version and a vectorized numpy fallback. The active
backend is chosen at import time:

* numba is used when it imports successfully, unless the environment
  variable ``LMKPOOL_NUMBA`` is set to ``0``/``false``/``no``/``off``;
* otherwise the numpy fallback is used.

Both backends compute the same quantities; they may differ by float
rounding in reduction order (covered by tests at 1e-12). The selection
never changes run semantics, only speed. ``benchmarks/bench_kernels.py``
compares the two.

All kernels take C-contiguous float64 arrays; masks are boolean.
"""

import os

import numpy as np

_flag = os.environ.get("LMKPOOL_NUMBA", "1").strip().lower()
_want_numba = _flag not in ("0", "false", "no", "off")

try:
    from numba import njit, prange

    HAS_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    HAS_NUMBA = False

NUMBA_ENABLED = HAS_NUMBA and _want_numba


def backend_name() -> str:
    """Name of the active kernel backend: "numba" or "numpy"."""
    return "numba" if NUMBA_ENABLED else "numpy"


# ---------------------------------------------------------------------------
# numpy reference implementations
# ---------------------------------------------------------------------------

def masked_softmax_np(logits: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Row-wise softmax of (B, H, S, S) logits over unmasked key columns.

    ``mask`` is (B, S) boolean over key positions; masked columns get
    probability exactly 0. Rows whose key mask is entirely False come out
    all-zero (callers guarantee at least one unmasked key, so this is a
    belt-and-braces case, not a contract).
    """
    neg = ~mask[:, None, None, :]
    x = np.where(neg, -np.inf, logits)
    m = np.max(x, axis=-1, keepdims=True)
    # all-masked rows have m = -inf; shift by 0 there to avoid inf - inf
    shift = np.where(np.isfinite(m), m, 0.0)
    e = np.exp(x - shift)
    e = np.where(neg, 0.0, e)
    denom = e.sum(axis=-1, keepdims=True)
    denom = np.where(denom == 0.0, 1.0, denom)
    return e / denom


def masked_softmax_grad_np(probs: np.ndarray, dprobs: np.ndarray) -> np.ndarray:
    """Backward of masked_softmax: dlogits = p * (dp - sum_j p_j dp_j).

    Masked columns carry p = 0 and therefore get zero gradient without any
    explicit mask handling.
    """
    inner = np.sum(probs * dprobs, axis=-1, keepdims=True)
    return probs * (dprobs - inner)


def rope_rotate_np(x: np.ndarray, cos: np.ndarray, sin: np.ndarray) -> np.ndarray:
    """Rotate coordinate pairs (2j, 2j+1) of (..., S, d_head) by per-position angles.

    ``cos``/``sin`` are (S, d_head/2) tables of cos(m * theta_j). Passing
    (cos, -sin) applies the inverse rotation.
    """
    xe = x[..., 0::2]
    xo = x[..., 1::2]
    out = np.empty_like(x)
    out[..., 0::2] = xe * cos - xo * sin
    out[..., 1::2] = xe * sin + xo * cos
    return out


# ---------------------------------------------------------------------------
# numba implementations
# ---------------------------------------------------------------------------

if HAS_NUMBA:

    @njit(parallel=True, cache=True)
    def _masked_softmax_nb(logits, mask, out):
        B, H, S, _ = logits.shape
        for r in prange(B * H * S):
            b = r // (H * S)
            h = (r // S) % H
            i = r % S
            m = -np.inf
            for j in range(S):
                if mask[b, j] and logits[b, h, i, j] > m:
                    m = logits[b, h, i, j]
            if m == -np.inf:
                for j in range(S):
                    out[b, h, i, j] = 0.0
                continue
            s = 0.0
            for j in range(S):
                if mask[b, j]:
                    e = np.exp(logits[b, h, i, j] - m)
                    out[b, h, i, j] = e
                    s += e
                else:
                    out[b, h, i, j] = 0.0
            inv = 1.0 / s
            for j in range(S):
                out[b, h, i, j] *= inv

    @njit(parallel=True, cache=True)
    def _masked_softmax_grad_nb(probs, dprobs, out):
        B, H, S, _ = probs.shape
        for r in prange(B * H * S):
            b = r // (H * S)
            h = (r // S) % H
            i = r % S
            inner = 0.0
            for j in range(S):
                inner += probs[b, h, i, j] * dprobs[b, h, i, j]
            for j in range(S):
                out[b, h, i, j] = probs[b, h, i, j] * (dprobs[b, h, i, j] - inner)

    @njit(parallel=True, cache=True)
    def _rope_rotate_nb(x, cos, sin, out):
        B, H, S, dh = x.shape
        half = dh // 2
        for r in prange(B * H * S):
            b = r // (H * S)
            h = (r // S) % H
            i = r % S
            for j in range(half):
                c = cos[i, j]
                s = sin[i, j]
                xe = x[b, h, i, 2 * j]
                xo = x[b, h, i, 2 * j + 1]
                out[b, h, i, 2 * j] = xe * c - xo * s
                out[b, h, i, 2 * j + 1] = xe * s + xo * c

    def masked_softmax_nb(logits, mask):
        out = np.empty_like(logits)
        _masked_softmax_nb(logits, mask, out)
        return out

    def masked_softmax_grad_nb(probs, dprobs):
        out = np.empty_like(probs)
        _masked_softmax_grad_nb(probs, dprobs, out)
        return out

    def rope_rotate_nb(x, cos, sin):
        out = np.empty_like(x)
        _rope_rotate_nb(x, cos, sin, out)
        return out


# ---------------------------------------------------------------------------
# dispatch
# ---------------------------------------------------------------------------

if NUMBA_ENABLED:
    masked_softmax = masked_softmax_nb
    masked_softmax_grad = masked_softmax_grad_nb
    rope_rotate = rope_rotate_nb
else:
    masked_softmax = masked_softmax_np
    masked_softmax_grad = masked_softmax_grad_np
    rope_rotate = rope_rotate_np
