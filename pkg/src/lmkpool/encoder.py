"""Small bidirectional transformer encoder with rotary position embeddings.

Pre-normalization residual blocks, full attention in every layer, no
absolute position embeddings: relative position enters only through the
rotary rotation of queries and keys, so the attention logit between
positions m and n depends on n - m alone. Forward and backward passes are
written by hand over numpy/BLAS; the softmax and rotation inner loops go
through :mod:`lmkpool.kernels`.

Parameters live in a flat ``dict[str, np.ndarray]`` of float64 tensors
(see :func:`param_names` for the canonical order, which is also the
serialization order).

Binary checkpoint format (little-endian):

* magic ``LMKENC01`` (8 bytes)
* int64: layers, d_model, n_heads, d_head, ffn_dim, vocab_size
* float64: rope_base, dropout
* the parameter tensors in :func:`param_names` order, raw row-major float64
"""

from dataclasses import dataclass

import numpy as np

from . import kernels
from .tokenizer import TokenSequence

LN_EPS = 1e-5
_GELU_C = 0.7978845608028654  # sqrt(2/pi)
_MAGIC = b"LMKENC01"


@dataclass(frozen=True)
class EncoderConfig:
    """Architecture hyperparameters; d_head = d_model / n_heads must be even."""

    layers: int
    d_model: int
    n_heads: int
    ffn_dim: int
    vocab_size: int
    rope_base: float = 10000.0
    dropout: float = 0.0

    def __post_init__(self):
        for name in ("layers", "d_model", "n_heads", "ffn_dim", "vocab_size"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.d_model % self.n_heads != 0:
            raise ValueError("d_model must be divisible by n_heads")
        if (self.d_model // self.n_heads) % 2 != 0:
            raise ValueError("d_head must be even for rotary pairs")
        if self.rope_base <= 0:
            raise ValueError("rope_base must be positive")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must be in [0, 1)")

    @property
    def d_head(self) -> int:
        return self.d_model // self.n_heads


@dataclass
class HiddenStates:
    """Per-token contextualized vectors, optionally with an attention trace."""

    states: np.ndarray  # (S, d_model)
    attention: np.ndarray | None = None  # (layers, n_heads, S, S)


# ---------------------------------------------------------------------------
# rotary position embedding
# ---------------------------------------------------------------------------

def rope_frequencies(d_head: int, base: float) -> np.ndarray:
    """Angular frequencies theta_j = base^(-2j / d_head), j = 0..d_head/2-1."""
    if d_head % 2 != 0:
        raise ValueError("d_head must be even")
    if base <= 0:
        raise ValueError("base must be positive")
    j = np.arange(d_head // 2, dtype=np.float64)
    return base ** (-2.0 * j / d_head)


def rotate(v: np.ndarray, m: int, theta: np.ndarray) -> np.ndarray:
    """Rotate coordinate pair (2j, 2j+1) of v by angle m * theta_j."""
    v = np.asarray(v, dtype=np.float64)
    if v.shape != (2 * theta.shape[0],):
        raise ValueError(f"expected vector of length {2 * theta.shape[0]}, got {v.shape}")
    ang = m * theta
    c, s = np.cos(ang), np.sin(ang)
    out = np.empty_like(v)
    out[0::2] = v[0::2] * c - v[1::2] * s
    out[1::2] = v[0::2] * s + v[1::2] * c
    return out


def rope_tables(positions: np.ndarray, theta: np.ndarray):
    """cos/sin tables of shape (S, d_head/2) for the given absolute positions."""
    ang = positions[:, None].astype(np.float64) * theta[None, :]
    return np.cos(ang), np.sin(ang)


# ---------------------------------------------------------------------------
# parameters
# ---------------------------------------------------------------------------

def param_names(cfg: EncoderConfig) -> list[str]:
    """Canonical parameter order, used by the optimizer and serialization."""
    names = ["tok_emb"]
    for i in range(cfg.layers):
        p = f"layer{i}."
        names += [p + "ln1.g", p + "ln1.b"]
        names += [p + "attn.wq", p + "attn.wk", p + "attn.wv", p + "attn.wo"]
        names += [p + "ln2.g", p + "ln2.b"]
        names += [p + "ffn.w1", p + "ffn.b1", p + "ffn.w2", p + "ffn.b2"]
    names += ["ln_f.g", "ln_f.b"]
    return names


def param_shapes(cfg: EncoderConfig) -> dict[str, tuple]:
    d, f, v = cfg.d_model, cfg.ffn_dim, cfg.vocab_size
    shapes = {"tok_emb": (v, d), "ln_f.g": (d,), "ln_f.b": (d,)}
    for i in range(cfg.layers):
        p = f"layer{i}."
        shapes[p + "ln1.g"] = (d,)
        shapes[p + "ln1.b"] = (d,)
        for w in ("wq", "wk", "wv", "wo"):
            shapes[p + "attn." + w] = (d, d)
        shapes[p + "ln2.g"] = (d,)
        shapes[p + "ln2.b"] = (d,)
        shapes[p + "ffn.w1"] = (d, f)
        shapes[p + "ffn.b1"] = (f,)
        shapes[p + "ffn.w2"] = (f, d)
        shapes[p + "ffn.b2"] = (d,)
    return shapes


def init_params(cfg: EncoderConfig, rng: np.random.Generator, scale: float = 0.02):
    """Gaussian init for weights, ones/zeros for norms and biases."""
    params: dict[str, np.ndarray] = {}
    for name, shape in param_shapes(cfg).items():
        leaf = name.rsplit(".", 1)[-1]
        if leaf in ("g",):
            params[name] = np.ones(shape)
        elif leaf in ("b", "b1", "b2"):
            params[name] = np.zeros(shape)
        else:
            params[name] = rng.normal(0.0, scale, size=shape)
    return params


def save_params(path, params: dict, cfg: EncoderConfig) -> None:
    with open(path, "wb") as f:
        f.write(_MAGIC)
        header_i = np.array(
            [cfg.layers, cfg.d_model, cfg.n_heads, cfg.d_head, cfg.ffn_dim, cfg.vocab_size],
            dtype="<i8",
        )
        header_f = np.array([cfg.rope_base, cfg.dropout], dtype="<f8")
        f.write(header_i.tobytes())
        f.write(header_f.tobytes())
        for name in param_names(cfg):
            f.write(np.ascontiguousarray(params[name], dtype="<f8").tobytes())


def load_params(path):
    """Read a checkpoint; returns (params, config)."""
    with open(path, "rb") as f:
        magic = f.read(8)
        if magic != _MAGIC:
            raise ValueError(f"bad magic {magic!r}, expected {_MAGIC!r}")
        ints = np.frombuffer(f.read(6 * 8), dtype="<i8")
        floats = np.frombuffer(f.read(2 * 8), dtype="<f8")
        layers, d_model, n_heads, d_head, ffn_dim, vocab_size = (int(x) for x in ints)
        cfg = EncoderConfig(
            layers=layers,
            d_model=d_model,
            n_heads=n_heads,
            ffn_dim=ffn_dim,
            vocab_size=vocab_size,
            rope_base=float(floats[0]),
            dropout=float(floats[1]),
        )
        if cfg.d_head != d_head:
            raise ValueError("inconsistent d_head in header")
        params = {}
        for name, shape in [(n, param_shapes(cfg)[n]) for n in param_names(cfg)]:
            n_elem = int(np.prod(shape))
            buf = f.read(n_elem * 8)
            if len(buf) != n_elem * 8:
                raise ValueError(f"truncated checkpoint at tensor {name}")
            params[name] = np.frombuffer(buf, dtype="<f8").reshape(shape).copy()
        if f.read(1):
            raise ValueError("trailing bytes after last tensor")
    return params, cfg


# ---------------------------------------------------------------------------
# layer norm and GELU with explicit backward
# ---------------------------------------------------------------------------

def layer_norm(x, g, b):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = np.mean(xc * xc, axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + LN_EPS)
    xhat = xc * inv
    return xhat * g + b, (xhat, inv)


def layer_norm_backward(dy, cache, g):
    xhat, inv = cache
    gy = dy * g
    m1 = gy.mean(axis=-1, keepdims=True)
    m2 = (gy * xhat).mean(axis=-1, keepdims=True)
    dx = inv * (gy - m1 - xhat * m2)
    dg = np.sum(dy * xhat, axis=tuple(range(dy.ndim - 1)))
    db = np.sum(dy, axis=tuple(range(dy.ndim - 1)))
    return dx, dg, db


def gelu(x):
    u = _GELU_C * (x + 0.044715 * x**3)
    t = np.tanh(u)
    return 0.5 * x * (1.0 + t), t


def gelu_backward(dy, x, t):
    du = _GELU_C * (1.0 + 3 * 0.044715 * x * x)
    return dy * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du)


# ---------------------------------------------------------------------------
# forward / backward
# ---------------------------------------------------------------------------

def _split_heads(x, n_heads, d_head):
    B, S, _ = x.shape
    return np.ascontiguousarray(x.reshape(B, S, n_heads, d_head).transpose(0, 2, 1, 3))


def _merge_heads(x):
    B, H, S, dh = x.shape
    return x.transpose(0, 2, 1, 3).reshape(B, S, H * dh)


def _bh_matmul(a, b, transpose_a=False, transpose_b=False):
    """Per-(batch, head) 2D BLAS matmuls; faster than 4D np.matmul here."""
    B, H = a.shape[0], a.shape[1]
    m = a.shape[3] if transpose_a else a.shape[2]
    n = b.shape[2] if transpose_b else b.shape[3]
    out = np.empty((B, H, m, n))
    for i in range(B):
        for j in range(H):
            lhs = a[i, j].T if transpose_a else a[i, j]
            rhs = b[i, j].T if transpose_b else b[i, j]
            np.dot(lhs, rhs, out=out[i, j])
    return out


def _proj(x, w):
    """(B, S, d) @ (d, n) as one GEMM."""
    B, S, _ = x.shape
    return (x.reshape(B * S, -1) @ w).reshape(B, S, -1)


def forward_from_embeddings(
    params: dict,
    cfg: EncoderConfig,
    x: np.ndarray,
    mask: np.ndarray,
    position_offset: int = 0,
    want_trace: bool = False,
    want_cache: bool = False,
    dropout_rng: np.random.Generator | None = None,
):
    """Run the layer stack + final norm over given input embeddings (B, S, d).

    This is the body of :func:`encode_batch` without the token-embedding
    lookup; the RetroMAE-style decoder drives it with custom inputs.
    """
    mask = np.asarray(mask, dtype=np.bool_)
    B, S, _ = x.shape
    if want_trace and B != 1:
        raise ValueError("attention trace is only supported for single-sequence batches")
    H_, dh = cfg.n_heads, cfg.d_head
    scale = 1.0 / np.sqrt(dh)
    theta = rope_frequencies(dh, cfg.rope_base)
    positions = position_offset + np.arange(S, dtype=np.int64)
    cos, sin = rope_tables(positions, theta)

    use_dropout = cfg.dropout > 0.0 and dropout_rng is not None
    keep = 1.0 - cfg.dropout

    layers_cache = []
    trace = np.empty((cfg.layers, H_, S, S)) if want_trace else None

    for li in range(cfg.layers):
        p = f"layer{li}."
        h1, ln1_cache = layer_norm(x, params[p + "ln1.g"], params[p + "ln1.b"])
        q = _split_heads(_proj(h1, params[p + "attn.wq"]), H_, dh)
        k = _split_heads(_proj(h1, params[p + "attn.wk"]), H_, dh)
        v = _split_heads(_proj(h1, params[p + "attn.wv"]), H_, dh)
        qr = kernels.rope_rotate(q, cos, sin)
        kr = kernels.rope_rotate(k, cos, sin)
        logits = _bh_matmul(qr, kr, transpose_b=True)
        logits *= scale
        probs = kernels.masked_softmax(logits, mask)
        del logits
        if want_trace:
            trace[li] = probs[0]
        ctx = _merge_heads(_bh_matmul(probs, v))
        attn_out = _proj(ctx, params[p + "attn.wo"])
        drop1 = None
        if use_dropout:
            drop1 = (dropout_rng.random(attn_out.shape) < keep) / keep
            attn_out = attn_out * drop1
        x_mid = x + attn_out
        h2, ln2_cache = layer_norm(x_mid, params[p + "ln2.g"], params[p + "ln2.b"])
        a1 = _proj(h2, params[p + "ffn.w1"]) + params[p + "ffn.b1"]
        gact, tanh_cache = gelu(a1)
        f_out = _proj(gact, params[p + "ffn.w2"]) + params[p + "ffn.b2"]
        drop2 = None
        if use_dropout:
            drop2 = (dropout_rng.random(f_out.shape) < keep) / keep
            f_out = f_out * drop2
        x = x_mid + f_out
        if want_cache:
            layers_cache.append(
                dict(
                    ln1=ln1_cache, h1=h1, qr=qr, kr=kr, v=v,
                    probs=probs, ctx=ctx, drop1=drop1,
                    ln2=ln2_cache, h2=h2, a1=a1, tanh=tanh_cache, gact=gact,
                    drop2=drop2,
                )
            )
    out, lnf_cache = layer_norm(x, params["ln_f.g"], params["ln_f.b"])

    aux = None
    if want_trace or want_cache:
        aux = {}
        if want_trace:
            aux["trace"] = trace
        if want_cache:
            aux["cache"] = dict(
                ids=ids, mask=mask, layers=layers_cache, ln_f=lnf_cache,
                cos=cos, sin=sin, scale=scale,
            )
    return out, aux


def backward_batch(params: dict, cfg: EncoderConfig, aux: dict, dH: np.ndarray):
    """Backpropagate dL/dH through the encoder; returns a gradient dict."""
    cache = aux["cache"]
    ids, mask = cache["ids"], cache["mask"]
    cos, sin, scale = cache["cos"], cache["sin"], cache["scale"]
    neg_sin = -sin
    B, S, d = dH.shape
    H_, dh = cfg.n_heads, cfg.d_head
    grads = {name: np.zeros_like(params[name]) for name in param_names(cfg)}

    dx, dg, db = layer_norm_backward(dH, cache["ln_f"], params["ln_f.g"])
    grads["ln_f.g"] += dg
    grads["ln_f.b"] += db

    for li in reversed(range(cfg.layers)):
        p = f"layer{li}."
        c = cache["layers"][li]
        # FFN block
        df = dx if c["drop2"] is None else dx * c["drop2"]
        df2d = df.reshape(-1, d)
        grads[p + "ffn.w2"] += c["gact"].reshape(-1, cfg.ffn_dim).T @ df2d
        grads[p + "ffn.b2"] += df2d.sum(axis=0)
        dgact = df @ params[p + "ffn.w2"].T
        da1 = gelu_backward(dgact, c["a1"], c["tanh"])
        da2d = da1.reshape(-1, cfg.ffn_dim)
        grads[p + "ffn.w1"] += c["h2"].reshape(-1, d).T @ da2d
        grads[p + "ffn.b1"] += da2d.sum(axis=0)
        dh2 = da1 @ params[p + "ffn.w1"].T
        dx_mid, dg2, db2 = layer_norm_backward(dh2, c["ln2"], params[p + "ln2.g"])
        grads[p + "ln2.g"] += dg2
        grads[p + "ln2.b"] += db2
        dx_mid = dx + dx_mid
        # attention block
        dattn = dx_mid if c["drop1"] is None else dx_mid * c["drop1"]
        dattn2d = dattn.reshape(-1, d)
        grads[p + "attn.wo"] += c["ctx"].reshape(-1, d).T @ dattn2d
        dctx = _split_heads(_proj(dattn, params[p + "attn.wo"].T), H_, dh)
        dprobs = _bh_matmul(dctx, c["v"], transpose_b=True)
        dv = _bh_matmul(c["probs"], dctx, transpose_a=True)
        dlogits = kernels.masked_softmax_grad(c["probs"], dprobs)
        del dprobs
        dlogits *= scale
        dqr = _bh_matmul(dlogits, c["kr"])
        dkr = _bh_matmul(dlogits, c["qr"], transpose_a=True)
        del dlogits
        dq = _merge_heads(kernels.rope_rotate(dqr, cos, neg_sin))
        dk = _merge_heads(kernels.rope_rotate(dkr, cos, neg_sin))
        dv = _merge_heads(dv)
        h1_2d = c["h1"].reshape(-1, d)
        grads[p + "attn.wq"] += h1_2d.T @ dq.reshape(-1, d)
        grads[p + "attn.wk"] += h1_2d.T @ dk.reshape(-1, d)
        grads[p + "attn.wv"] += h1_2d.T @ dv.reshape(-1, d)
        dh1 = _proj(dq, params[p + "attn.wq"].T)
        dh1 += _proj(dk, params[p + "attn.wk"].T)
        dh1 += _proj(dv, params[p + "attn.wv"].T)
        dx_in, dg1, db1 = layer_norm_backward(dh1, c["ln1"], params[p + "ln1.g"])
        grads[p + "ln1.g"] += dg1
        grads[p + "ln1.b"] += db1
        dx = dx_mid + dx_in

    np.add.at(grads["tok_emb"], ids.reshape(-1), dx.reshape(-1, d))
    return grads


def forward(
    seq: TokenSequence,
    params: dict,
    cfg: EncoderConfig,
    trace: bool = False,
    position_offset: int = 0,
) -> HiddenStates:
    """Encode a single TokenSequence into per-token hidden states."""
    ids = seq.ids[None, :]
    mask = seq.mask[None, :]
    out, aux = encode_batch(
        params, cfg, ids, mask, position_offset=position_offset, want_trace=trace
    )
    return HiddenStates(states=out[0], attention=aux["trace"] if trace else None)
