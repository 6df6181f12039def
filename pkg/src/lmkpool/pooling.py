"""Sequence pooling strategies: one embedding per encoded text.

Five strategies are supported:

* ``cls`` - the hidden vector at position 0;
* ``mean`` - mean over all unmasked rows (specials included);
* ``mean_at_k`` - mean over every k-th content token (CLS/SEP excluded
  from the ordinal count; the stride phase defaults to 0);
* ``marker_mean`` - mean over marker-token rows: landmark pooling with the
  SEP marker, multi-CLS pooling with the CLS marker;
* ``latent`` - token queries cross-attend over a small set of learned
  latent vectors, a residual FFN refines the result, and the unmasked rows
  are mean-pooled and projected back to model width.

The marker index set is always recomputed from ids and mask (marker id
present *and* unmasked), so markers lost to padding or truncation never
contribute.
"""

from dataclasses import dataclass

import numpy as np

from .encoder import HiddenStates, gelu, gelu_backward, layer_norm, layer_norm_backward
from .tokenizer import CLS, PAD, SEP, TokenSequence


@dataclass(frozen=True)
class PoolingStrategy:
    """Which pooling to apply; ``k``/``phase`` for mean_at_k, ``marker`` for marker_mean."""

    kind: str
    k: int = 1
    marker: str = "sep"
    phase: int = 0

    def __post_init__(self):
        if self.kind not in ("cls", "mean", "mean_at_k", "marker_mean", "latent"):
            raise ValueError(f"unknown pooling kind {self.kind!r}")
        if self.k < 1:
            raise ValueError("k must be >= 1")
        if self.marker not in ("sep", "cls"):
            raise ValueError("marker must be 'sep' or 'cls'")
        if self.phase < 0:
            raise ValueError("phase must be >= 0")

    @property
    def marker_id(self) -> int:
        return SEP if self.marker == "sep" else CLS

    @property
    def tag(self) -> str:
        if self.kind == "marker_mean":
            return "lmk" if self.marker == "sep" else "multicls"
        if self.kind == "mean_at_k":
            return f"mean_at_{self.k}"
        return self.kind

    @staticmethod
    def parse(name: str, k: int = 1, phase: int = 0) -> "PoolingStrategy":
        """Accepts cls, mean, mean_at_k, lmk, multicls, marker_mean, latent."""
        name = name.lower()
        if name == "lmk":
            return PoolingStrategy("marker_mean", marker="sep")
        if name == "multicls":
            return PoolingStrategy("marker_mean", marker="cls")
        if name == "mean_at_k":
            return PoolingStrategy("mean_at_k", k=k, phase=phase)
        return PoolingStrategy(name)


@dataclass
class Embedding:
    """A pooled sequence vector tagged with the strategy that produced it."""

    vector: np.ndarray
    strategy: str
    normalized: bool = False


def l2_normalize(v: np.ndarray) -> np.ndarray:
    n = np.linalg.norm(v)
    if n == 0:
        raise ValueError("cannot normalize a zero vector")
    return v / n


def _states(h) -> np.ndarray:
    return h.states if isinstance(h, HiddenStates) else np.asarray(h)


# ---------------------------------------------------------------------------
# single-sequence operations
# ---------------------------------------------------------------------------

def pool_cls(h) -> Embedding:
    """Row 0 of the hidden states."""
    states = _states(h)
    if states.shape[0] < 1:
        raise ValueError("empty hidden states")
    return Embedding(states[0].copy(), "cls")


def pool_mean(h, seq: TokenSequence) -> Embedding:
    """Arithmetic mean over unmasked rows (specials included)."""
    states = _states(h)
    sel = seq.mask.astype(bool)
    if not sel.any():
        raise ValueError("all-pad sequence")
    return Embedding(states[sel].mean(axis=0), "mean")


def pool_marker_mean(h, seq: TokenSequence, marker: int = SEP) -> Embedding:
    """Mean over rows whose id equals the marker and whose mask is 1."""
    states = _states(h)
    sel = (seq.ids == marker) & seq.mask.astype(bool)
    if not sel.any():
        raise ValueError("no landmark tokens")
    tag = "lmk" if marker == SEP else "multicls"
    return Embedding(states[sel].mean(axis=0), tag)


def content_positions(seq: TokenSequence) -> np.ndarray:
    """Unmasked positions that are not CLS/SEP/PAD (markers excluded)."""
    ids = seq.ids
    sel = seq.mask.astype(bool) & (ids != CLS) & (ids != SEP) & (ids != PAD)
    return np.flatnonzero(sel)


def pool_mean_at_k(h, seq: TokenSequence, k: int, phase: int = 0) -> Embedding:
    """Mean over content tokens whose content ordinal is phase (mod k)."""
    if k < 1:
        raise ValueError("k must be >= 1")
    states = _states(h)
    content = content_positions(seq)
    picked = content[phase::k]
    if picked.size == 0:
        raise ValueError("no selected rows for mean_at_k")
    return Embedding(states[picked].mean(axis=0), f"mean_at_{k}")


def pool(h, seq: TokenSequence, strategy: PoolingStrategy, latent_params=None, latent_cfg=None) -> Embedding:
    """Dispatch a single-sequence pooling by strategy."""
    if strategy.kind == "cls":
        return pool_cls(h)
    if strategy.kind == "mean":
        return pool_mean(h, seq)
    if strategy.kind == "marker_mean":
        return pool_marker_mean(h, seq, strategy.marker_id)
    if strategy.kind == "mean_at_k":
        return pool_mean_at_k(h, seq, strategy.k, strategy.phase)
    if strategy.kind == "latent":
        return pool_latent_attention(h, seq, latent_params, latent_cfg)
    raise ValueError(strategy.kind)


# ---------------------------------------------------------------------------
# batched weight-based pooling (cls / mean / marker / mean_at_k)
# ---------------------------------------------------------------------------

def pooling_weights(strategy: PoolingStrategy, ids: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Per-row convex weights w with pooled = sum_s w[s] * H[s].

    Every mean-family strategy is a fixed convex combination of rows given
    the token sequence, which makes the training backward pass uniform:
    dH = w * dpooled.
    """
    mask = mask.astype(bool)
    B, S = ids.shape
    w = np.zeros((B, S))
    if strategy.kind == "cls":
        if not mask[:, 0].all():
            raise ValueError("CLS position is masked")
        w[:, 0] = 1.0
        return w
    if strategy.kind == "mean":
        sel = mask
    elif strategy.kind == "marker_mean":
        sel = (ids == strategy.marker_id) & mask
    elif strategy.kind == "mean_at_k":
        content = mask & (ids != CLS) & (ids != SEP) & (ids != PAD)
        ordinal = np.cumsum(content, axis=1) - 1
        sel = content & (ordinal >= strategy.phase) & (
            (ordinal - strategy.phase) % strategy.k == 0
        )
    else:
        raise ValueError(f"no row weights for strategy {strategy.kind!r}")
    counts = sel.sum(axis=1)
    if (counts == 0).any():
        raise ValueError(f"empty selection for {strategy.kind} pooling in batch")
    w[sel] = 1.0
    w /= counts[:, None]
    return w


# ---------------------------------------------------------------------------
# latent attention pooling
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class LatentConfig:
    """Shapes of the latent-attention head; 64 latents by default."""

    d_model: int
    n_latents: int = 64
    d_latent: int | None = None
    d_head: int | None = None
    ffn_dim: int | None = None

    def __post_init__(self):
        if self.n_latents < 1:
            raise ValueError("n_latents must be >= 1")
        object.__setattr__(self, "d_latent", self.d_latent or self.d_model)
        object.__setattr__(self, "d_head", self.d_head or self.d_model)
        object.__setattr__(self, "ffn_dim", self.ffn_dim or 4 * self.d_head)


def latent_param_names() -> list[str]:
    return [
        "lat.latents", "lat.wq", "lat.wk", "lat.wv",
        "lat.ln1.g", "lat.ln1.b",
        "lat.ffn.w1", "lat.ffn.b1", "lat.ffn.w2", "lat.ffn.b2",
        "lat.ln2.g", "lat.ln2.b",
        "lat.wout",
    ]


def latent_param_shapes(cfg: LatentConfig) -> dict[str, tuple]:
    l, dl, dh, d, f = cfg.n_latents, cfg.d_latent, cfg.d_head, cfg.d_model, cfg.ffn_dim
    return {
        "lat.latents": (l, dl),
        "lat.wq": (d, dh),
        "lat.wk": (l, dl, dh),
        "lat.wv": (l, dl, dh),
        "lat.ln1.g": (dh,), "lat.ln1.b": (dh,),
        "lat.ffn.w1": (dh, f), "lat.ffn.b1": (f,),
        "lat.ffn.w2": (f, dh), "lat.ffn.b2": (dh,),
        "lat.ln2.g": (dh,), "lat.ln2.b": (dh,),
        "lat.wout": (dh, d),
    }


def init_latent_params(cfg: LatentConfig, rng: np.random.Generator, scale: float = 0.02):
    params = {}
    for name, shape in latent_param_shapes(cfg).items():
        leaf = name.rsplit(".", 1)[-1]
        if leaf == "g":
            params[name] = np.ones(shape)
        elif leaf in ("b", "b1", "b2"):
            params[name] = np.zeros(shape)
        else:
            params[name] = rng.normal(0.0, scale, size=shape)
    return params


def latent_attention_batch(params: dict, cfg: LatentConfig, H: np.ndarray, mask: np.ndarray,
                           want_cache: bool = False):
    """Latent-attention pooling over a batch; returns (pooled (B, d_model), cache)."""
    B, S, d = H.shape
    if d != cfg.d_model:
        raise ValueError(f"hidden width {d} != configured d_model {cfg.d_model}")
    mask = mask.astype(bool)
    if not mask.any(axis=1).all():
        raise ValueError("a sequence has no unmasked rows")
    scale = 1.0 / np.sqrt(cfg.d_head)
    q = H @ params["lat.wq"]  # (B, S, dh)
    qn, ln1c = layer_norm(q, params["lat.ln1.g"], params["lat.ln1.b"])
    k = np.einsum("ld,ldh->lh", params["lat.latents"], params["lat.wk"])
    v = np.einsum("ld,ldh->lh", params["lat.latents"], params["lat.wv"])
    scores = (qn @ k.T) * scale  # (B, S, l)
    m = scores.max(axis=-1, keepdims=True)
    e = np.exp(scores - m)
    p = e / e.sum(axis=-1, keepdims=True)
    att = p @ v
    Y = att + q
    yn, ln2c = layer_norm(Y, params["lat.ln2.g"], params["lat.ln2.b"])
    a1 = yn @ params["lat.ffn.w1"] + params["lat.ffn.b1"]
    gact, tanh_c = gelu(a1)
    F = gact @ params["lat.ffn.w2"] + params["lat.ffn.b2"]
    Z = F + Y
    w = mask / mask.sum(axis=1, keepdims=True)
    pooled_h = np.einsum("bs,bsh->bh", w, Z)
    pooled = pooled_h @ params["lat.wout"]
    cache = None
    if want_cache:
        cache = dict(H=H, q=q, qn=qn, ln1=ln1c, k=k, v=v, p=p, Y=Y, yn=yn, ln2=ln2c,
                     a1=a1, tanh=tanh_c, gact=gact, w=w, pooled_h=pooled_h, scale=scale)
    return pooled, cache


def latent_attention_backward(params: dict, cfg: LatentConfig, cache: dict, dpooled: np.ndarray):
    """Backward of latent_attention_batch; returns (grads, dH)."""
    c = cache
    B, S, dh = c["q"].shape
    grads = {name: np.zeros_like(params[name]) for name in latent_param_names()}
    grads["lat.wout"] += c["pooled_h"].T @ dpooled
    dpooled_h = dpooled @ params["lat.wout"].T
    dZ = c["w"][:, :, None] * dpooled_h[:, None, :]
    # Z = F + Y
    dF = dZ
    dgact = dF @ params["lat.ffn.w2"].T
    grads["lat.ffn.w2"] += c["gact"].reshape(-1, cfg.ffn_dim).T @ dF.reshape(-1, dh)
    grads["lat.ffn.b2"] += dF.reshape(-1, dh).sum(axis=0)
    da1 = gelu_backward(dgact, c["a1"], c["tanh"])
    grads["lat.ffn.w1"] += c["yn"].reshape(-1, dh).T @ da1.reshape(-1, cfg.ffn_dim)
    grads["lat.ffn.b1"] += da1.reshape(-1, cfg.ffn_dim).sum(axis=0)
    dyn = da1 @ params["lat.ffn.w1"].T
    dY_ln, dg2, db2 = layer_norm_backward(dyn, c["ln2"], params["lat.ln2.g"])
    grads["lat.ln2.g"] += dg2
    grads["lat.ln2.b"] += db2
    dY = dZ + dY_ln
    # Y = att + q
    datt = dY
    dq = dY.copy()
    dp = datt @ c["v"].T  # (B, S, l)
    grads_v = np.einsum("bsl,bsh->lh", c["p"], datt)
    inner = np.sum(c["p"] * dp, axis=-1, keepdims=True)
    dscores = c["p"] * (dp - inner)
    dscores *= c["scale"]
    dqn = dscores @ c["k"]
    grads_k = np.einsum("bsl,bsh->lh", dscores, c["qn"])
    dq_ln, dg1, db1 = layer_norm_backward(dqn, c["ln1"], params["lat.ln1.g"])
    grads["lat.ln1.g"] += dg1
    grads["lat.ln1.b"] += db1
    dq += dq_ln
    grads["lat.wq"] += c["H"].reshape(-1, cfg.d_model).T @ dq.reshape(-1, dh)
    dH = dq @ params["lat.wq"].T
    # k_l = L_l @ wk_l, v_l = L_l @ wv_l
    grads["lat.wk"] += np.einsum("ld,lh->ldh", params["lat.latents"], grads_k)
    grads["lat.wv"] += np.einsum("ld,lh->ldh", params["lat.latents"], grads_v)
    grads["lat.latents"] += np.einsum("lh,ldh->ld", grads_k, params["lat.wk"])
    grads["lat.latents"] += np.einsum("lh,ldh->ld", grads_v, params["lat.wv"])
    return grads, dH


def pool_latent_attention(h, seq: TokenSequence, params: dict, cfg: LatentConfig) -> Embedding:
    """Single-sequence latent-attention pooling."""
    if params is None or cfg is None:
        raise ValueError("latent pooling requires latent params and config")
    states = _states(h)
    pooled, _ = latent_attention_batch(params, cfg, states[None, :, :], seq.mask[None, :])
    return Embedding(pooled[0], "latent")
