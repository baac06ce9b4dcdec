"""Small trainable masked-language-model encoder in plain numpy (float64).

The same backbone serves as teacher and student.  Every forward pass caches
the intermediates needed by the hand-written backward pass; the analytic
gradients are checked against central finite differences in the test suite.

Inputs support phrase-averaged slots: a position whose input embedding is the
arithmetic mean of a multi-token phrase's embedding rows, so teacher and
student sequences stay position-aligned.
"""

from __future__ import annotations

import hashlib
import io
import json
import logging
import math
import zipfile
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .corpus import PAD_ID, Vocabulary
from .errors import NumericalError, ParameterError

logger = logging.getLogger(__name__)

LN_EPS = 1e-12
INIT_STD = 0.02
_GELU_C = math.sqrt(2.0 / math.pi)
_GELU_A = 0.044715


@dataclass
class EncoderConfig:
    vocab_size: int
    hidden_dim: int = 64
    num_layers: int = 2
    num_heads: int = 4
    ffn_dim: int = 128
    max_sequence_length: int = 64
    dropout_rate: float = 0.1

    def __post_init__(self):
        if min(self.vocab_size, self.hidden_dim, self.num_heads, self.ffn_dim) < 1:
            raise ParameterError("all encoder dimensions must be >= 1")
        if self.num_layers < 0:
            raise ParameterError("num_layers must be >= 0")
        if self.hidden_dim % self.num_heads != 0:
            raise ParameterError("hidden_dim must be divisible by num_heads")
        if not (4 <= self.max_sequence_length <= 300):
            raise ParameterError("max_sequence_length must be in [4, 300]")
        if not (0.0 <= self.dropout_rate < 1.0):
            raise ParameterError("dropout_rate must be in [0, 1)")

    @property
    def head_dim(self) -> int:
        return self.hidden_dim // self.num_heads


Params = dict[str, np.ndarray]


def init_encoder_params(config: EncoderConfig, seed: int | np.random.Generator) -> Params:
    """Scaled-Gaussian init (std 0.02); zero biases; identity layer norms."""
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    d, f, v = config.hidden_dim, config.ffn_dim, config.vocab_size

    def w(*shape):
        return rng.normal(0.0, INIT_STD, shape)

    p: Params = {
        "tok_emb": w(v, d),
        "pos_emb": w(config.max_sequence_length, d),
        "seg_emb": w(2, d),
    }
    for l in range(config.num_layers):
        pre = f"layer{l}."
        for name in ("wq", "wk", "wv", "wo"):
            p[pre + name] = w(d, d)
            p[pre + "b" + name[1]] = np.zeros(d)
        p[pre + "ln1_g"] = np.ones(d)
        p[pre + "ln1_b"] = np.zeros(d)
        p[pre + "ffn_w1"] = w(d, f)
        p[pre + "ffn_b1"] = np.zeros(f)
        p[pre + "ffn_w2"] = w(f, d)
        p[pre + "ffn_b2"] = np.zeros(d)
        p[pre + "ln2_g"] = np.ones(d)
        p[pre + "ln2_b"] = np.zeros(d)
    p["mlm_w"] = w(d, d)
    p["mlm_b"] = np.zeros(d)
    p["mlm_ln_g"] = np.ones(d)
    p["mlm_ln_b"] = np.zeros(d)
    p["mlm_dec_w"] = w(d, v)
    p["mlm_dec_b"] = np.zeros(v)
    p["nsp_w"] = w(d)
    p["nsp_b"] = np.zeros(())
    return p


def zeros_like_params(params: Params) -> Params:
    return {k: np.zeros_like(v) for k, v in params.items()}


def params_hash(params: Params) -> str:
    """Stable content hash over all parameter tensors."""
    h = hashlib.sha256()
    for name in sorted(params):
        arr = np.ascontiguousarray(params[name])
        h.update(name.encode())
        h.update(str(arr.shape).encode())
        h.update(str(arr.dtype).encode())
        h.update(arr.tobytes())
    return h.hexdigest()


# ---------------------------------------------------------------------------
# Primitive layers


def _dropout(x, rate, rng):
    keep = (rng.random(x.shape) >= rate) / (1.0 - rate)
    return x * keep, keep


def _gelu(x):
    inner = _GELU_C * (x + _GELU_A * x**3)
    return 0.5 * x * (1.0 + np.tanh(inner))


def _gelu_grad(x):
    inner = _GELU_C * (x + _GELU_A * x**3)
    t = np.tanh(inner)
    return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t**2) * _GELU_C * (1.0 + 3.0 * _GELU_A * x**2)


def _ln_forward(x, g, b):
    mu = x.mean(-1, keepdims=True)
    xc = x - mu
    var = (xc**2).mean(-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + LN_EPS)
    xhat = xc * inv
    return g * xhat + b, (xhat, inv, g)


def _ln_backward(dy, cache):
    xhat, inv, g = cache
    axes = tuple(range(dy.ndim - 1))
    dg = (dy * xhat).sum(axes)
    db = dy.sum(axes)
    dxhat = dy * g
    dx = inv * (
        dxhat
        - dxhat.mean(-1, keepdims=True)
        - xhat * (dxhat * xhat).mean(-1, keepdims=True)
    )
    return dx, dg, db


def _softmax_last(x):
    m = np.max(x, axis=-1, keepdims=True)
    with np.errstate(invalid="ignore"):  # non-finite inputs surface as NaN output
        e = np.exp(x - m)
        return e / e.sum(-1, keepdims=True)


# ---------------------------------------------------------------------------
# Embedding


@dataclass
class EmbeddedSequence:
    """Input embeddings for one sequence, before any encoder layer."""

    matrix: np.ndarray  # (T, d)
    attention_mask: np.ndarray  # (T,) 1.0 real / 0.0 pad
    segment_ids: np.ndarray  # (T,)
    phrase_slots: list[tuple[int, tuple[int, ...]]] = field(default_factory=list)


@dataclass
class HiddenStates:
    """Final-layer contextual representations for one sequence."""

    matrix: np.ndarray  # (T, d)


def embed_batch(params: Params, config: EncoderConfig, token_ids, segment_ids, phrase_slots):
    """Batched input embeddings: token (or phrase mean) + position + segment.

    ``phrase_slots[b]`` lists ``(position, phrase_token_ids)`` overrides for
    sequence ``b``.  Returns the embedding tensor and the cache needed to
    scatter gradients back into the embedding tables.
    """
    token_ids = np.asarray(token_ids, dtype=np.int64)
    segment_ids = np.asarray(segment_ids, dtype=np.int64)
    B, T = token_ids.shape
    if T > config.max_sequence_length:
        raise ParameterError(
            f"sequence length {T} exceeds max_sequence_length {config.max_sequence_length}"
        )
    if token_ids.min() < 0 or token_ids.max() >= config.vocab_size:
        raise IndexError("token id out of range")
    emb = params["tok_emb"][token_ids] + params["pos_emb"][:T] + params["seg_emb"][segment_ids]
    slot_mask = np.zeros((B, T), dtype=bool)
    for b, slots in enumerate(phrase_slots):
        for pos, ids in slots:
            if not (0 <= pos < T):
                raise IndexError(f"phrase slot position {pos} out of range")
            ids = np.asarray(ids, dtype=np.int64)
            if ids.size == 0:
                raise ParameterError("phrase slot with no tokens")
            if ids.min() < 0 or ids.max() >= config.vocab_size:
                raise IndexError("phrase token id out of range")
            emb[b, pos] = (
                params["tok_emb"][ids].mean(0)
                + params["pos_emb"][pos]
                + params["seg_emb"][segment_ids[b, pos]]
            )
            slot_mask[b, pos] = True
    cache = (token_ids, segment_ids, phrase_slots, slot_mask, T)
    return emb, cache


def embed_backward(d_emb, cache, params: Params) -> Params:
    token_ids, segment_ids, phrase_slots, slot_mask, T = cache
    grads = {
        "tok_emb": np.zeros_like(params["tok_emb"]),
        "pos_emb": np.zeros_like(params["pos_emb"]),
        "seg_emb": np.zeros_like(params["seg_emb"]),
    }
    d_tok_scatter = np.where(slot_mask[..., None], 0.0, d_emb)
    np.add.at(grads["tok_emb"], token_ids, d_tok_scatter)
    for b, slots in enumerate(phrase_slots):
        for pos, ids in slots:
            share = d_emb[b, pos] / len(ids)
            for i in ids:
                grads["tok_emb"][i] += share
    grads["pos_emb"][:T] = d_emb.sum(0)
    np.add.at(grads["seg_emb"], segment_ids, d_emb)
    return grads


def embed_sequence(
    token_ids: list[int],
    segment_ids: list[int],
    phrase_slots: list[tuple[int, tuple[int, ...]]],
    params: Params,
    config: EncoderConfig,
) -> EmbeddedSequence:
    """Embed one sequence; phrase-slot positions carry the mean of their
    phrase tokens' embedding rows plus that position's position/segment terms.
    """
    ids = np.asarray(token_ids, dtype=np.int64)
    emb, _ = embed_batch(params, config, ids[None], np.asarray(segment_ids)[None], [phrase_slots])
    return EmbeddedSequence(
        matrix=emb[0],
        attention_mask=(ids != PAD_ID).astype(np.float64),
        segment_ids=np.asarray(segment_ids, dtype=np.int64),
        phrase_slots=list(phrase_slots),
    )


# ---------------------------------------------------------------------------
# Transformer encoder forward/backward


def _split_heads(x, H, dh):
    B, T, _ = x.shape
    return x.reshape(B, T, H, dh).transpose(0, 2, 1, 3)


def _merge_heads(x):
    B, H, T, dh = x.shape
    return x.transpose(0, 2, 1, 3).reshape(B, T, H * dh)


def _layer_forward(params, config, l, x, mask, drop_rate, rng):
    pre = f"layer{l}."
    H, dh = config.num_heads, config.head_dim
    q = x @ params[pre + "wq"] + params[pre + "bq"]
    k = x @ params[pre + "wk"] + params[pre + "bk"]
    v = x @ params[pre + "wv"] + params[pre + "bv"]
    qh, kh, vh = (_split_heads(t, H, dh) for t in (q, k, v))
    scores = qh @ kh.swapaxes(-1, -2) / math.sqrt(dh)
    scores = np.where(mask[:, None, None, :] > 0, scores, -np.inf)
    attn_p = _softmax_last(scores)
    if drop_rate > 0:
        attn_pd, attn_keep = _dropout(attn_p, drop_rate, rng)
    else:
        attn_pd, attn_keep = attn_p, None
    ctx = _merge_heads(attn_pd @ vh)
    attn_out = ctx @ params[pre + "wo"] + params[pre + "bo"]
    if drop_rate > 0:
        attn_out, attn_out_keep = _dropout(attn_out, drop_rate, rng)
    else:
        attn_out_keep = None
    x1, ln1_cache = _ln_forward(x + attn_out, params[pre + "ln1_g"], params[pre + "ln1_b"])
    u = x1 @ params[pre + "ffn_w1"] + params[pre + "ffn_b1"]
    a = _gelu(u)
    f2 = a @ params[pre + "ffn_w2"] + params[pre + "ffn_b2"]
    if drop_rate > 0:
        f2, ffn_keep = _dropout(f2, drop_rate, rng)
    else:
        ffn_keep = None
    x2, ln2_cache = _ln_forward(x1 + f2, params[pre + "ln2_g"], params[pre + "ln2_b"])
    cache = {
        "x": x, "qh": qh, "kh": kh, "vh": vh, "attn_p": attn_p, "attn_pd": attn_pd,
        "attn_keep": attn_keep, "ctx": ctx, "attn_out_keep": attn_out_keep,
        "ln1": ln1_cache, "x1": x1, "u": u, "a": a, "ffn_keep": ffn_keep, "ln2": ln2_cache,
    }
    return x2, cache


def _layer_backward(d_out, cache, params, config, l):
    pre = f"layer{l}."
    H, dh = config.num_heads, config.head_dim
    g = {}
    d_r2, g[pre + "ln2_g"], g[pre + "ln2_b"] = _ln_backward(d_out, cache["ln2"])
    d_x1 = d_r2.copy()
    d_f2 = d_r2 if cache["ffn_keep"] is None else d_r2 * cache["ffn_keep"]
    a, u, x1 = cache["a"], cache["u"], cache["x1"]
    fdim = a.shape[-1]
    d = x1.shape[-1]
    g[pre + "ffn_w2"] = a.reshape(-1, fdim).T @ d_f2.reshape(-1, d)
    g[pre + "ffn_b2"] = d_f2.sum((0, 1))
    d_a = d_f2 @ params[pre + "ffn_w2"].T
    d_u = d_a * _gelu_grad(u)
    g[pre + "ffn_w1"] = x1.reshape(-1, d).T @ d_u.reshape(-1, fdim)
    g[pre + "ffn_b1"] = d_u.sum((0, 1))
    d_x1 += d_u @ params[pre + "ffn_w1"].T

    d_r1, g[pre + "ln1_g"], g[pre + "ln1_b"] = _ln_backward(d_x1, cache["ln1"])
    d_x = d_r1.copy()
    d_attn_out = d_r1 if cache["attn_out_keep"] is None else d_r1 * cache["attn_out_keep"]
    ctx = cache["ctx"]
    g[pre + "wo"] = ctx.reshape(-1, d).T @ d_attn_out.reshape(-1, d)
    g[pre + "bo"] = d_attn_out.sum((0, 1))
    d_ctx = _split_heads(d_attn_out @ params[pre + "wo"].T, H, dh)
    attn_pd, attn_p = cache["attn_pd"], cache["attn_p"]
    vh, qh, kh = cache["vh"], cache["qh"], cache["kh"]
    d_attn_pd = d_ctx @ vh.swapaxes(-1, -2)
    d_vh = attn_pd.swapaxes(-1, -2) @ d_ctx
    d_attn_p = d_attn_pd if cache["attn_keep"] is None else d_attn_pd * cache["attn_keep"]
    d_scores = attn_p * (d_attn_p - (d_attn_p * attn_p).sum(-1, keepdims=True))
    d_scores = d_scores / math.sqrt(dh)
    d_qh = d_scores @ kh
    d_kh = d_scores.swapaxes(-1, -2) @ qh
    d_q, d_k, d_v = (_merge_heads(t) for t in (d_qh, d_kh, d_vh))
    x = cache["x"]
    for name, dz in (("wq", d_q), ("wk", d_k), ("wv", d_v)):
        g[pre + name] = x.reshape(-1, d).T @ dz.reshape(-1, d)
        g[pre + "b" + name[1]] = dz.sum((0, 1))
        d_x += dz @ params[pre + name].T
    return d_x, g


def encoder_forward(params, config, emb, mask, train=False, rng=None):
    """Run the layer stack over batched input embeddings.

    ``mask`` is (B, T) with 1.0 at real positions.  In train mode dropout is
    applied (an ``rng`` is then required); in eval mode the pass is
    deterministic.
    """
    drop_rate = config.dropout_rate if train else 0.0
    if drop_rate > 0 and rng is None:
        raise ParameterError("train-mode forward needs an rng for dropout")
    x = emb
    emb_keep = None
    if drop_rate > 0:
        x, emb_keep = _dropout(x, drop_rate, rng)
    layer_caches = []
    for l in range(config.num_layers):
        x, c = _layer_forward(params, config, l, x, mask, drop_rate, rng)
        layer_caches.append(c)
    cache = {"layers": layer_caches, "emb_keep": emb_keep}
    return x, cache


def encoder_backward(d_hidden, cache, params, config):
    grads: Params = {}
    d = d_hidden
    for l in reversed(range(config.num_layers)):
        d, layer_grads = _layer_backward(d, cache["layers"][l], params, config, l)
        grads.update(layer_grads)
    if cache["emb_keep"] is not None:
        d = d * cache["emb_keep"]
    return grads, d


def encode(
    embedded: EmbeddedSequence,
    params: Params,
    config: EncoderConfig,
    train: bool = False,
    rng: np.random.Generator | None = None,
) -> HiddenStates:
    """Encode one embedded sequence to its final-layer hidden states."""
    h, _ = encoder_forward(
        params, config, embedded.matrix[None], embedded.attention_mask[None], train, rng
    )
    if not np.all(np.isfinite(h)):
        raise NumericalError("non-finite value in encoder output")
    return HiddenStates(matrix=h[0])


# ---------------------------------------------------------------------------
# Heads


def mlm_head_forward(params, hsel):
    u = hsel @ params["mlm_w"] + params["mlm_b"]
    a = _gelu(u)
    t, ln_cache = _ln_forward(a, params["mlm_ln_g"], params["mlm_ln_b"])
    logits = t @ params["mlm_dec_w"] + params["mlm_dec_b"]
    return logits, (hsel, u, t, ln_cache)


def mlm_head_backward(d_logits, cache, params):
    hsel, u, t, ln_cache = cache
    g = {
        "mlm_dec_w": t.T @ d_logits,
        "mlm_dec_b": d_logits.sum(0),
    }
    d_t = d_logits @ params["mlm_dec_w"].T
    d_a, g["mlm_ln_g"], g["mlm_ln_b"] = _ln_backward(d_t, ln_cache)
    d_u = d_a * _gelu_grad(u)
    g["mlm_w"] = hsel.T @ d_u
    g["mlm_b"] = d_u.sum(0)
    d_hsel = d_u @ params["mlm_w"].T
    return g, d_hsel


def mlm_logits(hidden: HiddenStates, positions: list[int], params: Params) -> np.ndarray:
    """Vocabulary logits at the given positions, one row per position."""
    matrix = getattr(hidden, "matrix", hidden)
    if len(positions) == 0:
        return np.zeros((0, params["mlm_dec_b"].shape[0]))
    hsel = matrix[np.asarray(positions, dtype=np.int64)]
    logits, _ = mlm_head_forward(params, hsel)
    return logits


def nsp_logit(hidden: HiddenStates, params: Params) -> float:
    """Next-sentence logit from the [CLS] (index 0) representation only."""
    matrix = getattr(hidden, "matrix", hidden)
    return float(matrix[0] @ params["nsp_w"] + params["nsp_b"])


# ---------------------------------------------------------------------------
# Similarity


def cosine_similarity(u, v) -> float:
    """Cosine similarity; a zero vector yields 0.0 (flagged in the log)."""
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    nu = np.linalg.norm(u)
    nv = np.linalg.norm(v)
    if nu == 0.0 or nv == 0.0:
        logger.debug("cosine_similarity received a zero vector; returning 0.0")
        return 0.0
    return float(u @ v / (nu * nv))


def cosine_grad_u(u, v):
    """d cos(u, v) / d u; zero when either vector is zero."""
    nu = np.linalg.norm(u)
    nv = np.linalg.norm(v)
    if nu == 0.0 or nv == 0.0:
        return np.zeros_like(u)
    c = (u @ v) / (nu * nv)
    return v / (nu * nv) - c * u / (nu * nu)


# ---------------------------------------------------------------------------
# Checkpoints


@dataclass
class ModelBundle:
    """Encoder config + all parameter tensors + the vocabulary they index."""

    config: EncoderConfig
    params: Params
    vocab: Vocabulary


def save_checkpoint(path: str | Path, bundle: ModelBundle) -> Path:
    """Write the bundle as an npz archive with fixed zip timestamps and sorted
    entries, so identical bundles produce byte-identical files."""
    path = Path(path)
    if path.suffix != ".npz":
        path = path.with_suffix(path.suffix + ".npz")
    meta = json.dumps(
        {"config": asdict(bundle.config), "vocab": bundle.vocab.token_to_id},
        sort_keys=True,
    )
    arrays = {f"param::{k}": v for k, v in bundle.params.items()}
    arrays["__meta__"] = np.array(meta)
    with zipfile.ZipFile(path, "w", zipfile.ZIP_STORED) as zf:
        for name in sorted(arrays):
            buf = io.BytesIO()
            np.lib.format.write_array(buf, np.asanyarray(arrays[name]), allow_pickle=False)
            info = zipfile.ZipInfo(name + ".npy", date_time=(1980, 1, 1, 0, 0, 0))
            zf.writestr(info, buf.getvalue())
    return path


def load_checkpoint(path: str | Path) -> ModelBundle:
    with np.load(Path(path), allow_pickle=False) as data:
        meta = json.loads(str(data["__meta__"]))
        params = {
            k.removeprefix("param::"): data[k] for k in data.files if k.startswith("param::")
        }
    return ModelBundle(
        config=EncoderConfig(**meta["config"]),
        params=params,
        vocab=Vocabulary(meta["vocab"]),
    )
