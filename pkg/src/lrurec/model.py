"""LRURec network: embedding, stacked LRU blocks and a tied prediction head.

Item id 0 is the padding token. Its embedding row is kept at zero and its
logit is pinned to the most negative finite value, so it is never predicted.
Pad positions are forced to exact zero after the embedding and after every
block, otherwise LayerNorm/PFFN biases would leak into the next recurrence.
"""

import hashlib
import io
import json
import math
import zipfile
from dataclasses import asdict, dataclass, replace

import numpy as np

from . import lru as _lru
from .lru import LruParams, init_lru, lru_step
from .numeric import (
    LayerNormParams,
    PffnParams,
    dropout_mask,
    layer_norm_backward,
    layer_norm_forward,
    pffn_backward,
    pffn_forward,
    softmax_cross_entropy,
    truncated_normal,
)

CHECKPOINT_FORMAT = "lrurec-checkpoint/1"
IGNORE = -1


@dataclass(frozen=True)
class ModelConfig:
    item_count: int
    hidden_dim: int = 64
    num_blocks: int = 2
    dropout: float = 0.2
    use_layernorm: bool = True
    use_residual: bool = True
    use_pffn: bool = True
    ln_eps: float = 1e-5
    r_min: float = 0.8
    r_max: float = 0.99
    max_phase: float = 2 * math.pi
    dtype: str = "float64"

    def __post_init__(self):
        if self.item_count < 1:
            raise ValueError("item_count must be >= 1")
        if self.hidden_dim < 1 or self.num_blocks < 1:
            raise ValueError("hidden_dim and num_blocks must be >= 1")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError(f"dropout must lie in [0, 1), got {self.dropout}")
        if self.dtype not in ("float64", "float32"):
            raise ValueError(f"unsupported dtype {self.dtype!r}")

    @property
    def rec_dim(self):
        return 2 * self.hidden_dim


@dataclass
class BlockParams:
    lru: LruParams
    lru_norm: LayerNormParams
    pffn: PffnParams
    pffn_norm: LayerNormParams


@dataclass
class ModelParams:
    E: np.ndarray  # (item_count + 1, H), row 0 = padding
    embed_norm: LayerNormParams
    blocks: list
    b_o: np.ndarray  # (item_count + 1,)
    config: ModelConfig
    vocab_hash: str | None = None

    @property
    def item_count(self):
        return self.config.item_count

    @property
    def pad_logit(self):
        return np.finfo(self.E.dtype).min

    def named_arrays(self):
        """Every trainable array keyed by a dotted path (live references)."""
        out = {"E": self.E, "b_o": self.b_o,
               "embed_norm.alpha": self.embed_norm.alpha, "embed_norm.beta": self.embed_norm.beta}
        for i, bp in enumerate(self.blocks):
            pre = f"blocks.{i}."
            for name in ("nu_log", "theta_log", "gamma_log", "B", "C"):
                out[pre + "lru." + name] = getattr(bp.lru, name)
            for norm in ("lru_norm", "pffn_norm"):
                ln = getattr(bp, norm)
                out[pre + norm + ".alpha"] = ln.alpha
                out[pre + norm + ".beta"] = ln.beta
            for name in ("W1", "b1", "W2", "b2"):
                out[pre + "pffn." + name] = getattr(bp.pffn, name)
        return out

    def copy(self):
        return _rebuild(self, {k: v.copy() for k, v in self.named_arrays().items()})

    def digest(self):
        h = hashlib.sha256()
        for name, arr in self.named_arrays().items():
            h.update(name.encode())
            h.update(np.ascontiguousarray(arr).tobytes())
        return h.hexdigest()


def _rebuild(template, arrays):
    cfg = template.config
    eps = cfg.ln_eps

    def ln(prefix):
        return LayerNormParams(arrays[prefix + ".alpha"], arrays[prefix + ".beta"], eps)

    blocks = []
    for i in range(cfg.num_blocks):
        pre = f"blocks.{i}."
        blocks.append(BlockParams(
            lru=LruParams(*(arrays[pre + "lru." + n] for n in ("nu_log", "theta_log", "gamma_log", "B", "C"))),
            lru_norm=ln(pre + "lru_norm"),
            pffn=PffnParams(*(arrays[pre + "pffn." + n] for n in ("W1", "b1", "W2", "b2"))),
            pffn_norm=ln(pre + "pffn_norm"),
        ))
    return ModelParams(arrays["E"], ln("embed_norm"), blocks, arrays["b_o"], cfg, template.vocab_hash)


def init_model(item_count, hidden_dim=64, num_blocks=2, dropout=0.2, rng=None, **options):
    """Fresh parameters; ``options`` are further :class:`ModelConfig` fields."""
    cfg = ModelConfig(item_count, hidden_dim, num_blocks, dropout, **options)
    rng = np.random.default_rng(rng)
    dtype = np.dtype(cfg.dtype)
    H = cfg.hidden_dim
    E = truncated_normal(rng, (item_count + 1, H), dtype=dtype)
    E[0] = 0.0
    blocks = []
    for _ in range(cfg.num_blocks):
        blocks.append(BlockParams(
            lru=init_lru(H, cfg.rec_dim, cfg.r_min, cfg.r_max, cfg.max_phase, rng, dtype),
            lru_norm=LayerNormParams.identity(H, cfg.ln_eps, dtype),
            pffn=PffnParams(
                truncated_normal(rng, (4 * H, H), dtype=dtype), np.zeros(4 * H, dtype),
                truncated_normal(rng, (H, 4 * H), dtype=dtype), np.zeros(H, dtype),
            ),
            pffn_norm=LayerNormParams.identity(H, cfg.ln_eps, dtype),
        ))
    return ModelParams(E, LayerNormParams.identity(H, cfg.ln_eps, dtype), blocks,
                       np.zeros(item_count + 1, dtype), cfg)


# ----------------------------------------------------------------- forward


def _dropout_rng(params, training, rng):
    if not training or params.config.dropout <= 0.0:
        return None
    if rng is None:
        raise ValueError("training with dropout needs an rng")
    return rng


def _check_ids(params, ids):
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() > params.item_count):
        raise IndexError(f"item id outside [0, {params.item_count}]")
    return ids


def _embed(params, ids, mask, rng):
    """Embeddings of the real positions, as (M, H) rows in mask order."""
    cfg = params.config
    e = params.E[ids[mask]]
    cache = {}
    if cfg.use_layernorm:
        e, cache["ln"] = layer_norm_forward(e, params.embed_norm)
    cache["drop"] = dropout_mask(e.shape, cfg.dropout, rng, e.dtype)
    if cache["drop"] is not None:
        e = e * cache["drop"]
    return e, cache


def _scatter(rows, mask):
    out = np.zeros(mask.shape + rows.shape[1:], dtype=rows.dtype)
    out[mask] = rows
    return out


def embed(params, ids, mask, training=False, rng=None):
    """Normalised (and, in training, dropped-out) embeddings with pads zeroed."""
    ids = _check_ids(params, ids)
    mask = np.asarray(mask, bool)
    return _scatter(_embed(params, ids, mask, _dropout_rng(params, training, rng))[0], mask)


def _post_lru(y, bp, cfg, rng, cache):
    """LRUNorm followed by the PFFN sublayer for one block."""
    c = cfg
    cache["drop1"] = dropout_mask(y.shape, c.dropout, rng, y.dtype)
    if cache["drop1"] is not None:
        y = y * cache["drop1"]
    z = y
    if c.use_layernorm:
        z, cache["ln1"] = layer_norm_forward(y, bp.lru_norm)
    if not c.use_pffn:
        return z
    cache["drop2"] = dropout_mask(y.shape[:-1] + (4 * c.hidden_dim,), c.dropout, rng, y.dtype)
    f, cache["pffn"] = pffn_forward(z, bp.pffn, cache["drop2"])
    s = f + z if c.use_residual else f
    if c.use_layernorm:
        s, cache["ln2"] = layer_norm_forward(s, bp.pffn_norm)
    return s


def _block(xv, mask, bp, cfg, rng):
    # pads never enter the sublayers; the scan alone sees the padded grid
    cache = {}
    yv, cache["h"] = _lru.lru_forward_valid(xv, mask, bp.lru, cfg.use_residual)
    return _post_lru(yv, bp, cfg, rng, cache), cache


def block_forward(x, mask, bp, config, training=False, rng=None):
    """One LRU block on a left-padded (N, L, H) activation; pads come back zero."""
    if training and config.dropout > 0.0 and rng is None:
        raise ValueError("training with dropout needs an rng")
    mask = np.asarray(mask, bool)
    _lru._left_padded(mask)
    out, _ = _block(x[mask], mask, bp, config, rng if training else None)
    return _scatter(out, mask)


def _encode(params, ids, mask, rng):
    _lru._left_padded(mask)
    x, ecache = _embed(params, ids, mask, rng)
    inputs, caches = [], []
    for bp in params.blocks:
        inputs.append(x)
        x, cache = _block(x, mask, bp, params.config, rng)
        caches.append(cache)
    return x, (ecache, inputs, caches)


def encode(params, ids, mask, training=False, rng=None):
    """Final-block hidden states, shape (N, L, H), zero at pads.

    The length axis is padded on the left to a power of two when needed.
    """
    ids = _check_ids(params, ids)
    mask = np.asarray(mask, bool)
    length = ids.shape[1]
    target = _lru.next_pow2(length)
    if target != length:
        ids = np.pad(ids, ((0, 0), (target - length, 0)))
        mask = np.pad(mask, ((0, 0), (target - length, 0)))
    hv = _encode(params, ids, mask, _dropout_rng(params, training, rng))[0]
    return _scatter(hv, mask)[:, target - length:]


def score_hidden(params, h):
    """Tied-embedding scores ``E h + b_o`` with the pad item excluded."""
    logits = h @ params.E.T + params.b_o
    logits[..., 0] = params.pad_logit
    return logits


def model_forward(params, ids, mask, training=False, rng=None):
    """Logits over every position, shape (N, L, item_count + 1)."""
    return score_hidden(params, encode(params, ids, mask, training, rng))


# ------------------------------------------------------------- incremental


@dataclass
class SessionState:
    layers: list  # complex hidden state per block, shape (..., H_rec)
    hidden: np.ndarray | None = None  # last block output, shape (..., H)
    steps: int = 0


def init_session(params, batch_shape=()):
    cfg = params.config
    layers = [np.zeros(batch_shape + (cfg.rec_dim,), dtype=bp.lru.B.dtype) for bp in params.blocks]
    return SessionState(layers)


def session_logits(params, state):
    if state.hidden is None:
        raise ValueError("session has not consumed any item yet")
    return score_hidden(params, state.hidden)


def top_k(scores, k):
    """Indices and values of the ``k`` largest scores along the last axis, best first."""
    k = min(k, scores.shape[-1])
    idx = np.argpartition(-scores, k - 1, axis=-1)[..., :k]
    vals = np.take_along_axis(scores, idx, axis=-1)
    order = np.argsort(-vals, axis=-1, kind="stable")
    return np.take_along_axis(idx, order, axis=-1), np.take_along_axis(vals, order, axis=-1)


def model_step(params, state, new_item, k=10):
    """Consume one item per session and predict the next.

    Returns ``(top_ids, top_scores, new_state)``; ``state`` is left untouched.
    Work per call does not depend on how many items the session has seen.
    """
    if len(state.layers) != len(params.blocks):
        raise ValueError("session state does not match the model's block count")
    item = np.asarray(new_item)
    if np.any(item == 0):
        raise ValueError("the padding item cannot be fed to a session")
    _check_ids(params, item)
    cfg = params.config
    x = params.E[item]
    if cfg.use_layernorm:
        x = layer_norm_forward(x, params.embed_norm)[0]
    layers = []
    for bp, h in zip(params.blocks, state.layers):
        y, h = lru_step(bp.lru, h, x, cfg.use_residual)
        x = _post_lru(y, bp, cfg, None, {})
        layers.append(h)
    new_state = SessionState(layers, x, state.steps + 1)
    ids, scores = top_k(session_logits(params, new_state), k)
    return ids, scores, new_state


# ---------------------------------------------------------------- backward


def _post_lru_backward(dout, bp, cfg, cache, grads, pre):
    ds = dout
    if cfg.use_pffn:
        if cfg.use_layernorm:
            ds, grads[pre + "pffn_norm.alpha"], grads[pre + "pffn_norm.beta"] = \
                layer_norm_backward(ds, cache["ln2"], bp.pffn_norm)
        dz, pg = pffn_backward(ds, cache["pffn"], bp.pffn)
        for name, g in pg.items():
            grads[pre + "pffn." + name] = g
        if cfg.use_residual:
            dz = dz + ds
    else:
        dz = ds
    dy = dz
    if cfg.use_layernorm:
        dy, grads[pre + "lru_norm.alpha"], grads[pre + "lru_norm.beta"] = \
            layer_norm_backward(dz, cache["ln1"], bp.lru_norm)
    if cache["drop1"] is not None:
        dy = dy * cache["drop1"]
    return dy


def _head(params, hv, targets, candidates, grads):
    """Mean cross-entropy over the rows of ``hv`` plus its gradients."""
    m = len(targets)
    if candidates is None:
        width = params.E.shape[0]
        chunk = max(1, (1 << 22) // width)
        total = 0.0
        dh = np.empty_like(hv)
        for lo in range(0, m, chunk):
            h = hv[lo:lo + chunk]
            losses, dl = softmax_cross_entropy(score_hidden(params, h), targets[lo:lo + chunk])
            dl[:, 0] = 0.0
            dl /= m
            total += losses.sum()
            grads["E"] += dl.T @ h
            grads["b_o"] += dl.sum(axis=0)
            dh[lo:lo + chunk] = dl @ params.E
        return total / m, dh
    # candidates[:, 0] holds the target
    emb = params.E[candidates]  # (M, C, H)
    logits = np.einsum("mh,mch->mc", hv, emb) + params.b_o[candidates]
    losses, dl = softmax_cross_entropy(logits, np.zeros(m, dtype=np.intp))
    dl /= m
    np.add.at(grads["E"], candidates, dl[..., None] * hv[:, None, :])
    np.add.at(grads["b_o"], candidates, dl)
    return losses.sum() / m, np.einsum("mc,mch->mh", dl, emb)


def model_backward(params, ids, targets, mask, training=False, rng=None, candidates=None):
    """Mean masked next-item cross-entropy and its exact gradients.

    ``targets`` is (N, L) with :data:`IGNORE` where no loss is taken; the
    length axis must be a power of two. ``candidates`` optionally restricts
    the softmax to per-position item sets of shape (N, L, C) whose first
    column is the target. Returns ``(loss, grads)`` with ``grads`` keyed like
    :meth:`ModelParams.named_arrays`.
    """
    ids = _check_ids(params, ids)
    mask = np.asarray(mask, bool)
    targets = np.asarray(targets)
    cfg = params.config
    grads = {k: np.zeros_like(v) for k, v in params.named_arrays().items()}
    if np.any((targets != IGNORE) & ~mask):
        raise ValueError("targets set at pad positions")
    tv = targets[mask]
    sel = tv != IGNORE
    if not sel.any():
        return 0.0, grads

    hv, (ecache, inputs, caches) = _encode(params, ids, mask, _dropout_rng(params, training, rng))
    cand = None if candidates is None else np.asarray(candidates)[mask][sel]
    loss, dh = _head(params, hv[sel], tv[sel], cand, grads)
    dx = np.zeros_like(hv)
    dx[sel] = dh

    for i in reversed(range(cfg.num_blocks)):
        bp, cache, pre = params.blocks[i], caches[i], f"blocks.{i}."
        dy = _post_lru_backward(dx, bp, cfg, cache, grads, pre)
        dx, lg = _lru.lru_backward_valid(inputs[i], mask, bp.lru, dy, cache["h"], cfg.use_residual)
        for name, g in lg.items():
            grads[pre + "lru." + name] = g

    de = dx
    if ecache["drop"] is not None:
        de = de * ecache["drop"]
    if cfg.use_layernorm:
        de, grads["embed_norm.alpha"], grads["embed_norm.beta"] = \
            layer_norm_backward(de, ecache["ln"], params.embed_norm)
    np.add.at(grads["E"], ids[mask], de)
    grads["E"][0] = 0.0
    grads["b_o"][0] = 0.0
    return float(loss), grads


# -------------------------------------------------------------- checkpoint


def _zip_entry(zf, name, payload):
    info = zipfile.ZipInfo(name, date_time=(1980, 1, 1, 0, 0, 0))
    info.compress_type = zipfile.ZIP_DEFLATED
    zf.writestr(info, payload)


def save_checkpoint(params, path, extra=None):
    """Write parameters plus config to a byte-reproducible zip of .npy arrays."""
    meta = {
        "format": CHECKPOINT_FORMAT,
        "config": asdict(params.config),
        "vocab_hash": params.vocab_hash,
        "digest": params.digest(),
        "extra": extra or {},
    }
    with zipfile.ZipFile(path, "w") as zf:
        _zip_entry(zf, "meta.json", json.dumps(meta, sort_keys=True, indent=1))
        for name, arr in params.named_arrays().items():
            buf = io.BytesIO()
            np.lib.format.write_array(buf, np.ascontiguousarray(arr), allow_pickle=False)
            _zip_entry(zf, name + ".npy", buf.getvalue())
    return meta


def load_checkpoint(path):
    """Inverse of :func:`save_checkpoint`; returns ``(params, meta)``."""
    with zipfile.ZipFile(path) as zf:
        meta = json.loads(zf.read("meta.json"))
        if meta.get("format") != CHECKPOINT_FORMAT:
            raise ValueError(f"{path}: unsupported checkpoint format {meta.get('format')!r}")
        arrays = {}
        for name in zf.namelist():
            if name.endswith(".npy"):
                with zf.open(name) as fh:
                    arrays[name[:-4]] = np.lib.format.read_array(fh, allow_pickle=False)
    template = ModelParams(None, None, [], None, ModelConfig(**meta["config"]), meta["vocab_hash"])
    params = _rebuild(template, arrays)
    if params.digest() != meta["digest"]:
        raise ValueError(f"{path}: checkpoint digest mismatch")
    return params, meta


def with_vocab(params, vocab_hash):
    return replace(params, vocab_hash=vocab_hash)
