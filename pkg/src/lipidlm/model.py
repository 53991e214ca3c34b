"""
BERT-style encoder in numpy with hand-derived gradients.

Post-layernorm blocks, exact (erf) GeLU, learned absolute positions and
segment embeddings.  Parameters live in a flat ``dict[str, ndarray]`` so the
optimizer, checkpointing and gradient checks can treat them uniformly.
"""

from __future__ import annotations

import hashlib
import json
import math
import os
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np
from scipy.special import erf

from .tokenizer import IGNORE_INDEX, EncodedInput, Vocab

HEAD_KINDS = ("mlm", "ntails", "connseq", "conntoken", "headtail", "pair", "regression")
TOKEN_HEADS = ("conntoken", "headtail")
SEQUENCE_HEADS = ("ntails", "connseq", "pair")
CHECKPOINT_FORMAT = "lipidlm-checkpoint"
CHECKPOINT_VERSION = 1

_SQRT_2 = math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)
_NEG = -1e30


class ShapeMismatch(ValueError):
    pass


class NoSelectedTokens(ValueError):
    pass


class IoFailure(OSError):
    pass


class VersionMismatch(ValueError):
    pass


class ChecksumMismatch(ValueError):
    pass


@dataclass
class ModelConfig:
    n_layers: int = 12
    hidden: int = 768
    n_heads: int = 12
    ffn_dim: int = 3072
    max_len: int = 128
    vocab_size: int = 32
    dropout: float = 0.1
    layernorm_eps: float = 1e-12
    n_tail_classes: int = 5
    n_pos_classes: int = 64
    heads: tuple[str, ...] = ("mlm",)
    regression_dims: tuple[int, ...] = (512, 256, 128, 128)
    init_std: float = 0.02
    position_init: str = "normal"  # or "sinusoidal": sin/cos table rescaled to init_std
    seed: int = 0

    def __post_init__(self):
        self.heads = tuple(self.heads)
        self.regression_dims = tuple(self.regression_dims)

    def validate(self) -> None:
        if self.hidden % self.n_heads:
            raise ValueError(f"hidden {self.hidden} is not divisible by n_heads {self.n_heads}")
        unknown = set(self.heads) - set(HEAD_KINDS)
        if unknown:
            raise ValueError(f"unknown heads: {sorted(unknown)}")
        if min(self.n_layers, self.max_len, self.vocab_size) < 0 or self.hidden < 1:
            raise ValueError("sizes must be positive")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must lie in [0, 1)")
        if self.position_init not in ("normal", "sinusoidal"):
            raise ValueError(f"unknown position_init {self.position_init!r}")

    @classmethod
    def from_dict(cls, d: Mapping) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown model keys: {sorted(unknown)}")
        return cls(**d)


PRESETS = {
    "paper": dict(n_layers=12, hidden=768, n_heads=12, ffn_dim=3072, max_len=128,
                  regression_dims=(512, 256, 128, 128)),
    # wider init and a sinusoidal position start let the small model leave the
    # unigram plateau within a few hundred steps; dropout only slows it down
    "desk": dict(n_layers=2, hidden=128, n_heads=4, ffn_dim=512, max_len=128,
                 regression_dims=(128, 128, 128, 128), init_std=0.05,
                 position_init="sinusoidal", dropout=0.0),
}


def preset(name: str, **overrides) -> ModelConfig:
    if name not in PRESETS:
        raise KeyError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    return ModelConfig(**{**PRESETS[name], **overrides})


# ---------------------------------------------------------------------------
# parameters
# ---------------------------------------------------------------------------

def param_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    H, F, V = cfg.hidden, cfg.ffn_dim, cfg.vocab_size
    shapes: dict[str, tuple[int, ...]] = {
        "emb.tok": (V, H), "emb.pos": (cfg.max_len, H), "emb.seg": (2, H),
        "emb.ln.g": (H,), "emb.ln.b": (H,),
    }
    for i in range(cfg.n_layers):
        p = f"L{i}."
        for name in ("q", "k", "v", "o"):
            shapes[p + name + ".w"] = (H, H)
            shapes[p + name + ".b"] = (H,)
        shapes.update({p + "ln1.g": (H,), p + "ln1.b": (H,),
                       p + "ffn1.w": (H, F), p + "ffn1.b": (F,),
                       p + "ffn2.w": (F, H), p + "ffn2.b": (H,),
                       p + "ln2.g": (H,), p + "ln2.b": (H,)})
    shapes.update({"pool.w": (H, H), "pool.b": (H,)})
    widths = {"ntails": cfg.n_tail_classes, "connseq": cfg.n_pos_classes,
              "conntoken": 2, "headtail": 3, "pair": 2}
    for head in cfg.heads:
        if head == "mlm":
            shapes.update({"mlm.dense.w": (H, H), "mlm.dense.b": (H,),
                           "mlm.ln.g": (H,), "mlm.ln.b": (H,),
                           "mlm.out.w": (H, V), "mlm.out.b": (V,)})
        elif head == "regression":
            prev = H
            for j, width in enumerate(cfg.regression_dims):
                shapes[f"reg.{j}.w"] = (prev, width)
                shapes[f"reg.{j}.b"] = (width,)
                prev = width
            shapes["reg.out.w"] = (prev, 1)
            shapes["reg.out.b"] = (1,)
        else:
            shapes[f"{head}.w"] = (H, widths[head])
            shapes[f"{head}.b"] = (widths[head],)
    return shapes


def init_params(cfg: ModelConfig, seed: int | None = None, dtype=np.float32,
                names: Iterable[str] | None = None) -> dict[str, np.ndarray]:
    """Normal(0, init_std) weights, zero biases, unit layernorm scales."""
    cfg.validate()
    rng = np.random.default_rng(cfg.seed if seed is None else seed)
    wanted = set(names) if names is not None else None
    params = {}
    for name, shape in param_shapes(cfg).items():
        if name == "emb.pos" and cfg.position_init == "sinusoidal":
            value = sinusoid_table(*shape) * cfg.init_std
        elif name.endswith(".g"):
            value = np.ones(shape)
        elif name.endswith(".b"):
            value = np.zeros(shape)
        else:
            value = rng.normal(0.0, cfg.init_std, size=shape)
        if wanted is None or name in wanted:
            params[name] = value.astype(dtype)
    return params


def sinusoid_table(n_pos: int, dim: int) -> np.ndarray:
    """Interleaved sin/cos position table scaled to unit standard deviation."""
    pos = np.arange(n_pos)[:, None]
    freq = 10000.0 ** (-2.0 * np.arange((dim + 1) // 2)[None] / dim)
    table = np.zeros((n_pos, dim))
    table[:, 0::2] = np.sin(pos * freq)
    table[:, 1::2] = np.cos(pos * freq)[:, : dim // 2]
    return table / table.std()


def decays(name: str) -> bool:
    """Whether AdamW weight decay applies (not to biases or layernorm)."""
    return not (name.endswith(".b") or name.endswith(".g"))


# ---------------------------------------------------------------------------
# batches
# ---------------------------------------------------------------------------

@dataclass
class Batch:
    ids: np.ndarray
    attention_mask: np.ndarray
    segment_ids: np.ndarray
    labels: dict[str, np.ndarray] = field(default_factory=dict)
    clean_ids: np.ndarray | None = None  # ids before masked-token corruption, if any

    @property
    def size(self) -> int:
        return self.ids.shape[0]

    @classmethod
    def from_encoded(cls, encs: Sequence[EncodedInput], trim: bool = True) -> "Batch":
        """Stack encodings; ``trim`` drops trailing all-padding columns."""
        T = max(e.length for e in encs) if trim else encs[0].ids.shape[0]
        ids = np.stack([e.ids[:T] for e in encs])
        mask = np.stack([e.attention_mask[:T] for e in encs])
        segs = np.stack([e.segment_ids[:T] for e in encs])
        labels = {}
        for key in encs[0].labels:
            vals = [e.labels[key] for e in encs]
            if np.ndim(vals[0]) == 0:
                labels[key] = np.asarray(vals)
            else:
                labels[key] = np.stack([v[:T] for v in vals])
        return cls(ids, mask, segs, labels)


# ---------------------------------------------------------------------------
# primitives
# ---------------------------------------------------------------------------

def _gelu(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Exact GeLU plus the normal CDF it used, which the backward pass reuses."""
    cdf = erf(x * x.dtype.type(1.0 / _SQRT_2))
    cdf += 1.0
    cdf *= 0.5
    return x * cdf, cdf


def gelu(x: np.ndarray) -> np.ndarray:
    return _gelu(x)[0]


def gelu_grad(x: np.ndarray, cdf: np.ndarray | None = None) -> np.ndarray:
    if cdf is None:
        cdf = _gelu(x)[1]
    pdf = np.exp(x * x * x.dtype.type(-0.5))
    pdf *= x.dtype.type(_INV_SQRT_2PI)
    return cdf + x * pdf


def _layernorm(x, g, b, eps):
    mu = x.mean(-1, keepdims=True)
    xc = x - mu
    rstd = 1.0 / np.sqrt((xc * xc).mean(-1, keepdims=True) + eps)
    xhat = xc * rstd
    return xhat * g + b, (xhat, rstd, g)


def _layernorm_bwd(dy, cache):
    xhat, rstd, g = cache
    axes = tuple(range(dy.ndim - 1))
    dg = (dy * xhat).sum(axes)
    db = dy.sum(axes)
    dxhat = dy * g
    dx = rstd * (dxhat - dxhat.mean(-1, keepdims=True)
                 - xhat * (dxhat * xhat).mean(-1, keepdims=True))
    return dx, dg, db


def _linear_bwd(dy, x, w):
    dw = x.reshape(-1, x.shape[-1]).T @ dy.reshape(-1, dy.shape[-1])
    db = dy.reshape(-1, dy.shape[-1]).sum(0)
    return dy @ w.T, dw, db


def _dropout(x, rate, rng):
    if rate <= 0.0 or rng is None:
        return x, None
    draw = rng.random(x.shape, dtype=np.float32 if x.dtype == np.float32 else np.float64)
    keep = (draw >= rate).astype(x.dtype)
    keep *= x.dtype.type(1.0 / (1.0 - rate))
    return x * keep, keep


def _scatter_rows(index: np.ndarray, rows: np.ndarray, n: int) -> np.ndarray:
    """Sum ``rows`` into ``n`` buckets by ``index`` (a one-hot matmul beats ``np.add.at``)."""
    onehot = np.zeros((index.size, n), dtype=rows.dtype)
    onehot[np.arange(index.size), index] = 1.0
    return onehot.T @ rows


def _softmax(s):
    s = s - s.max(-1, keepdims=True)
    e = np.exp(s)
    return e / e.sum(-1, keepdims=True)


# ---------------------------------------------------------------------------
# forward / backward
# ---------------------------------------------------------------------------

def active_heads(cfg: ModelConfig, params: Mapping[str, np.ndarray],
                 heads: Iterable[str] | None = None) -> tuple[str, ...]:
    chosen = cfg.heads if heads is None else tuple(heads)
    out = []
    for h in chosen:
        probe = "mlm.out.w" if h == "mlm" else ("reg.out.w" if h == "regression" else f"{h}.w")
        if probe in params:
            out.append(h)
    return tuple(out)


def forward(params: Mapping[str, np.ndarray], cfg: ModelConfig, batch: Batch | Sequence[EncodedInput],
            train: bool = False, rng: np.random.Generator | None = None,
            heads: Iterable[str] | None = None) -> tuple[dict[str, np.ndarray], dict]:
    """Run the encoder and the active heads.

    Returns ``(outputs, cache)``; ``outputs`` holds ``hidden`` (B, T, H),
    ``pooled`` (B, H) and one logit array per head.  Dropout applies only
    when ``train`` is set and an ``rng`` is supplied.
    """
    if not isinstance(batch, Batch):
        batch = Batch.from_encoded(batch)
    ids, mask, segs = batch.ids, batch.attention_mask, batch.segment_ids
    if ids.ndim != 2 or mask.shape != ids.shape or segs.shape != ids.shape:
        raise ShapeMismatch("ids, attention_mask and segment_ids must share a (B, T) shape")
    B, T = ids.shape
    if T > cfg.max_len:
        raise ShapeMismatch(f"sequence length {T} exceeds max_len {cfg.max_len}")
    if ids.size and (ids.max() >= cfg.vocab_size or ids.min() < 0):
        raise ShapeMismatch("token id outside the vocabulary")
    H, nh = cfg.hidden, cfg.n_heads
    d = H // nh
    eps = cfg.layernorm_eps
    rate = cfg.dropout if train else 0.0
    rng = rng if train else None
    P = params
    dtype = P["emb.tok"].dtype
    cache: dict = {"shape": (B, T), "ids": ids, "segs": segs, "layers": []}

    x = P["emb.tok"][ids] + P["emb.pos"][:T] + P["emb.seg"][segs]
    h, cache["emb_ln"] = _layernorm(x, P["emb.ln.g"], P["emb.ln.b"], eps)
    h, cache["emb_drop"] = _dropout(h, rate, rng)
    keymask = mask.astype(bool)[:, None, None, :]
    scale = dtype.type(1.0 / math.sqrt(d))

    for i in range(cfg.n_layers):
        p = f"L{i}."
        lc: dict = {"x": h}

        def heads_of(t):
            return t.reshape(B, T, nh, d).transpose(0, 2, 1, 3)

        q = heads_of(h @ P[p + "q.w"] + P[p + "q.b"])
        k = heads_of(h @ P[p + "k.w"] + P[p + "k.b"])
        v = heads_of(h @ P[p + "v.w"] + P[p + "v.b"])
        scores = np.where(keymask, (q @ k.transpose(0, 1, 3, 2)) * scale, dtype.type(_NEG))
        probs = _softmax(scores)
        probs_d, lc["attn_drop"] = _dropout(probs, rate, rng)
        ctx = (probs_d @ v).transpose(0, 2, 1, 3).reshape(B, T, H)
        attn = ctx @ P[p + "o.w"] + P[p + "o.b"]
        attn, lc["out_drop"] = _dropout(attn, rate, rng)
        h1, lc["ln1"] = _layernorm(h + attn, P[p + "ln1.g"], P[p + "ln1.b"], eps)
        pre = h1 @ P[p + "ffn1.w"] + P[p + "ffn1.b"]
        act, cdf = _gelu(pre)
        ff = act @ P[p + "ffn2.w"] + P[p + "ffn2.b"]
        ff, lc["ffn_drop"] = _dropout(ff, rate, rng)
        h, lc["ln2"] = _layernorm(h1 + ff, P[p + "ln2.g"], P[p + "ln2.b"], eps)
        lc.update(q=q, k=k, v=v, probs=probs, probs_d=probs_d, ctx=ctx, h1=h1, pre=pre, act=act, cdf=cdf)
        cache["layers"].append(lc)

    outputs: dict[str, np.ndarray] = {"hidden": h}
    cls = h[:, 0]
    pooled = np.tanh(cls @ P["pool.w"] + P["pool.b"])
    outputs["pooled"] = pooled
    cache["hidden"] = h
    cache["pooled"] = pooled

    chosen = active_heads(cfg, P, heads)
    cache["heads"] = chosen
    for head in chosen:
        if head == "mlm":
            pre = h @ P["mlm.dense.w"] + P["mlm.dense.b"]
            act, cdf = _gelu(pre)
            t, ln = _layernorm(act, P["mlm.ln.g"], P["mlm.ln.b"], eps)
            outputs["mlm"] = t @ P["mlm.out.w"] + P["mlm.out.b"]
            cache["mlm"] = (pre, cdf, t, ln)
        elif head in TOKEN_HEADS:
            outputs[head] = h @ P[f"{head}.w"] + P[f"{head}.b"]
        elif head in SEQUENCE_HEADS:
            outputs[head] = pooled @ P[f"{head}.w"] + P[f"{head}.b"]
        elif head == "regression":
            z = pooled
            stack = []
            for j in range(len(cfg.regression_dims)):
                pre = z @ P[f"reg.{j}.w"] + P[f"reg.{j}.b"]
                z_in = z
                z, cdf = _gelu(pre)
                stack.append((z_in, pre, cdf))
            outputs["regression"] = (z @ P["reg.out.w"] + P["reg.out.b"])[:, 0]
            cache["regression"] = (stack, z)
    return outputs, cache


def backward(params: Mapping[str, np.ndarray], cfg: ModelConfig, cache: dict,
             dlogits: Mapping[str, np.ndarray]) -> dict[str, np.ndarray]:
    """Gradients of the loss for every parameter, given d(loss)/d(logits) per head."""
    P = params
    grads = {name: np.zeros_like(value) for name, value in P.items()}
    B, T = cache["shape"]
    H, nh = cfg.hidden, cfg.n_heads
    d = H // nh
    h = cache["hidden"]
    pooled = cache["pooled"]
    dh = np.zeros_like(h)
    dpooled = np.zeros_like(pooled)

    for head in cache["heads"]:
        dy = dlogits.get(head)
        if dy is None:
            continue
        if head == "mlm":
            pre, cdf, t, ln = cache["mlm"]
            dt, grads["mlm.out.w"], grads["mlm.out.b"] = _linear_bwd(dy, t, P["mlm.out.w"])
            dg, grads["mlm.ln.g"], grads["mlm.ln.b"] = _layernorm_bwd(dt, ln)
            dpre = dg * gelu_grad(pre, cdf)
            dhm, grads["mlm.dense.w"], grads["mlm.dense.b"] = _linear_bwd(dpre, h, P["mlm.dense.w"])
            dh += dhm
        elif head in TOKEN_HEADS:
            dht, grads[f"{head}.w"], grads[f"{head}.b"] = _linear_bwd(dy, h, P[f"{head}.w"])
            dh += dht
        elif head in SEQUENCE_HEADS:
            dp, grads[f"{head}.w"], grads[f"{head}.b"] = _linear_bwd(dy, pooled, P[f"{head}.w"])
            dpooled += dp
        elif head == "regression":
            stack, z = cache["regression"]
            dz, grads["reg.out.w"], grads["reg.out.b"] = _linear_bwd(dy[:, None], z, P["reg.out.w"])
            for j in reversed(range(len(stack))):
                zin, pre, cdf = stack[j]
                dpre = dz * gelu_grad(pre, cdf)
                dz, grads[f"reg.{j}.w"], grads[f"reg.{j}.b"] = _linear_bwd(dpre, zin, P[f"reg.{j}.w"])
            dpooled += dz

    # pooler: tanh(h[:, 0] W + b)
    dpre_pool = dpooled * (1.0 - pooled * pooled)
    dcls, grads["pool.w"], grads["pool.b"] = _linear_bwd(dpre_pool, h[:, 0], P["pool.w"])
    dh[:, 0] += dcls

    scale = h.dtype.type(1.0 / math.sqrt(d))
    for i in reversed(range(cfg.n_layers)):
        p = f"L{i}."
        lc = cache["layers"][i]
        dsum2, grads[p + "ln2.g"], grads[p + "ln2.b"] = _layernorm_bwd(dh, lc["ln2"])
        dff = dsum2 if lc["ffn_drop"] is None else dsum2 * lc["ffn_drop"]
        dact, grads[p + "ffn2.w"], grads[p + "ffn2.b"] = _linear_bwd(dff, lc["act"], P[p + "ffn2.w"])
        dpre = dact * gelu_grad(lc["pre"], lc["cdf"])
        dh1, grads[p + "ffn1.w"], grads[p + "ffn1.b"] = _linear_bwd(dpre, lc["h1"], P[p + "ffn1.w"])
        dh1 = dh1 + dsum2
        dsum1, grads[p + "ln1.g"], grads[p + "ln1.b"] = _layernorm_bwd(dh1, lc["ln1"])
        dattn = dsum1 if lc["out_drop"] is None else dsum1 * lc["out_drop"]
        dctx, grads[p + "o.w"], grads[p + "o.b"] = _linear_bwd(dattn, lc["ctx"], P[p + "o.w"])
        dctx = dctx.reshape(B, T, nh, d).transpose(0, 2, 1, 3)
        q, k, v, probs, probs_d = lc["q"], lc["k"], lc["v"], lc["probs"], lc["probs_d"]
        dprobs = dctx @ v.transpose(0, 1, 3, 2)
        dv = probs_d.transpose(0, 1, 3, 2) @ dctx
        if lc["attn_drop"] is not None:
            dprobs = dprobs * lc["attn_drop"]
        dscores = probs * (dprobs - (dprobs * probs).sum(-1, keepdims=True))
        dq = (dscores @ k) * scale
        dk = (dscores.transpose(0, 1, 3, 2) @ q) * scale
        x = lc["x"]
        dx = dsum1.copy()
        for name, dpart in (("q", dq), ("k", dk), ("v", dv)):
            dflat = dpart.transpose(0, 2, 1, 3).reshape(B, T, H)
            dxp, grads[p + name + ".w"], grads[p + name + ".b"] = _linear_bwd(dflat, x, P[p + name + ".w"])
            dx += dxp
        dh = dx

    if cache["emb_drop"] is not None:
        dh = dh * cache["emb_drop"]
    dx, grads["emb.ln.g"], grads["emb.ln.b"] = _layernorm_bwd(dh, cache["emb_ln"])
    flat = dx.reshape(-1, H)
    grads["emb.tok"] += _scatter_rows(cache["ids"].reshape(-1), flat, P["emb.tok"].shape[0])
    grads["emb.pos"][:T] += dx.sum(0)
    grads["emb.seg"] += _scatter_rows(cache["segs"].reshape(-1), flat, 2)
    return grads


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------

@dataclass
class LossResult:
    total: float
    per_task: dict[str, float]
    dlogits: dict[str, np.ndarray]


def _cross_entropy(logits: np.ndarray, labels: np.ndarray, weight: float, task: str):
    """Mean cross-entropy over non-ignored labels and its gradient."""
    K = logits.shape[-1]
    flat = logits.reshape(-1, K)
    y = labels.reshape(-1)
    sel = y != IGNORE_INDEX
    count = int(sel.sum())
    grad = np.zeros_like(flat)
    if count == 0:
        if task == "mlm":
            raise NoSelectedTokens("batch has no masked positions")
        return 0.0, grad.reshape(logits.shape)
    z = flat[sel].astype(np.float64)
    z = z - z.max(-1, keepdims=True)
    logsum = np.log(np.exp(z).sum(-1))
    ys = y[sel]
    if ys.max() >= K or ys.min() < 0:
        raise ShapeMismatch(f"{task} label outside {K} classes")
    nll = logsum - z[np.arange(count), ys]
    value = float(nll.mean())
    if weight:
        p = np.exp(z - logsum[:, None])
        p[np.arange(count), ys] -= 1.0
        grad[sel] = (p * (weight / count)).astype(flat.dtype)
    return value, grad.reshape(logits.shape)


def loss(outputs: Mapping[str, np.ndarray], labels: Mapping[str, np.ndarray],
         weights: Mapping[str, float] | None = None) -> LossResult:
    """``sum_t w_t * L_t`` over heads that have both logits and labels.

    Classification heads use cross-entropy averaged over non-ignored
    positions (MLM: over selected tokens only); regression uses MSE.
    Weights default to 1.
    """
    weights = weights or {}
    per_task: dict[str, float] = {}
    dlogits: dict[str, np.ndarray] = {}
    total = 0.0
    for head in HEAD_KINDS:
        if head not in outputs or head not in labels:
            continue
        w = float(weights.get(head, 1.0))
        logits = outputs[head]
        if head == "regression":
            pred = logits.astype(np.float64)
            target = np.asarray(labels[head], dtype=np.float64)
            if pred.shape != target.shape:
                raise ShapeMismatch("regression targets must match predictions")
            diff = pred - target
            value = float(np.mean(diff * diff))
            grad = (2.0 * w / diff.size * diff).astype(logits.dtype)
        else:
            value, grad = _cross_entropy(logits, np.asarray(labels[head]), w, head)
        per_task[head] = value
        dlogits[head] = grad
        total += w * value
    return LossResult(total, per_task, dlogits)


def value_and_grad(params, cfg: ModelConfig, batch: Batch, weights=None, train: bool = False,
                   rng: np.random.Generator | None = None, heads=None):
    """Forward, loss and backward in one call; returns ``(LossResult, grads, outputs)``."""
    outputs, cache = forward(params, cfg, batch, train=train, rng=rng, heads=heads)
    result = loss(outputs, batch.labels, weights)
    grads = backward(params, cfg, cache, result.dlogits)
    return result, grads, outputs


def embed_cls(params, cfg: ModelConfig, inputs: Sequence[EncodedInput],
              batch_size: int = 256) -> np.ndarray:
    """Final-layer hidden state at position 0 (before the pooler), one row per input."""
    rows = []
    for start in range(0, len(inputs), batch_size):
        batch = Batch.from_encoded(inputs[start:start + batch_size])
        outputs, _ = forward(params, cfg, batch, heads=())
        rows.append(outputs["hidden"][:, 0])
    if not rows:
        return np.zeros((0, cfg.hidden), dtype=params["emb.tok"].dtype)
    return np.concatenate(rows)


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

@dataclass
class ModelBundle:
    params: dict[str, np.ndarray]
    cfg: ModelConfig
    vocab: Vocab
    extra: dict = field(default_factory=dict)


def save_checkpoint(params: Mapping[str, np.ndarray], cfg: ModelConfig, vocab: Vocab,
                    path: str | os.PathLike, extra: Mapping | None = None) -> Path:
    """Directory with ``manifest.json``, ``vocab.json`` and a float32 ``params.bin``."""
    out = Path(path)
    try:
        out.mkdir(parents=True, exist_ok=True)
        index = []
        offset = 0
        blobs = []
        for name in sorted(params):
            arr = np.ascontiguousarray(params[name], dtype="<f4")
            raw = arr.tobytes()
            index.append({"name": name, "shape": list(arr.shape), "offset": offset,
                          "nbytes": len(raw), "sha256": hashlib.sha256(raw).hexdigest()})
            blobs.append(raw)
            offset += len(raw)
        (out / "params.bin").write_bytes(b"".join(blobs))
        vocab.save(out / "vocab.json")
        manifest = {"format": CHECKPOINT_FORMAT, "version": CHECKPOINT_VERSION,
                    "config": asdict(cfg), "vocab": "vocab.json", "dtype": "<f4",
                    "tensors": index, "extra": dict(extra or {})}
        (out / "manifest.json").write_text(json.dumps(manifest, indent=1) + "\n", encoding="utf-8")
    except OSError as exc:
        raise IoFailure(f"cannot write checkpoint at {out}: {exc}") from exc
    return out


def load_checkpoint(path: str | os.PathLike, max_len: int | None = None) -> ModelBundle:
    """Read a checkpoint directory; ``max_len`` asserts the sequence layout it must serve."""
    src = Path(path)
    try:
        manifest = json.loads((src / "manifest.json").read_text(encoding="utf-8"))
        blob = (src / "params.bin").read_bytes()
        vocab = Vocab.load(src / manifest.get("vocab", "vocab.json"))
    except (OSError, json.JSONDecodeError) as exc:
        raise IoFailure(f"cannot read checkpoint at {src}: {exc}") from exc
    if manifest.get("format") != CHECKPOINT_FORMAT or manifest.get("version") != CHECKPOINT_VERSION:
        raise VersionMismatch(f"unsupported checkpoint format {manifest.get('format')!r} "
                              f"version {manifest.get('version')!r}")
    cfg = ModelConfig.from_dict(manifest["config"])
    if max_len is not None and cfg.max_len != max_len:
        raise VersionMismatch(
            f"checkpoint was trained with max_len {cfg.max_len} but this task needs {max_len} "
            "(pair models use 256 positions, single-sequence models 128)")
    params = {}
    for entry in manifest["tensors"]:
        raw = blob[entry["offset"]:entry["offset"] + entry["nbytes"]]
        if len(raw) != entry["nbytes"] or hashlib.sha256(raw).hexdigest() != entry["sha256"]:
            raise ChecksumMismatch(f"tensor {entry['name']} failed its checksum")
        params[entry["name"]] = np.frombuffer(raw, dtype="<f4").reshape(entry["shape"]).astype(np.float32)
    return ModelBundle(params, cfg, vocab, manifest.get("extra", {}))


def with_heads(cfg: ModelConfig, heads: Iterable[str]) -> ModelConfig:
    return replace(cfg, heads=tuple(heads))
