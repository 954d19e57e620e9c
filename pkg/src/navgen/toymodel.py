"""Small causal transformer with hand-written backprop, trained by mini-batch
gradient descent on masked token sequences.

Kept deliberately simple: learned token + position embeddings, pre-norm blocks
with multi-head causal attention and a ReLU MLP, untied output head. All math
is numpy; gradients are exact, which the finite-difference probes rely on.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field, asdict

import numpy as np

from .errors import ContextOverflow, NonFiniteLoss, ShapeMismatch
from .losses import masked_sequence_loss, smoothed_ce_on_visual_loss
from .tokenizer import MASKED, TokenSequence

LN_EPS = 1e-5


@dataclass
class ModelConfig:
    vocab_size: int
    embed_dim: int = 64
    n_layers: int = 2
    n_heads: int = 2
    context_len: int = 512

    def __post_init__(self):
        if self.embed_dim % self.n_heads:
            raise ShapeMismatch("embed_dim must be divisible by n_heads")


def param_order(cfg: ModelConfig):
    names = ["tok_emb", "pos_emb"]
    for i in range(cfg.n_layers):
        names += [f"l{i}.{n}" for n in (
            "ln1_g", "ln1_b", "qkv_w", "qkv_b", "out_w", "out_b",
            "ln2_g", "ln2_b", "fc1_w", "fc1_b", "fc2_w", "fc2_b")]
    names += ["lnf_g", "lnf_b", "head_w", "head_b"]
    return names


@dataclass
class ToyModelParams:
    config: ModelConfig
    tensors: dict

    @property
    def dtype(self):
        return self.tensors["tok_emb"].dtype

    def copy(self):
        return ToyModelParams(self.config, {k: v.copy() for k, v in self.tensors.items()})


def init_params(cfg: ModelConfig, seed: int = 0, dtype=np.float32) -> ToyModelParams:
    rng = np.random.Generator(np.random.PCG64(seed))
    e, v, c = cfg.embed_dim, cfg.vocab_size, cfg.context_len
    t = {}
    t["tok_emb"] = rng.normal(0, 0.02, size=(v, e))
    t["pos_emb"] = rng.normal(0, 0.01, size=(c, e))
    for i in range(cfg.n_layers):
        t[f"l{i}.ln1_g"] = np.ones(e)
        t[f"l{i}.ln1_b"] = np.zeros(e)
        t[f"l{i}.qkv_w"] = rng.normal(0, 0.02, size=(e, 3 * e))
        t[f"l{i}.qkv_b"] = np.zeros(3 * e)
        t[f"l{i}.out_w"] = rng.normal(0, 0.02, size=(e, e))
        t[f"l{i}.out_b"] = np.zeros(e)
        t[f"l{i}.ln2_g"] = np.ones(e)
        t[f"l{i}.ln2_b"] = np.zeros(e)
        t[f"l{i}.fc1_w"] = rng.normal(0, 0.02, size=(e, 4 * e))
        t[f"l{i}.fc1_b"] = np.zeros(4 * e)
        t[f"l{i}.fc2_w"] = rng.normal(0, 0.02, size=(4 * e, e))
        t[f"l{i}.fc2_b"] = np.zeros(e)
    t["lnf_g"] = np.ones(e)
    t["lnf_b"] = np.zeros(e)
    t["head_w"] = rng.normal(0, 0.02, size=(e, v))
    t["head_b"] = np.zeros(v)
    return ToyModelParams(cfg, {k: val.astype(dtype) for k, val in t.items()})


# ---------------------------------------------------------------------------
# forward / backward
# ---------------------------------------------------------------------------

def _layernorm_fwd(x, g, b):
    mu = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + LN_EPS)
    xhat = (x - mu) * inv
    return xhat * g + b, (xhat, inv)


def _layernorm_bwd(dy, cache, g):
    xhat, inv = cache
    dxhat = dy * g
    dx = inv * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
    dg = (dy * xhat).sum(axis=tuple(range(dy.ndim - 1)))
    db = dy.sum(axis=tuple(range(dy.ndim - 1)))
    return dx, dg, db


def _split_heads(x, n_heads):
    b, t, e = x.shape
    return x.reshape(b, t, n_heads, e // n_heads).transpose(0, 2, 1, 3)


def _merge_heads(x):
    b, h, t, d = x.shape
    return x.transpose(0, 2, 1, 3).reshape(b, t, h * d)


def forward_batch(params: ToyModelParams, ids, want_cache: bool = False):
    """Causal forward pass over a (B, T) id batch; returns (B, T, V) logits."""
    cfg = params.config
    t = params.tensors
    ids = np.asarray(ids, dtype=np.int64)
    if ids.ndim != 2:
        raise ShapeMismatch("forward_batch expects a (batch, time) id array")
    bsz, T = ids.shape
    if T > cfg.context_len:
        raise ContextOverflow(f"sequence length {T} exceeds context {cfg.context_len}")
    if T == 0:
        raise ShapeMismatch("empty sequence")

    x = t["tok_emb"][ids] + t["pos_emb"][None, :T]
    mask = np.triu(np.ones((T, T), dtype=bool), k=1)
    scale = 1.0 / np.sqrt(cfg.embed_dim // cfg.n_heads)
    caches = []
    for i in range(cfg.n_layers):
        p = lambda n: t[f"l{i}.{n}"]
        ln1, ln1_cache = _layernorm_fwd(x, p("ln1_g"), p("ln1_b"))
        qkv = ln1 @ p("qkv_w") + p("qkv_b")
        q, k, v = np.split(qkv, 3, axis=-1)
        qh, kh, vh = (_split_heads(a, cfg.n_heads) for a in (q, k, v))
        scores = (qh @ kh.transpose(0, 1, 3, 2)) * scale
        scores = np.where(mask[None, None], -1e30, scores)
        scores -= scores.max(axis=-1, keepdims=True)
        att = np.exp(scores)
        att /= att.sum(axis=-1, keepdims=True)
        yh = att @ vh
        y = _merge_heads(yh)
        attn_out = y @ p("out_w") + p("out_b")
        x1 = x + attn_out
        ln2, ln2_cache = _layernorm_fwd(x1, p("ln2_g"), p("ln2_b"))
        h_pre = ln2 @ p("fc1_w") + p("fc1_b")
        h = np.maximum(h_pre, 0)
        mlp_out = h @ p("fc2_w") + p("fc2_b")
        x2 = x1 + mlp_out
        if want_cache:
            caches.append((x, ln1, ln1_cache, qh, kh, vh, att, y, x1, ln2,
                           ln2_cache, h_pre, h))
        x = x2
    lnf, lnf_cache = _layernorm_fwd(x, t["lnf_g"], t["lnf_b"])
    logits = lnf @ t["head_w"] + t["head_b"]
    if want_cache:
        return logits, (ids, caches, x, lnf, lnf_cache)
    return logits


def forward(params: ToyModelParams, ids):
    """Logits for one sequence, shape (T, V)."""
    return forward_batch(params, np.asarray(ids, dtype=np.int64)[None])[0]


def backward_batch(params: ToyModelParams, cache, dlogits):
    """Exact gradients of sum(dlogits * logits) w.r.t. every parameter tensor."""
    cfg = params.config
    t = params.tensors
    ids, caches, x_last, lnf, lnf_cache = cache
    bsz, T = ids.shape
    scale = 1.0 / np.sqrt(cfg.embed_dim // cfg.n_heads)
    g = {k: np.zeros_like(v) for k, v in t.items()}

    dlnf = dlogits @ t["head_w"].T
    g["head_w"] = lnf.reshape(-1, cfg.embed_dim).T @ dlogits.reshape(-1, cfg.vocab_size)
    g["head_b"] = dlogits.sum(axis=(0, 1))
    dx, g["lnf_g"], g["lnf_b"] = _layernorm_bwd(dlnf, lnf_cache, t["lnf_g"])

    for i in reversed(range(cfg.n_layers)):
        p = lambda n: t[f"l{i}.{n}"]
        (x_in, ln1, ln1_cache, qh, kh, vh, att, y, x1, ln2,
         ln2_cache, h_pre, h) = caches[i]
        # mlp
        dmlp_out = dx
        g[f"l{i}.fc2_w"] = h.reshape(-1, h.shape[-1]).T @ dmlp_out.reshape(-1, cfg.embed_dim)
        g[f"l{i}.fc2_b"] = dmlp_out.sum(axis=(0, 1))
        dh = dmlp_out @ p("fc2_w").T
        dh_pre = dh * (h_pre > 0)
        g[f"l{i}.fc1_w"] = ln2.reshape(-1, cfg.embed_dim).T @ dh_pre.reshape(-1, dh_pre.shape[-1])
        g[f"l{i}.fc1_b"] = dh_pre.sum(axis=(0, 1))
        dln2 = dh_pre @ p("fc1_w").T
        dx1_from_ln2, g[f"l{i}.ln2_g"], g[f"l{i}.ln2_b"] = _layernorm_bwd(
            dln2, ln2_cache, p("ln2_g"))
        dx1 = dx + dx1_from_ln2
        # attention
        dattn_out = dx1
        g[f"l{i}.out_w"] = y.reshape(-1, cfg.embed_dim).T @ dattn_out.reshape(-1, cfg.embed_dim)
        g[f"l{i}.out_b"] = dattn_out.sum(axis=(0, 1))
        dy = dattn_out @ p("out_w").T
        dyh = _split_heads(dy, cfg.n_heads)
        datt = dyh @ vh.transpose(0, 1, 3, 2)
        dvh = att.transpose(0, 1, 3, 2) @ dyh
        dscores = (datt - (datt * att).sum(axis=-1, keepdims=True)) * att
        dqh = (dscores @ kh) * scale
        dkh = (dscores.transpose(0, 1, 3, 2) @ qh) * scale
        dq, dk, dv = (_merge_heads(a) for a in (dqh, dkh, dvh))
        dqkv = np.concatenate([dq, dk, dv], axis=-1)
        g[f"l{i}.qkv_w"] = ln1.reshape(-1, cfg.embed_dim).T @ dqkv.reshape(-1, 3 * cfg.embed_dim)
        g[f"l{i}.qkv_b"] = dqkv.sum(axis=(0, 1))
        dln1 = dqkv @ p("qkv_w").T
        dx_from_ln1, g[f"l{i}.ln1_g"], g[f"l{i}.ln1_b"] = _layernorm_bwd(
            dln1, ln1_cache, p("ln1_g"))
        dx = dx1 + dx_from_ln1

    g["pos_emb"][:T] = dx.sum(axis=0)
    flat_ids = ids.reshape(-1)
    np.add.at(g["tok_emb"], flat_ids, dx.reshape(-1, cfg.embed_dim))
    return g


# ---------------------------------------------------------------------------
# incremental decoding
# ---------------------------------------------------------------------------

class DecodeState:
    """Per-layer key/value cache for one sequence."""

    def __init__(self, cfg: ModelConfig):
        self.cfg = cfg
        self.keys = [[] for _ in range(cfg.n_layers)]
        self.values = [[] for _ in range(cfg.n_layers)]
        self.pos = 0


def prefill(params: ToyModelParams, ids):
    """Run the prompt through the model in one batched pass, returning
    (decode state, last-position logits)."""
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size == 0:
        raise ShapeMismatch("cannot prefill an empty prompt")
    logits, cache = forward_batch(params, ids[None], want_cache=True)
    _, caches, _, _, _ = cache
    state = DecodeState(params.config)
    state.pos = int(ids.size)
    e = params.config.embed_dim
    for i in range(params.config.n_layers):
        kh, vh = caches[i][4], caches[i][5]  # (1, H, T, hd)
        for t in range(ids.size):
            state.keys[i].append(kh[0, :, t, :].reshape(e))
            state.values[i].append(vh[0, :, t, :].reshape(e))
    return state, logits[0, -1]


def decode_step(params: ToyModelParams, state: DecodeState, token_id: int):
    cfg = params.config
    t = params.tensors
    if state.pos >= cfg.context_len:
        raise ContextOverflow(f"decode position {state.pos} exceeds context {cfg.context_len}")
    hd = cfg.embed_dim // cfg.n_heads
    scale = 1.0 / np.sqrt(hd)
    x = t["tok_emb"][token_id] + t["pos_emb"][state.pos]
    for i in range(cfg.n_layers):
        p = lambda n: t[f"l{i}.{n}"]
        ln1, _ = _layernorm_fwd(x, p("ln1_g"), p("ln1_b"))
        qkv = ln1 @ p("qkv_w") + p("qkv_b")
        q, k, v = np.split(qkv, 3, axis=-1)
        state.keys[i].append(k)
        state.values[i].append(v)
        ks = np.stack(state.keys[i])     # (T, E)
        vs = np.stack(state.values[i])
        qh = q.reshape(cfg.n_heads, hd)
        kh = ks.reshape(-1, cfg.n_heads, hd).transpose(1, 0, 2)
        vh = vs.reshape(-1, cfg.n_heads, hd).transpose(1, 0, 2)
        scores = np.einsum("hd,htd->ht", qh, kh) * scale
        scores -= scores.max(axis=-1, keepdims=True)
        att = np.exp(scores)
        att /= att.sum(axis=-1, keepdims=True)
        yh = np.einsum("ht,htd->hd", att, vh)
        y = yh.reshape(cfg.embed_dim)
        x = x + y @ p("out_w") + p("out_b")
        ln2, _ = _layernorm_fwd(x, p("ln2_g"), p("ln2_b"))
        h = np.maximum(ln2 @ p("fc1_w") + p("fc1_b"), 0)
        x = x + h @ p("fc2_w") + p("fc2_b")
    lnf, _ = _layernorm_fwd(x, t["lnf_g"], t["lnf_b"])
    state.pos += 1
    return lnf @ t["head_w"] + t["head_b"]


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

@dataclass
class TrainConfig:
    epochs: int = 5
    learning_rate: float = 1e-3
    batch_size: int = 8
    grad_accum: int = 1
    seed: int = 0
    eps: float = 0.1                     # label smoothing factor
    loss_variant: str = "token_discrepancy"  # or "smoothed_ce"
    optimizer: str = "sgd"               # or "adamw"
    momentum: float = 0.0
    weight_decay: float = 0.0
    tdl_full_vocab_softmax: bool = False
    smoothing_includes_target: bool = False

    def __post_init__(self):
        if self.epochs < 1:
            raise ShapeMismatch("epochs must be >= 1")
        if self.learning_rate < 0:
            raise ShapeMismatch("learning rate must be >= 0")


# training settings mirroring the reference setup at full scale; the toy
# defaults above are what the test suite actually uses
REFERENCE_PRESET = TrainConfig(epochs=20, learning_rate=2e-4, batch_size=8,
                               grad_accum=2, optimizer="adamw")


def _sequence_loss(seq, logits, cb, vocab, cfg):
    if cfg.loss_variant == "smoothed_ce":
        return smoothed_ce_on_visual_loss(seq, logits, cb, cfg.eps, vocab)
    return masked_sequence_loss(seq, logits, cb, cfg.eps, vocab,
                                full_vocab_softmax=cfg.tdl_full_vocab_softmax,
                                uniform_includes_target=cfg.smoothing_includes_target)


def _interleave(viz, instr, rng):
    viz = list(viz)
    instr = list(instr)
    rng.shuffle(viz)
    rng.shuffle(instr)
    out = []
    i = j = 0
    while i < len(viz) or j < len(instr):
        if i < len(viz):
            out.append(viz[i])
            i += 1
        if j < len(instr):
            out.append(instr[j])
            j += 1
    return out


class _Sgd:
    def __init__(self, params, cfg):
        self.cfg = cfg
        self.vel = {k: np.zeros_like(v) for k, v in params.tensors.items()}

    def step(self, params, grads):
        lr, mom = self.cfg.learning_rate, self.cfg.momentum
        for k, v in params.tensors.items():
            if mom:
                self.vel[k] = mom * self.vel[k] + grads[k]
                v -= (lr * self.vel[k]).astype(v.dtype)
            else:
                v -= (lr * grads[k]).astype(v.dtype)


class _AdamW:
    def __init__(self, params, cfg, betas=(0.9, 0.999), adam_eps=1e-8):
        self.cfg = cfg
        self.betas = betas
        self.adam_eps = adam_eps
        self.m = {k: np.zeros_like(v) for k, v in params.tensors.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.tensors.items()}
        self.t = 0

    def step(self, params, grads):
        self.t += 1
        b1, b2 = self.betas
        lr = self.cfg.learning_rate
        for k, p in params.tensors.items():
            gk = grads[k]
            self.m[k] = b1 * self.m[k] + (1 - b1) * gk
            self.v[k] = b2 * self.v[k] + (1 - b2) * gk * gk
            mhat = self.m[k] / (1 - b1 ** self.t)
            vhat = self.v[k] / (1 - b2 ** self.t)
            upd = mhat / (np.sqrt(vhat) + self.adam_eps)
            if self.cfg.weight_decay:
                upd = upd + self.cfg.weight_decay * p
            p -= (lr * upd).astype(p.dtype)


def train(params: ToyModelParams, dataset, cfg: TrainConfig, cb, vocab,
          log=None):
    """Mini-batch training on TokenSequences; batches interleave the two sample
    kinds round-robin. Returns (params, per-epoch mean loss trace)."""
    if not dataset:
        raise ShapeMismatch("training dataset is empty")
    for s in dataset:
        if len(s) > params.config.context_len:
            raise ContextOverflow(
                f"sample of length {len(s)} exceeds context {params.config.context_len}")

    viz_tag = vocab.task_tag("viz")
    viz_idx = [i for i, s in enumerate(dataset) if s.ids[1] == viz_tag]
    instr_idx = [i for i, s in enumerate(dataset) if s.ids[1] != viz_tag]
    rng = np.random.Generator(np.random.PCG64(cfg.seed))
    opt = _AdamW(params, cfg) if cfg.optimizer == "adamw" else _Sgd(params, cfg)
    pad_id = vocab.pad
    trace = []
    micro = cfg.batch_size

    for epoch in range(cfg.epochs):
        order = _interleave(viz_idx, instr_idx, rng)
        total = 0.0
        count = 0
        step_grads = None
        accum = 0
        for b0 in range(0, len(order), micro):
            batch = [dataset[i] for i in order[b0:b0 + micro]]
            T = max(len(s) for s in batch)
            ids = np.full((len(batch), T), pad_id, dtype=np.int64)
            for r, s in enumerate(batch):
                ids[r, :len(s)] = s.ids
            logits, cache = forward_batch(params, ids, want_cache=True)
            dlogits = np.zeros_like(logits)
            batch_loss = 0.0
            for r, s in enumerate(batch):
                res = _sequence_loss(s, logits[r, :len(s)].astype(np.float64),
                                     cb, vocab, cfg)
                batch_loss += res.value
                dlogits[r, :len(s)] = (res.grad / len(batch)).astype(dlogits.dtype)
            batch_loss /= len(batch)
            if not np.isfinite(batch_loss):
                raise NonFiniteLoss(
                    f"non-finite loss at epoch {epoch}, batch {b0 // micro}: {batch_loss}")
            grads = backward_batch(params, cache, dlogits)
            if step_grads is None:
                step_grads = grads
            else:
                for k in step_grads:
                    step_grads[k] += grads[k]
            accum += 1
            if accum == cfg.grad_accum:
                if cfg.grad_accum > 1:
                    for k in step_grads:
                        step_grads[k] /= cfg.grad_accum
                opt.step(params, step_grads)
                step_grads = None
                accum = 0
            total += batch_loss * len(batch)
            count += len(batch)
        if step_grads is not None:  # trailing partial accumulation window
            for k in step_grads:
                step_grads[k] /= accum
            opt.step(params, step_grads)
        trace.append(total / count)
        if log:
            log(epoch, trace[-1])
    return params, trace


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

CKPT_MAGIC = b"NVCK"


def save_checkpoint(params: ToyModelParams, path, extra: dict | None = None):
    """Binary checkpoint: magic, u32 header length, JSON header, then float32
    little-endian tensors in declared parameter order."""
    header = {
        "config": asdict(params.config),
        "param_order": param_order(params.config),
        "shapes": {k: list(params.tensors[k].shape) for k in param_order(params.config)},
        "extra": extra or {},
    }
    blob = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        for name in header["param_order"]:
            fh.write(params.tensors[name].astype("<f4").tobytes())


def load_checkpoint(path, dtype=np.float32):
    with open(path, "rb") as fh:
        if fh.read(4) != CKPT_MAGIC:
            raise ShapeMismatch(f"{path} is not a model checkpoint")
        (hlen,) = struct.unpack("<I", fh.read(4))
        header = json.loads(fh.read(hlen).decode())
        cfg = ModelConfig(**header["config"])
        tensors = {}
        for name in header["param_order"]:
            shape = tuple(header["shapes"][name])
            n = int(np.prod(shape))
            tensors[name] = np.frombuffer(fh.read(n * 4), dtype="<f4").reshape(shape).astype(dtype)
    return ToyModelParams(cfg, tensors), header["extra"]
