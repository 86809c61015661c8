"""Toy decoder-only transformer over token sequences, with manual backprop.

Inputs are ``cond + body`` token ids. The hidden state at input index ``i``
predicts token ``i + 1`` and attends to indices ``<= i``, so the logits for a
token never depend on that token or anything after it.

Each hidden state is routed through one of two parameter groups, chosen by
the slot of the token it predicts: ``approx`` when that slot is a condition
or coarse-band slot, ``detail`` otherwise. Attention weights, embeddings
and the output head are shared.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .errors import ConfigurationError, CorruptSequenceError, SequenceLengthError
from .tokenizer import TokenSequence

LN_EPS = 1e-5
GELU_K = math.sqrt(2.0 / math.pi)
GROUPS = ("approx", "detail")


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    max_len: int
    d_model: int = 32
    n_layers: int = 2
    n_heads: int = 2
    d_mlp: int = 64
    cond_vocab: int = 8
    coarse_len: int = 4
    approx_vocab: int = 64
    seed: int = 0
    init_std: float = 0.02

    def validate(self) -> None:
        for name in ("vocab_size", "max_len", "d_model", "n_layers", "n_heads", "d_mlp", "cond_vocab", "coarse_len", "approx_vocab"):
            if getattr(self, name) <= 0:
                raise ConfigurationError(f"{name} must be positive, got {getattr(self, name)}")
        if self.d_model % self.n_heads:
            raise ConfigurationError(
                f"d_model={self.d_model} is not divisible by n_heads={self.n_heads}"
            )
        if self.approx_vocab <= 0 or self.approx_vocab > self.vocab_size:
            raise ConfigurationError(
                f"approx_vocab={self.approx_vocab} must lie in [1, vocab_size={self.vocab_size}]"
            )
        if self.max_len < self.coarse_len + 1:
            raise ConfigurationError("max_len is shorter than condition plus coarse prefix")

    def digest(self) -> str:
        blob = json.dumps(asdict(self), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()


def segment_shapes(cfg: ModelConfig) -> List[Tuple[str, Tuple[int, ...]]]:
    """Ordered (name, shape) list that partitions the flat parameter vector."""
    d, m = cfg.d_model, cfg.d_mlp
    segs = [
        ("embed.cond", (cfg.cond_vocab, d)),
        ("embed.tok", (cfg.vocab_size, d)),
        ("embed.pos", (cfg.max_len, d)),
    ]
    for l in range(cfg.n_layers):
        for w in ("wq", "wk", "wv", "wo"):
            segs.append((f"layer{l}.attn.{w}", (d, d)))
        for g in GROUPS:
            segs += [
                (f"layer{l}.{g}.ln1_g", (d,)),
                (f"layer{l}.{g}.ln1_b", (d,)),
                (f"layer{l}.{g}.ln2_g", (d,)),
                (f"layer{l}.{g}.ln2_b", (d,)),
                (f"layer{l}.{g}.w1", (d, m)),
                (f"layer{l}.{g}.b1", (m,)),
                (f"layer{l}.{g}.w2", (m, d)),
                (f"layer{l}.{g}.b2", (d,)),
            ]
    for g in GROUPS:
        segs += [(f"final.{g}.ln_g", (d,)), (f"final.{g}.ln_b", (d,))]
    segs += [("head.w", (cfg.vocab_size, d)), ("head.b", (cfg.vocab_size,))]
    return segs


def param_count(cfg: ModelConfig) -> int:
    return sum(int(np.prod(s)) for _, s in segment_shapes(cfg))


class SegmentIndex:
    def __init__(self, cfg: ModelConfig):
        self.spans: Dict[str, Tuple[int, int, Tuple[int, ...]]] = {}
        off = 0
        for name, shape in segment_shapes(cfg):
            size = int(np.prod(shape))
            self.spans[name] = (off, off + size, shape)
            off += size
        self.size = off

    def names(self) -> List[str]:
        return list(self.spans)

    def view(self, flat: np.ndarray, name: str) -> np.ndarray:
        """View of segment ``name`` in ``flat`` (last axis is the parameter axis)."""
        lo, hi, shape = self.spans[name]
        return flat[..., lo:hi].reshape(flat.shape[:-1] + shape)

    def views(self, flat: np.ndarray) -> Dict[str, np.ndarray]:
        return {n: self.view(flat, n) for n in self.spans}

    def manifest(self) -> List[dict]:
        return [{"name": n, "offset": lo, "size": hi - lo, "shape": list(s)} for n, (lo, hi, s) in self.spans.items()]


def is_detail_segment(name: str) -> bool:
    return ".detail." in name


def trainable_mask(cfg: ModelConfig, stage: str, index: Optional[SegmentIndex] = None) -> np.ndarray:
    """Boolean mask over the flat vector.

    ``stage="full"`` trains everything. ``stage="coarse"`` trains condition
    embeddings, token-embedding and head rows of the coarse vocabulary,
    attention, and the approx-group norms and MLPs; everything else (detail
    group, positional embeddings, detail vocabulary rows) stays frozen.
    """
    index = index or SegmentIndex(cfg)
    mask = np.zeros(index.size, dtype=bool)
    if stage == "full":
        mask[:] = True
        return mask
    if stage != "coarse":
        raise ConfigurationError(f"unknown training stage {stage!r}")
    for name, (lo, hi, shape) in index.spans.items():
        if name == "embed.cond" or ".attn." in name or ".approx." in name:
            mask[lo:hi] = True
        elif name in ("embed.tok", "head.w", "head.b"):
            view = mask[lo:hi].reshape(shape)
            view[: cfg.approx_vocab] = True
    return mask


@dataclass
class ModelParams:
    """Flat parameter vector ``theta`` with its named-segment index."""

    config: ModelConfig
    theta: np.ndarray
    index: SegmentIndex = field(init=False, repr=False)

    def __post_init__(self):
        self.index = SegmentIndex(self.config)
        if self.theta.shape != (self.index.size,):
            raise ConfigurationError(
                f"theta has shape {self.theta.shape}, expected ({self.index.size},)"
            )

    def segment(self, name: str) -> np.ndarray:
        return self.index.view(self.theta, name)

    def copy(self) -> "ModelParams":
        return ModelParams(self.config, self.theta.copy())

    def with_theta(self, theta: np.ndarray) -> "ModelParams":
        return ModelParams(self.config, theta)


def init_params(cfg: ModelConfig) -> ModelParams:
    """Normal(0, init_std) weights, unit norm gains, zero biases and a zero head."""
    cfg.validate()
    index = SegmentIndex(cfg)
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 0x7A11]))
    theta = np.zeros(index.size)
    for name, (lo, hi, shape) in index.spans.items():
        leaf = name.rsplit(".", 1)[1]
        if name.startswith("head."):
            continue
        if leaf in ("ln1_g", "ln2_g", "ln_g"):
            theta[lo:hi] = 1.0
        elif leaf.startswith("b") or leaf.endswith("_b"):
            continue
        else:
            theta[lo:hi] = rng.normal(0.0, cfg.init_std, size=hi - lo)
    return ModelParams(cfg, theta)


@dataclass(frozen=True)
class TrainExample:
    """A token sequence and the body positions that contribute to the loss."""

    tokens: TokenSequence
    loss_mask: Tuple[bool, ...]
    example_id: int = -1

    def __post_init__(self):
        mask = tuple(bool(m) for m in self.loss_mask)
        if len(mask) != len(self.tokens.body):
            raise ValueError(
                f"loss mask has {len(mask)} entries for a body of {len(self.tokens.body)}"
            )
        object.__setattr__(self, "loss_mask", mask)


def make_example(tokens: TokenSequence, stage: str = "full", example_id: int = -1) -> TrainExample:
    """Build a training example; ``stage="coarse"`` keeps only cond + coarse tokens."""
    if stage == "coarse":
        n = tokens.layout.coarse_length
        tokens = TokenSequence(tokens.cond, tokens.body[:n], tokens.layout)
    elif stage != "full":
        raise ConfigurationError(f"unknown training stage {stage!r}")
    return TrainExample(tokens, (True,) * len(tokens.body), example_id)


# --------------------------------------------------------------------------
# forward / backward


def _gelu(u):
    t = np.tanh(GELU_K * (u + 0.044715 * u ** 3))
    return 0.5 * u * (1.0 + t), t


def _gelu_grad(u, t):
    return 0.5 * (1.0 + t) + 0.5 * u * (1.0 - t * t) * GELU_K * (1.0 + 3 * 0.044715 * u * u)


def _ln_forward(x, gamma, beta):
    mu = x.mean(-1, keepdims=True)
    xc = x - mu
    rstd = 1.0 / np.sqrt((xc * xc).mean(-1, keepdims=True) + LN_EPS)
    xhat = xc * rstd
    return xhat * gamma + beta, (xhat, rstd)


def _ln_backward(dy, gamma, cache):
    xhat, rstd = cache
    dxhat = dy * gamma
    return rstd * (
        dxhat - dxhat.mean(-1, keepdims=True) - xhat * (dxhat * xhat).mean(-1, keepdims=True)
    )


def _group_rows(cfg: ModelConfig, n_cond: int, n_in: int):
    """Row indices of each parameter group for ``n_in`` input positions."""
    target_body = np.arange(n_in) + 1 - n_cond
    detail = target_body >= cfg.coarse_len
    return np.flatnonzero(~detail), np.flatnonzero(detail)


def _select(rows_a, rows_d, va, vd, n):
    out = np.empty((n,) + va.shape)
    out[rows_a] = va
    out[rows_d] = vd
    return out


class _Forward:
    """Batched forward pass that keeps what the backward pass needs."""

    def __init__(self, params: ModelParams, cond: np.ndarray, body_in: np.ndarray):
        cfg = params.config
        self.cfg = cfg
        self.p = params.index.views(params.theta)
        B, c = cond.shape
        n = c + body_in.shape[1]
        if n > cfg.max_len:
            raise SequenceLengthError(f"sequence of {n} inputs exceeds max_len={cfg.max_len}")
        if cond.size and (cond.min() < 0 or cond.max() >= cfg.cond_vocab):
            raise ValueError("condition id outside condition vocabulary")
        if body_in.size and (body_in.min() < 0 or body_in.max() >= cfg.vocab_size):
            raise ValueError("token id outside vocabulary")
        self.B, self.c, self.n = B, c, n
        self.cond, self.body_in = cond, body_in
        self.rows_a, self.rows_d = _group_rows(cfg, c, n)
        p = self.p
        H = cfg.n_heads
        dh = cfg.d_model // H
        self.H, self.dh = H, dh
        causal = np.triu(np.full((n, n), -np.inf), k=1)

        h = np.concatenate([p["embed.cond"][cond], p["embed.tok"][body_in]], axis=1)
        h = h + p["embed.pos"][:n]
        self.layers = []
        for l in range(cfg.n_layers):
            lc = {}
            g1 = self._sel(f"layer{l}", "ln1_g")
            b1 = self._sel(f"layer{l}", "ln1_b")
            a, lc["ln1"] = _ln_forward(h, g1, b1)
            lc["a"] = a
            q = (a @ p[f"layer{l}.attn.wq"]).reshape(B, n, H, dh).transpose(0, 2, 1, 3)
            k = (a @ p[f"layer{l}.attn.wk"]).reshape(B, n, H, dh).transpose(0, 2, 1, 3)
            v = (a @ p[f"layer{l}.attn.wv"]).reshape(B, n, H, dh).transpose(0, 2, 1, 3)
            s = q @ k.transpose(0, 1, 3, 2) / math.sqrt(dh) + causal
            s = s - s.max(-1, keepdims=True)
            P = np.exp(s)
            P /= P.sum(-1, keepdims=True)
            o = (P @ v).transpose(0, 2, 1, 3).reshape(B, n, cfg.d_model)
            lc.update(q=q, k=k, v=v, P=P, o=o)
            h = h + o @ p[f"layer{l}.attn.wo"]
            g2 = self._sel(f"layer{l}", "ln2_g")
            b2 = self._sel(f"layer{l}", "ln2_b")
            bn, lc["ln2"] = _ln_forward(h, g2, b2)
            lc["bn"] = bn
            mlp = np.empty_like(h)
            for g, rows in (("approx", self.rows_a), ("detail", self.rows_d)):
                if rows.size == 0:
                    continue
                x = bn[:, rows]
                u = x @ p[f"layer{l}.{g}.w1"] + p[f"layer{l}.{g}.b1"]
                f, t = _gelu(u)
                mlp[:, rows] = f @ p[f"layer{l}.{g}.w2"] + p[f"layer{l}.{g}.b2"]
                lc[g] = (x, u, f, t)
            h = h + mlp
            self.layers.append(lc)
        gf = self._sel("final", "ln_g")
        bf = self._sel("final", "ln_b")
        self.z, self.lnf = _ln_forward(h, gf, bf)
        self.logits = self.z @ p["head.w"].T + p["head.b"]

    def _sel(self, prefix, leaf):
        return _select(
            self.rows_a,
            self.rows_d,
            self.p[f"{prefix}.approx.{leaf}"],
            self.p[f"{prefix}.detail.{leaf}"],
            self.n,
        )

    def backward(self, dlogits: np.ndarray, grads: Dict[str, np.ndarray]) -> None:
        """Accumulate per-example gradients into ``grads`` (views with leading batch axis)."""
        cfg, p = self.cfg, self.p
        B, n, H, dh = self.B, self.n, self.H, self.dh
        grads["head.w"] += np.einsum("bnv,bnd->bvd", dlogits, self.z)
        grads["head.b"] += dlogits.sum(1)
        dz = dlogits @ p["head.w"]
        self._ln_param_grads("final", "ln_g", "ln_b", dz, self.lnf, grads)
        dh_ = _ln_backward(dz, self._sel("final", "ln_g"), self.lnf)

        for l in reversed(range(cfg.n_layers)):
            lc = self.layers[l]
            dmlp = dh_
            dbn = np.zeros_like(dh_)
            for g, rows in (("approx", self.rows_a), ("detail", self.rows_d)):
                if rows.size == 0:
                    continue
                x, u, f, t = lc[g]
                dy = dmlp[:, rows]
                grads[f"layer{l}.{g}.w2"] += np.einsum("brm,brd->bmd", f, dy)
                grads[f"layer{l}.{g}.b2"] += dy.sum(1)
                du = (dy @ p[f"layer{l}.{g}.w2"].T) * _gelu_grad(u, t)
                grads[f"layer{l}.{g}.w1"] += np.einsum("brd,brm->bdm", x, du)
                grads[f"layer{l}.{g}.b1"] += du.sum(1)
                dbn[:, rows] = du @ p[f"layer{l}.{g}.w1"].T
            self._ln_param_grads(f"layer{l}", "ln2_g", "ln2_b", dbn, lc["ln2"], grads)
            dh_ = dh_ + _ln_backward(dbn, self._sel(f"layer{l}", "ln2_g"), lc["ln2"])

            dao = dh_
            grads[f"layer{l}.attn.wo"] += np.einsum("bnd,bne->bde", lc["o"], dao)
            do = (dao @ p[f"layer{l}.attn.wo"].T).reshape(B, n, H, dh).transpose(0, 2, 1, 3)
            P, q, k, v = lc["P"], lc["q"], lc["k"], lc["v"]
            dP = do @ v.transpose(0, 1, 3, 2)
            dv = P.transpose(0, 1, 3, 2) @ do
            ds = P * (dP - (dP * P).sum(-1, keepdims=True)) / math.sqrt(dh)
            dq = ds @ k
            dk = ds.transpose(0, 1, 3, 2) @ q
            merge = lambda t: t.transpose(0, 2, 1, 3).reshape(B, n, cfg.d_model)
            dq, dk, dv = merge(dq), merge(dk), merge(dv)
            a = lc["a"]
            grads[f"layer{l}.attn.wq"] += np.einsum("bnd,bne->bde", a, dq)
            grads[f"layer{l}.attn.wk"] += np.einsum("bnd,bne->bde", a, dk)
            grads[f"layer{l}.attn.wv"] += np.einsum("bnd,bne->bde", a, dv)
            da = dq @ p[f"layer{l}.attn.wq"].T + dk @ p[f"layer{l}.attn.wk"].T + dv @ p[f"layer{l}.attn.wv"].T
            self._ln_param_grads(f"layer{l}", "ln1_g", "ln1_b", da, lc["ln1"], grads)
            dh_ = dh_ + _ln_backward(da, self._sel(f"layer{l}", "ln1_g"), lc["ln1"])

        bidx = np.arange(B)[:, None]
        grads["embed.pos"][:, :n] += dh_
        c = self.c
        if c:
            np.add.at(grads["embed.cond"], (bidx, self.cond), dh_[:, :c])
        if n > c:
            np.add.at(grads["embed.tok"], (bidx, self.body_in), dh_[:, c:])

    def _ln_param_grads(self, prefix, gname, bname, dy, cache, grads):
        xhat = cache[0]
        for g, rows in (("approx", self.rows_a), ("detail", self.rows_d)):
            if rows.size == 0:
                continue
            grads[f"{prefix}.{g}.{gname}"] += (dy[:, rows] * xhat[:, rows]).sum(1)
            grads[f"{prefix}.{g}.{bname}"] += dy[:, rows].sum(1)


def _stack(examples: Sequence[TrainExample]):
    c = {len(e.tokens.cond) for e in examples}
    nb = {len(e.tokens.body) for e in examples}
    if len(c) != 1 or len(nb) != 1:
        raise ValueError("examples in one batch must share condition and body lengths")
    cond = np.array([e.tokens.cond for e in examples], dtype=np.int64).reshape(len(examples), c.pop())
    body = np.array([e.tokens.body for e in examples], dtype=np.int64).reshape(len(examples), nb.pop())
    mask = np.array([e.loss_mask for e in examples], dtype=bool).reshape(body.shape)
    return cond, body, mask


def _loss_and_dlogits(fwd: _Forward, body: np.ndarray, mask: np.ndarray, need_grad: bool):
    """Masked mean cross-entropy per example; rows ``c-1 .. c+nb-2`` predict the body."""
    B, nb = body.shape
    c = fwd.c
    logits = fwd.logits[:, c - 1 : c - 1 + nb] if c >= 1 else fwd.logits[:, :nb]
    if c == 0:
        raise ValueError("examples need at least one condition token")
    mx = logits.max(-1, keepdims=True)
    lse = mx[..., 0] + np.log(np.exp(logits - mx).sum(-1))
    tgt = np.take_along_axis(logits, body[..., None], axis=-1)[..., 0]
    nll = lse - tgt
    counts = mask.sum(1)
    w = np.where(counts[:, None] > 0, mask / np.maximum(counts, 1)[:, None], 0.0)
    losses = (nll * w).sum(1)
    dlogits = None
    if need_grad:
        probs = np.exp(logits - lse[..., None])
        probs[np.arange(B)[:, None], np.arange(nb)[None, :], body] -= 1.0
        dl = probs * w[..., None]
        dlogits = np.zeros_like(fwd.logits)
        dlogits[:, c - 1 : c - 1 + nb] = dl
    return losses, logits, dlogits


def batch_loss_and_grads(params: ModelParams, examples: Sequence[TrainExample], mask: Optional[np.ndarray] = None):
    """Per-example losses ``(B,)`` and gradients ``(B, P)`` for same-shape examples.

    Coordinates outside ``mask`` are zeroed.
    """
    cond, body, lmask = _stack(examples)
    fwd = _Forward(params, cond, body[:, :-1])
    losses, _, dlogits = _loss_and_dlogits(fwd, body, lmask, True)
    G = np.zeros((len(examples), params.index.size))
    fwd.backward(dlogits, params.index.views(G))
    if mask is not None:
        G[:, ~mask] = 0.0
    return losses, G


def per_example_grads(params: ModelParams, examples: Sequence[TrainExample], mask: Optional[np.ndarray] = None, chunk: int = 64):
    """Like :func:`batch_loss_and_grads` but groups mixed shapes and bounds memory."""
    groups: Dict[tuple, List[int]] = {}
    for i, e in enumerate(examples):
        groups.setdefault((len(e.tokens.cond), len(e.tokens.body)), []).append(i)
    losses = np.zeros(len(examples))
    G = np.zeros((len(examples), params.index.size))
    for idx in groups.values():
        for s in range(0, len(idx), chunk):
            part = idx[s : s + chunk]
            l, g = batch_loss_and_grads(params, [examples[i] for i in part], mask)
            losses[part] = l
            G[part] = g
    return losses, G


def forward_loss(params: ModelParams, example: TrainExample):
    """Masked next-token cross-entropy and body-aligned logits.

    ``logits[t]`` is the (unmasked, full-vocabulary) prediction for body
    token ``t``.
    """
    cond, body, lmask = _stack([example])
    fwd = _Forward(params, cond, body[:, :-1])
    losses, logits, _ = _loss_and_dlogits(fwd, body, lmask, False)
    return float(losses[0]), logits[0]


@dataclass
class GradientVector:
    values: np.ndarray
    example_id: int = -1


def per_example_grad(params: ModelParams, example: TrainExample, mask: Optional[np.ndarray] = None) -> GradientVector:
    """Exact gradient of :func:`forward_loss`, zero outside ``mask``."""
    _, G = batch_loss_and_grads(params, [example], mask)
    return GradientVector(G[0], example.example_id)


def next_logits(params: ModelParams, cond: Sequence[int], body: Sequence[int]) -> np.ndarray:
    """Logits for body position ``len(body)`` given the tokens so far."""
    c = np.asarray([cond], dtype=np.int64).reshape(1, len(cond))
    b = np.asarray([body], dtype=np.int64).reshape(1, len(body))
    fwd = _Forward(params, c, b)
    return fwd.logits[0, -1]


def sample(
    params: ModelParams,
    cond: Sequence[int],
    prefix: TokenSequence,
    stop: int,
    temperature: float = 1.0,
    seed: int = 0,
) -> TokenSequence:
    """Autoregressive sampling with prefix forcing and per-slot vocabulary masks.

    ``prefix.body`` is copied verbatim; positions after it are drawn from the
    temperature-scaled softmax restricted to each slot's id range until the
    body holds ``stop`` tokens. ``temperature <= 0`` means greedy decoding.
    """
    layout = prefix.layout
    if stop > len(layout):
        raise CorruptSequenceError(f"stop={stop} exceeds layout length {len(layout)}")
    body = list(prefix.body)
    if len(body) > stop:
        raise CorruptSequenceError(f"prefix of {len(body)} tokens is longer than stop={stop}")
    for pos, tok in enumerate(body):
        lo, hi = layout.slot_range(pos)
        if not lo <= tok < hi:
            raise CorruptSequenceError(
                f"prefix token {tok} at slot {pos} outside range [{lo}, {hi})"
            )
    rng = np.random.default_rng(seed)
    while len(body) < stop:
        pos = len(body)
        lo, hi = layout.slot_range(pos)
        logits = next_logits(params, cond, body)[lo:hi]
        if temperature <= 0:
            tok = int(np.argmax(logits))
        else:
            z = logits / temperature
            z = np.exp(z - z.max())
            cdf = np.cumsum(z / z.sum())
            tok = int(min(np.searchsorted(cdf, rng.random(), side="right"), hi - lo - 1))
        body.append(lo + tok)
    return TokenSequence(tuple(cond), tuple(body), layout)


def teacher_forced_accuracy(params: ModelParams, tokens: TokenSequence, positions: Optional[Sequence[int]] = None) -> float:
    """Fraction of body positions whose range-restricted argmax equals the truth."""
    ex = TrainExample(tokens, (True,) * len(tokens.body))
    _, logits = forward_loss(params, ex)
    positions = range(len(tokens.body)) if positions is None else positions
    hits = 0
    total = 0
    for t in positions:
        lo, hi = tokens.layout.slot_range(t)
        hits += int(lo + np.argmax(logits[t, lo:hi]) == tokens.body[t])
        total += 1
    return hits / total if total else float("nan")
