"""DP-SGD and DP-Adam with Poisson sampling, per-example clipping and Gaussian noise.

The noised gradient is normalized by the expected batch size ``q * N``
rather than the realized one, so an empty batch is a well-defined
noise-only step.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np

from .errors import ConfigurationError, NumericError

GradFn = Callable[[np.ndarray, Sequence[int]], Tuple[np.ndarray, np.ndarray]]


@dataclass(frozen=True)
class DpSgdConfig:
    clip_norm: float
    noise_multiplier: float
    sampling_rate: float
    steps: int
    learning_rate: float
    optimizer: str = "adam"
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    warmup_steps: int = 0
    schedule: str = "constant"  # or "warmup_cosine"
    final_lr_fraction: float = 0.05
    seed: int = 0

    def validate(self) -> None:
        if not self.clip_norm > 0:
            raise ConfigurationError(f"clip_norm must be > 0, got {self.clip_norm}")
        if not self.noise_multiplier >= 0:
            raise ConfigurationError(f"noise_multiplier must be >= 0, got {self.noise_multiplier}")
        if not 0 < self.sampling_rate <= 1:
            raise ConfigurationError(f"sampling_rate must lie in (0, 1], got {self.sampling_rate}")
        if self.steps < 1:
            raise ConfigurationError(f"steps must be >= 1, got {self.steps}")
        if not self.learning_rate > 0:
            raise ConfigurationError(f"learning_rate must be > 0, got {self.learning_rate}")
        if self.optimizer not in ("sgd", "adam"):
            raise ConfigurationError(f"optimizer must be 'sgd' or 'adam', got {self.optimizer!r}")
        if self.schedule not in ("constant", "warmup_cosine"):
            raise ConfigurationError(f"unknown schedule {self.schedule!r}")


def learning_rate_at(cfg: DpSgdConfig, t: int) -> float:
    """Constant, or linear warm-up followed by cosine decay to ``final_lr_fraction``."""
    if cfg.schedule == "constant":
        return cfg.learning_rate
    if t < cfg.warmup_steps:
        return cfg.learning_rate * (t + 1) / cfg.warmup_steps
    span = max(cfg.steps - cfg.warmup_steps, 1)
    frac = min((t - cfg.warmup_steps) / span, 1.0)
    floor = cfg.final_lr_fraction
    return cfg.learning_rate * (floor + (1 - floor) * 0.5 * (1 + math.cos(math.pi * frac)))


class CountingStream:
    """A seeded uniform stream that records how many draws it has handed out."""

    def __init__(self, seed_seq: np.random.SeedSequence):
        self._gen = np.random.Generator(np.random.PCG64(seed_seq))
        self.offset = 0

    def uniform(self, n: int) -> Tuple[np.ndarray, Tuple[int, int]]:
        u = self._gen.random(n)
        span = (self.offset, self.offset + n)
        self.offset += n
        return u, span


def box_muller(stream: CountingStream, n: int) -> Tuple[np.ndarray, Tuple[int, int]]:
    """``n`` standard normals from ``2 * ceil(n / 2)`` uniforms."""
    m = (n + 1) // 2
    u, span = stream.uniform(2 * m)
    u1 = 1.0 - u[:m]  # (0, 1]
    u2 = u[m:]
    r = np.sqrt(-2.0 * np.log(u1))
    z = np.empty(2 * m)
    z[0::2] = r * np.cos(2 * np.pi * u2)
    z[1::2] = r * np.sin(2 * np.pi * u2)
    return z[:n], span


def clip(g: np.ndarray, C: float) -> np.ndarray:
    """Scale ``g`` by ``1 / max(1, ||g|| / C)``."""
    g = np.asarray(g, dtype=np.float64)
    if not np.all(np.isfinite(g)):
        raise NumericError("gradient contains non-finite values")
    norm = math.sqrt(float(np.dot(g, g)))
    return g / max(1.0, norm / C)


def clip_rows(G: np.ndarray, C: float) -> Tuple[np.ndarray, np.ndarray]:
    """Clip each row; returns clipped rows and the pre-clip norms."""
    if not np.all(np.isfinite(G)):
        raise NumericError("gradient contains non-finite values")
    # same per-row arithmetic as clip(), so the two agree bit for bit
    norms = np.array([math.sqrt(float(np.dot(g, g))) for g in G])
    return G / np.maximum(1.0, norms / C)[:, None], norms


def tree_sum(rows: np.ndarray) -> np.ndarray:
    """Pairwise reduction over the leading axis, in a fixed order."""
    if rows.shape[0] == 0:
        return np.zeros(rows.shape[1:])
    cur = rows
    while cur.shape[0] > 1:
        if cur.shape[0] % 2:
            tail = cur[-1:]
            cur = np.concatenate([cur[:-1:2] + cur[1::2], tail])
        else:
            cur = cur[0::2] + cur[1::2]
    return cur[0].copy()


@dataclass
class StepRecord:
    step: int
    loss: float
    clipped_fraction: float
    realized_batch: int
    lr: float = 0.0
    max_clipped_norm: float = 0.0
    noise_span: Tuple[int, int] = (0, 0)

    def to_json(self) -> str:
        return json.dumps(
            {
                "step": self.step,
                "loss": self.loss,
                "clipped_fraction": self.clipped_fraction,
                "realized_batch": self.realized_batch,
                "lr": self.lr,
                "max_clipped_norm": self.max_clipped_norm,
                "noise_span": list(self.noise_span),
            }
        )


@dataclass
class OptimizerState:
    config: DpSgdConfig
    theta: np.ndarray
    mask: np.ndarray
    step: int = 0
    m: Optional[np.ndarray] = None
    v: Optional[np.ndarray] = None
    sample_stream: CountingStream = field(default=None, repr=False)
    noise_stream: CountingStream = field(default=None, repr=False)
    log: List[StepRecord] = field(default_factory=list)

    @classmethod
    def create(cls, config: DpSgdConfig, theta: np.ndarray, mask: Optional[np.ndarray] = None) -> "OptimizerState":
        config.validate()
        theta = np.array(theta, dtype=np.float64)
        mask = np.ones(theta.shape, dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
        s_seq, n_seq = np.random.SeedSequence(config.seed).spawn(2)
        k = int(mask.sum())
        m = np.zeros(k) if config.optimizer == "adam" else None
        v = np.zeros(k) if config.optimizer == "adam" else None
        return cls(config, theta, mask, 0, m, v, CountingStream(s_seq), CountingStream(n_seq))


def adam_direction(g, m, v, t, beta1, beta2, eps, precondition=True):
    """Bias-corrected Adam step direction; updates ``m`` and ``v`` in place.

    With ``precondition=False`` the direction is the bias-corrected first
    moment alone.
    """
    m *= beta1
    m += (1 - beta1) * g
    v *= beta2
    v += (1 - beta2) * g * g
    mhat = m / (1 - beta1 ** t)
    if not precondition:
        return mhat
    vhat = v / (1 - beta2 ** t)
    return mhat / (np.sqrt(vhat) + eps)


Observer = Callable[[int, np.ndarray, np.ndarray, np.ndarray, np.ndarray], None]


def dp_step(state: OptimizerState, n_examples: int, grad_fn: GradFn, observer: Optional[Observer] = None) -> OptimizerState:
    """One noised step, mutating and returning ``state``.

    ``grad_fn(theta, indices)`` returns per-example losses ``(b,)`` and
    gradients ``(b, P)``. ``observer(step, theta, indices, clipped, presum)``
    sees the clipped gradients and the pre-noise sum.
    """
    cfg = state.config
    N = n_examples
    u, _ = state.sample_stream.uniform(N)
    idx = np.flatnonzero(u < cfg.sampling_rate)
    P = state.theta.size
    if idx.size:
        losses, G = grad_fn(state.theta, idx)
        G = np.asarray(G, dtype=np.float64)
        if G.shape != (idx.size, P):
            raise ValueError(f"grad_fn returned shape {G.shape}, expected {(idx.size, P)}")
        G[:, ~state.mask] = 0.0
        clipped, norms = clip_rows(G, cfg.clip_norm)
        clipped_frac = float(np.mean(norms > cfg.clip_norm))
        loss = float(np.mean(losses))
        max_norm = float(np.sqrt(np.einsum("ij,ij->i", clipped, clipped)).max())
    else:
        clipped = np.zeros((0, P))
        clipped_frac, loss, max_norm = 0.0, float("nan"), 0.0
    presum = tree_sum(clipped)
    if observer is not None:
        observer(state.step, state.theta, idx, clipped, presum)

    k = int(state.mask.sum())
    z, span = box_muller(state.noise_stream, k)
    noisy = presum[state.mask] + (cfg.noise_multiplier * cfg.clip_norm) * z
    g_tilde = noisy / (cfg.sampling_rate * N)

    lr = learning_rate_at(cfg, state.step)
    t = state.step + 1
    if cfg.optimizer == "sgd":
        update = lr * g_tilde
    else:
        update = lr * adam_direction(g_tilde, state.m, state.v, t, cfg.beta1, cfg.beta2, cfg.adam_eps)
    state.theta[state.mask] -= update
    state.log.append(StepRecord(state.step, loss, clipped_frac, int(idx.size), lr, max_norm, span))
    state.step = t
    return state


def run(state: OptimizerState, steps: int, n_examples: int, grad_fn: GradFn, observer: Optional[Observer] = None, log_fn=None) -> np.ndarray:
    """Apply ``steps`` :func:`dp_step` calls and return the final parameters."""
    for _ in range(steps):
        dp_step(state, n_examples, grad_fn, observer)
        if log_fn is not None:
            log_fn(state.log[-1])
    return state.theta
