"""Privacy accounting for Poisson-subsampled Gaussian DP-SGD.

Production accounting uses Renyi DP at integer orders (exact binomial
expansion) and the improved RDP-to-(eps, delta) conversion. A discretized
privacy-loss-distribution oracle is provided for verification only; it is
slow and meant for small step counts.

The neighboring relation is add/remove-one. Accounting depends on the noise
multiplier, never on the clipping norm.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from typing import Iterable, Optional, Sequence, Tuple

import numpy as np
from scipy import signal, special, stats

from .errors import CalibrationError, ConfigurationError, ResolutionError

ACCOUNTANT_VERSION = "rdp-int-v1"
DEFAULT_ORDERS: Tuple[int, ...] = tuple(range(2, 65)) + (80, 128, 256, 512)
SIGMA_MAX = 1e6


@dataclass(frozen=True)
class PrivacySpec:
    epsilon: float
    delta: float

    def validate(self, dataset_size: Optional[int] = None) -> None:
        if not self.epsilon > 0:
            raise ConfigurationError(f"epsilon must be > 0, got {self.epsilon}")
        if not 0 < self.delta < 1:
            raise ConfigurationError(f"delta must lie in (0, 1), got {self.delta}")
        if dataset_size and self.delta >= 1.0 / dataset_size:
            warnings.warn(
                f"delta={self.delta} is not much smaller than 1/N={1.0 / dataset_size:.3g}",
                stacklevel=2,
            )


@dataclass(frozen=True)
class RdpCurve:
    orders: Tuple[float, ...]
    rdp: Tuple[float, ...]
    sampling_rate: float
    noise_multiplier: float
    steps: int = 1

    def compose(self, steps: int) -> "RdpCurve":
        return RdpCurve(
            self.orders,
            tuple(steps * r for r in self.rdp),
            self.sampling_rate,
            self.noise_multiplier,
            self.steps * steps,
        )


def _log_a_int(q: float, sigma: float, alpha: int) -> float:
    """log E_{mu0}[(mu/mu0)^alpha] for mu = (1-q) N(0, s^2) + q N(1, s^2)."""
    k = np.arange(alpha + 1)
    log_binom = special.gammaln(alpha + 1) - special.gammaln(k + 1) - special.gammaln(alpha - k + 1)
    terms = log_binom + (alpha - k) * math.log1p(-q) + k * math.log(q) + (k * k - k) / (2 * sigma ** 2)
    return float(special.logsumexp(terms))


def rdp_subsampled_gaussian(q: float, sigma: float, orders: Iterable[int] = DEFAULT_ORDERS) -> RdpCurve:
    """Per-step Renyi divergence bound at each integer order.

    ``sigma == 0`` yields infinite values rather than raising.
    """
    orders = tuple(orders)
    if not 0 <= q <= 1:
        raise ConfigurationError(f"sampling rate must lie in [0, 1], got {q}")
    if sigma < 0:
        raise ConfigurationError(f"noise multiplier must be >= 0, got {sigma}")
    for a in orders:
        if a < 2 or int(a) != a:
            raise ConfigurationError(f"orders must be integers >= 2, got {a}")
    if q == 0:
        vals = tuple(0.0 for _ in orders)
    elif sigma == 0:
        vals = tuple(math.inf for _ in orders)
    elif q == 1:
        vals = tuple(a / (2 * sigma ** 2) for a in orders)
    else:
        vals = tuple(_log_a_int(q, sigma, int(a)) / (a - 1) for a in orders)
    return RdpCurve(orders, vals, q, sigma, 1)


def rdp_to_epsilon(orders: Sequence[float], rdp: Sequence[float], delta: float) -> Tuple[float, float]:
    """Best ``(epsilon, order)`` over orders for an already-composed curve."""
    best, best_a = math.inf, float("nan")
    logd = math.log(delta)
    for a, r in zip(orders, rdp):
        if math.isinf(r):
            continue
        eps = r + math.log1p(-1.0 / a) - (logd + math.log(a)) / (a - 1)
        if eps < best:
            best, best_a = eps, a
    return max(best, 0.0), best_a


def compose_and_convert(curve: RdpCurve, steps: int, delta: float) -> float:
    """Epsilon after ``steps``-fold composition of ``curve`` at ``delta``."""
    if steps < 0:
        raise ConfigurationError(f"steps must be >= 0, got {steps}")
    if not 0 < delta < 1:
        raise ConfigurationError(f"delta must lie in (0, 1), got {delta}")
    if steps == 0:
        return 0.0
    composed = curve.compose(steps)
    return rdp_to_epsilon(composed.orders, composed.rdp, delta)[0]


def epsilon_for(sigma: float, q: float, steps: int, delta: float, orders=DEFAULT_ORDERS) -> float:
    if steps == 0:
        return 0.0
    return compose_and_convert(rdp_subsampled_gaussian(q, sigma, orders), steps, delta)


def calibrate_sigma(target: PrivacySpec, q: float, steps: int, tol: float = 1e-4, orders=DEFAULT_ORDERS) -> float:
    """Smallest noise multiplier (to ``tol``) whose epsilon does not exceed the target."""
    target.validate()
    if math.isinf(target.epsilon):
        return 0.0
    eps = lambda s: epsilon_for(s, q, steps, target.delta, orders)
    floor = eps(SIGMA_MAX)
    if floor > target.epsilon:
        raise CalibrationError(
            f"epsilon={target.epsilon} unreachable: floor is {floor:.6g} at sigma={SIGMA_MAX:g}",
            epsilon_floor=floor,
        )
    lo, hi = 0.0, 1.0
    while eps(hi) > target.epsilon:
        lo, hi = hi, min(2 * hi, SIGMA_MAX)
    while hi - lo > tol:
        mid = 0.5 * (lo + hi)
        if mid > 0 and eps(mid) <= target.epsilon:
            hi = mid
        else:
            lo = mid
    return hi


# --------------------------------------------------------------------------
# privacy loss distribution oracle (verification only)


@dataclass
class _DiscretePLD:
    lo: int  # index of first bin; loss of bin i is (lo + i) * step
    pmf: np.ndarray
    inf_mass: float


def _single_step_pld(q: float, sigma: float, step: float, direction: str, pessimistic: bool, tail: float, x_points: int) -> _DiscretePLD:
    xs = np.linspace(-tail * sigma, 1.0 + tail * sigma, x_points)
    log_ratio = np.logaddexp(
        math.log1p(-q) if q < 1 else -np.inf,
        math.log(q) + (2 * xs - 1) / (2 * sigma ** 2),
    )
    if direction == "remove":
        loss = log_ratio
        cdf = (1 - q) * stats.norm.cdf(xs, 0, sigma) + q * stats.norm.cdf(xs, 1, sigma)
        upper_tail, lower_tail = 1 - cdf[-1], cdf[0]  # loss increases with x
    else:
        loss = -log_ratio
        cdf = stats.norm.cdf(xs, 0, sigma)
        upper_tail, lower_tail = cdf[0], 1 - cdf[-1]  # loss decreases with x
    mass = np.diff(cdf)
    a, b = loss[:-1], loss[1:]
    if pessimistic:
        idx = np.ceil(np.maximum(a, b) / step)
    else:
        idx = np.floor(np.minimum(a, b) / step)
    idx = idx.astype(np.int64)
    lo = int(idx.min())
    pmf = np.bincount(idx - lo, weights=mass)
    pmf[0] += lower_tail
    if pessimistic:
        return _DiscretePLD(lo, pmf, float(upper_tail))
    pmf[-1] += upper_tail
    return _DiscretePLD(lo, pmf, 0.0)


def _truncate(d: _DiscretePLD, floor_idx: int, ceil_idx: int, pessimistic: bool) -> _DiscretePLD:
    lo, pmf, inf_mass = d.lo, d.pmf, d.inf_mass
    if lo < floor_idx:
        k = floor_idx - lo
        if pessimistic:
            head = pmf[:k].sum()
            pmf = pmf[k:].copy()
            pmf[0] += head
        else:
            pmf = pmf[k:].copy()  # dropping low losses only lowers delta
        lo = floor_idx
    top = lo + len(pmf) - 1
    if top > ceil_idx:
        k = top - ceil_idx
        spill = pmf[-k:].sum()
        pmf = pmf[:-k].copy()
        if pessimistic:
            inf_mass += spill
        else:
            pmf[-1] += spill
    return _DiscretePLD(lo, pmf, inf_mass)


def _convolve(a: _DiscretePLD, b: _DiscretePLD) -> _DiscretePLD:
    pmf = np.clip(signal.fftconvolve(a.pmf, b.pmf), 0.0, None)
    inf_mass = 1.0 - (1.0 - a.inf_mass) * (1.0 - b.inf_mass)
    return _DiscretePLD(a.lo + b.lo, pmf, inf_mass)


def _self_compose(d: _DiscretePLD, steps: int, floor_idx: int, ceil_idx: int, pessimistic: bool) -> _DiscretePLD:
    result = None
    base = d
    while steps:
        if steps & 1:
            result = base if result is None else _truncate(_convolve(result, base), floor_idx, ceil_idx, pessimistic)
        steps >>= 1
        if steps:
            base = _truncate(_convolve(base, base), floor_idx, ceil_idx, pessimistic)
    return result


def _hockey_stick(d: _DiscretePLD, step: float, eps: float) -> float:
    losses = (d.lo + np.arange(len(d.pmf))) * step
    sel = losses > eps
    return d.inf_mass + float(np.sum(d.pmf[sel] * -np.expm1(eps - losses[sel])))


def pld_oracle(
    q: float,
    sigma: float,
    steps: int,
    delta: float,
    loss_step: float = 2e-4,
    pessimistic: bool = True,
    loss_floor: float = -40.0,
    loss_ceil: float = 100.0,
    tail: float = 9.0,
    x_points: int = 400_001,
) -> float:
    """Epsilon at ``delta`` from a discretized privacy loss distribution.

    The one-step loss is discretized on a uniform grid of width
    ``loss_step``; ``pessimistic`` rounds every loss up (an upper bound on
    the true epsilon), otherwise down (a lower bound). The distribution is
    self-convolved ``steps`` times and epsilon is read off the hockey-stick
    divergence; the larger of the add and remove directions is returned.
    """
    if steps > 64:
        raise ConfigurationError("pld_oracle is a verification tool; use steps <= 64")
    if steps == 0 or q == 0:
        return 0.0
    if sigma == 0:
        return math.inf
    floor_idx = int(math.floor(loss_floor / loss_step))
    ceil_idx = int(math.ceil(loss_ceil / loss_step))
    out = 0.0
    for direction in ("remove", "add"):
        one = _single_step_pld(q, sigma, loss_step, direction, pessimistic, tail, x_points)
        if np.count_nonzero(one.pmf) < 4:
            raise ResolutionError("loss grid too coarse for the one-step distribution")
        comp = _self_compose(one, steps, floor_idx, ceil_idx, pessimistic)
        if _hockey_stick(comp, loss_step, 0.0) <= delta:
            continue
        hi = loss_ceil
        if _hockey_stick(comp, loss_step, hi) > delta:
            raise ResolutionError(
                f"delta={delta} not bracketed below loss ceiling {loss_ceil}; raise loss_ceil"
            )
        lo = 0.0
        while hi - lo > 0.1 * loss_step:
            mid = 0.5 * (lo + hi)
            if _hockey_stick(comp, loss_step, mid) > delta:
                lo = mid
            else:
                hi = mid
        out = max(out, hi)
    return out
