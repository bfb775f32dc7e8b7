"""Learning-rate selection by exponential weights over a grid of rates.

During burn-in, ``R`` independent chains run at each of ``K`` candidate rates.
Every ``check_period`` steps, each rate is scored by how well its chains agree
(mean ``|<w_r, w_r'>|`` over pairs) and its weight is multiplied by
``exp(beta * score)``. Burn-in ends when some rate agrees to ``1 - 10 eps``.
After that, each step uses a rate drawn from the normalized weights, and the
run stops at agreement ``1 - eps``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import List, Optional, Sequence

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_symmetric

from . import _kernels
from .linalg import SymmetricMatrix, _as_array
from .sampler import BLOCK, RATES, EntryStream, RngStream
from .sgd import (
    DEGENERATE,
    STEP_CAP,
    TOLERANCE,
    ChainBank,
    DegenerateStepError,
    Iterate,
    RunResult,
    TraceRecord,
    alignment,
    random_unit,
    rayleigh,
)

__all__ = [
    "HedgeConfig",
    "HedgeState",
    "TuneRecord",
    "TUNE_FIELDS",
    "pairwise_loss",
    "default_beta",
    "weights_update",
    "burn_in",
    "finalize",
    "post_burn_in_run",
    "default_grid",
    "HedgeTunedPCA",
]

TUNE_FIELDS = ("t", "eta", "loss", "rayleigh", "alignment", "phase", "k", "L_k", "pi_k")
BURN_IN = "burn_in"
POST = "post"


@dataclass
class TuneRecord(TraceRecord):
    phase: str = BURN_IN
    k: Optional[int] = None
    L_k: Optional[float] = None
    pi_k: Optional[float] = None


def default_grid() -> np.ndarray:
    """``2^-3, 2^-2, ..., 2^17`` (21 values)."""
    return 2.0 ** np.arange(-3, 18)


@dataclass
class HedgeConfig:
    """Tuner settings.

    Attributes:
        eps: Tolerance; burn-in stops at agreement ``1 - 10 eps``, the final run at ``1 - eps``.
        R: Chains per rate during burn-in (>= 2).
        K: Grid size when ``rates`` is not given.
        rho: Grid ratio; the default grid is ``rho^k`` for ``k = 1..K``.
        rates: Explicit rate list overriding ``rho``/``K``.
        beta: Weight-update parameter; ``None`` uses :func:`default_beta`.
        B_max: Burn-in step cap.
        check_period: Steps between loss evaluations; ``None`` never evaluates.
        max_steps: Overall step cap (burn-in included) for the final run.
        phase2: ``"pair"`` keeps two chains; ``"lagged"`` keeps one and compares
            it with itself ``check_period`` steps earlier.
        rate_draw: ``"per_step"`` redraws the rate every step; ``"once"`` draws it at
            the start of the final run.
        trace_stride: Steps between trace rows (rounded up to a multiple of
            ``check_period``); ``None`` means every 20 checks.
    """

    eps: float = 0.05
    R: int = 4
    K: int = 20
    rho: float = 0.5
    rates: Optional[Sequence[float]] = None
    beta: Optional[float] = None
    B_max: int = 1_000_000
    check_period: Optional[int] = 50
    max_steps: int = 10_000_000
    phase2: str = "pair"
    rate_draw: str = "per_step"
    trace_stride: Optional[int] = None

    def __post_init__(self):
        if not 0.0 < self.eps < 1.0:
            raise ValueError("eps must lie in (0, 1)")
        if self.R < 2:
            raise ValueError("R must be >= 2")
        if self.rates is None:
            if self.K < 1:
                raise ValueError("K must be >= 1")
            if not 0.0 < self.rho < 1.0:
                raise ValueError("rho must lie in (0, 1)")
        else:
            r = np.asarray(self.rates, dtype=np.float64)
            if r.ndim != 1 or r.size < 1 or np.any(~(r > 0)):
                raise ValueError("rates must be a non-empty list of positive values")
        if self.beta is not None and not self.beta >= 0:
            raise ValueError("beta must be nonnegative")
        if self.B_max < 0 or self.max_steps < 0:
            raise ValueError("step caps must be nonnegative")
        if self.check_period is not None and self.check_period < 1:
            raise ValueError("check_period must be >= 1 or None")
        if self.phase2 not in ("pair", "lagged"):
            raise ValueError(f"unknown phase2 {self.phase2!r}")
        if self.rate_draw not in ("per_step", "once"):
            raise ValueError(f"unknown rate_draw {self.rate_draw!r}")

    def grid(self) -> np.ndarray:
        if self.rates is not None:
            return np.asarray(self.rates, dtype=np.float64).copy()
        return self.rho ** np.arange(1, self.K + 1, dtype=np.float64)

    def resolved_beta(self) -> float:
        """Explicit ``beta``, else ``sqrt(log K / n)`` with ``n`` the number of weight updates ``B_max`` allows."""
        if self.beta is not None:
            return float(self.beta)
        rounds = max(1, self.B_max // self.check_period) if self.check_period else 1
        return default_beta(self.grid().size, rounds)


@dataclass
class HedgeState:
    rates: np.ndarray
    R: int
    bank: ChainBank
    streams: List[RngStream]
    log_pi: np.ndarray
    t: int = 0
    phase: str = BURN_IN
    losses: Optional[np.ndarray] = None
    B: int = 0
    complete: bool = False
    trace: List[TuneRecord] = field(default_factory=list)
    pi: Optional[np.ndarray] = None
    selected: Optional[int] = None
    v: Optional[np.ndarray] = None

    @property
    def K(self) -> int:
        return self.rates.size

    def weights(self) -> np.ndarray:
        """Current weights normalized to sum to one."""
        z = self.log_pi - np.max(self.log_pi)
        w = np.exp(z)
        return w / math.fsum(w)

    def chain(self, k: int, r: int) -> np.ndarray:
        return self.bank.unit(k * self.R + r)


def pairwise_loss(iterates) -> float:
    """Mean ``|<w_r, w_r'>|`` over the unordered pairs of unit vectors."""
    W = np.asarray(iterates, dtype=np.float64)
    R = W.shape[0]
    if R < 2:
        raise ValueError("pairwise loss needs at least two iterates")
    G = np.abs(W @ W.T)
    iu = np.triu_indices(R, 1)
    return float(min(1.0, math.fsum(G[iu]) / iu[0].size))


def default_beta(K: int, B: int) -> float:
    """``sqrt(log(K) / B)``; zero for a single rate."""
    if K < 1 or B < 1:
        raise ValueError("K and B must be >= 1")
    if K == 1:
        return 0.0
    return math.sqrt(math.log(K) / B)


def weights_update(pi, losses, beta: float) -> np.ndarray:
    """``pi_k * exp(beta * L_k)``, left unnormalized."""
    pi = np.asarray(pi, dtype=np.float64)
    if np.any(~(pi > 0)):
        raise ValueError("weights must be positive")
    return np.exp(np.log(pi) + beta * np.asarray(losses, dtype=np.float64))


def _source_dim(source) -> int:
    if isinstance(source, (SymmetricMatrix, np.ndarray)):
        return _as_array(source).shape[0]
    return source.d


def _stored(source) -> bool:
    return isinstance(source, (SymmetricMatrix, np.ndarray))


def _group_losses(bank: ChainBank, K: int, R: int) -> np.ndarray:
    return np.minimum(_kernels.group_agreement(bank.U, bank.nrm2, K, R), 1.0)


def burn_in(cfg: HedgeConfig, source, w0: Optional[np.ndarray] = None,
            rng: Optional[RngStream] = None, v: Optional[np.ndarray] = None) -> HedgeState:
    """Run the ``K x R`` chains until some rate agrees to ``1 - 10 eps`` or ``B_max`` steps.

    Chain ``(k, r)`` samples from stream ``rng.child(k * R + r)``. Chains start
    from independent random directions unless ``w0`` is given, in which case
    they all start there (and agree perfectly at ``t = 0``).
    ``state.complete`` is ``False`` when the cap was hit first.

    Args:
        v: Optional reference eigenvector for the trace's alignment column.
    """
    rng = rng if rng is not None else RngStream(0)
    d = _source_dim(source)
    rates = cfg.grid()
    K, R = rates.size, cfg.R
    streams = [rng.child(c) for c in range(K * R)]
    if w0 is None:
        W0 = np.vstack([random_unit(s, d) for s in streams])
    else:
        W0 = np.tile(Iterate(w0).w, (K * R, 1))
    bank = ChainBank(source, W0, streams if _stored(source) else None)
    state = HedgeState(rates, R, bank, streams, np.full(K, -math.log(K)), v=v)
    gains = np.repeat(rates * d * d, R)
    beta = cfg.resolved_beta()
    threshold = 1.0 - 10.0 * cfg.eps
    tau = cfg.check_period
    stride = None if tau is None else _stride(cfg, tau)

    if tau is None:
        bank.advance(cfg.B_max, gains)
        _raise_if_degenerate(bank)
        state.t = state.B = bank.t
        state.losses = _group_losses(bank, K, R)
        _burn_in_rows(state)
        return state

    while bank.t < cfg.B_max:
        bank.advance(min(tau, cfg.B_max - bank.t), gains)
        _raise_if_degenerate(bank)
        state.losses = _group_losses(bank, K, R)
        state.log_pi = state.log_pi + beta * state.losses
        hit = bool(np.max(state.losses) >= threshold)
        if hit or bank.t % stride == 0 or bank.t >= cfg.B_max:
            _burn_in_rows(state)
        if hit:
            state.complete = True
            break
        if bank.exhausted:
            break
    state.t = state.B = bank.t
    if state.losses is None:
        state.losses = _group_losses(bank, K, R)
    return state


def _stride(cfg: HedgeConfig, tau: int) -> int:
    if cfg.trace_stride is None:
        return 20 * tau
    return tau * max(1, -(-cfg.trace_stride // tau))


def _raise_if_degenerate(bank: ChainBank):
    if np.any(bank.status >= 0):
        c = int(np.argmax(bank.status >= 0))
        raise DegenerateStepError(f"chain {c} degenerated at step {bank.t + 1}")


def _burn_in_rows(state: HedgeState):
    pi = state.weights()
    for k in range(state.K):
        al = alignment(state.chain(k, 0), state.v) if state.v is not None else None
        state.trace.append(TuneRecord(state.bank.t, float(state.rates[k]), None, None, al,
                                      BURN_IN, k, float(state.losses[k]), float(pi[k])))


def finalize(state: HedgeState) -> HedgeState:
    """Normalize the weights, pick the highest-weight rate and enter the final phase."""
    pi = state.weights()
    return replace(state, pi=pi, selected=int(np.argmax(pi)), phase=POST)


class _RateDraws:
    """Rate indices drawn from ``pi`` in fixed-size blocks, one stream per chain."""

    def __init__(self, stream: RngStream, pi: np.ndarray):
        self._gen = stream.generator(RATES)
        self._cdf = np.cumsum(pi)
        self._cdf[-1] = 1.0
        self._buf = np.empty(0, dtype=np.int64)
        self._pos = 0

    def take(self, n: int) -> np.ndarray:
        out = np.empty(n, dtype=np.int64)
        filled = 0
        while filled < n:
            if self._pos == self._buf.size:
                u = self._gen.random(BLOCK)
                self._buf = np.searchsorted(self._cdf, u, side="right").astype(np.int64)
                np.minimum(self._buf, self._cdf.size - 1, out=self._buf)
                self._pos = 0
            m = min(n - filled, self._buf.size - self._pos)
            out[filled : filled + m] = self._buf[self._pos : self._pos + m]
            self._pos += m
            filled += m
        return out


def post_burn_in_run(state: HedgeState, cfg: HedgeConfig, rng: Optional[RngStream] = None) -> RunResult:
    """Continue from a finalized state with rates drawn from the burn-in weights.

    Keeps chains ``(k*, 0)`` and ``(k*, 1)`` of the highest-weight rate ``k*``
    (only the first with ``phase2="lagged"``) and stops once their agreement
    reaches ``1 - eps`` or the overall step count reaches ``cfg.max_steps``.
    The returned trace contains only rows of this phase; ``state.trace`` gets
    them appended as :class:`TuneRecord`.

    Args:
        rng: Stream for the single draw of ``rate_draw="once"``.
    """
    if state.pi is None:
        raise ValueError("state must be finalized first")
    rng = rng if rng is not None else RngStream(0)
    bank = state.bank
    d = bank.d
    k_star = state.selected
    keep = [k_star * state.R, k_star * state.R + 1] if cfg.phase2 == "pair" else [k_star * state.R]
    sub = ChainBank.__new__(ChainBank)
    sub.__dict__.update(bank.__dict__)
    sub.U = bank.U[keep].copy()
    sub.nrm2 = bank.nrm2[keep].copy()
    sub.ref = bank.ref[keep].copy()
    sub.logscale = bank.logscale[keep].copy()
    sub.status = bank.status[keep].copy()
    if bank._buffers is not None:
        sub._buffers = [bank._buffers[c] for c in keep]
    pi = state.pi
    draws = [_RateDraws(state.streams[c], pi) for c in keep]
    fixed_k = None
    if cfg.rate_draw == "once":
        fixed_k = int(np.searchsorted(np.cumsum(pi), rng.generator(RATES).random(), side="right"))
        fixed_k = min(fixed_k, pi.size - 1)
    a = bank.A
    v = state.v
    threshold = 1.0 - cfg.eps
    tau = cfg.check_period or 50
    stride = _stride(cfg, tau)
    trace: List[TraceRecord] = []
    last_k = fixed_k if fixed_k is not None else k_star
    lag_prev = sub.unit(0)

    def loss_now():
        if cfg.phase2 == "pair":
            return alignment(sub.unit(0), sub.unit(1))
        return alignment(sub.unit(0), lag_prev)

    def record(loss):
        w = sub.unit(0)
        rq = rayleigh(w, a) if a is not None else None
        al = alignment(w, v) if v is not None else None
        row = TuneRecord(sub.t, float(state.rates[last_k]), loss, rq, al, POST, int(last_k), None,
                         float(pi[last_k]))
        trace.append(row)
        state.trace.append(row)

    loss = loss_now() if cfg.phase2 == "pair" else None
    record(loss)
    reason = STEP_CAP
    while True:
        if loss is not None and loss >= threshold:
            reason = TOLERANCE
            break
        if sub.t >= cfg.max_steps or (sub.exhausted and sub.t > 0):
            break
        n = min(tau, cfg.max_steps - sub.t)
        if fixed_k is not None:
            gains = np.full(len(keep), state.rates[fixed_k] * d * d)
        else:
            ks = np.vstack([dr.take(n) for dr in draws])
            gains = state.rates[ks] * d * d
            last_k = int(ks[0, -1])
        lag_prev = sub.unit(0)
        taken = sub.advance(n, gains)
        if np.any(sub.status >= 0):
            record(None)
            raise DegenerateStepError(f"final-phase chain degenerated at step {sub.t + 1}",
                                      _post_result(sub, trace, DEGENERATE, state, last_k))
        if taken == 0:
            break
        loss = loss_now()
        if loss >= threshold or sub.t % stride == 0 or sub.t >= cfg.max_steps:
            record(loss)
    state.t = sub.t
    return _post_result(sub, trace, reason, state, last_k)


def _post_result(sub, trace, reason, state, last_k) -> RunResult:
    eta = float(state.rates[last_k])
    comp = Iterate(sub.unit(1), sub.t, eta) if sub.n_chains > 1 else None
    return RunResult(Iterate(sub.unit(0), sub.t, eta), trace, reason, comp)


class HedgeTunedPCA(TransformerMixin, BaseEstimator):
    """Leading eigenvector with the learning rate chosen online by exponential weights.

    Parameters mirror :class:`HedgeConfig`; ``rates`` are interpreted in
    ``rate_unit`` (``"gain"`` means ``eta * d**2``). ``None`` rates uses the grid
    ``2^-3 .. 2^17`` in gain units.
    """

    def __init__(self, rates=None, rate_unit="gain", eps=0.05, R=4, beta=None, B_max=1_000_000,
                 check_period=50, max_steps=10_000_000, phase2="pair", rate_draw="per_step",
                 trace_stride=None, random_state=0):
        self.rates = rates
        self.rate_unit = rate_unit
        self.eps = eps
        self.R = R
        self.beta = beta
        self.B_max = B_max
        self.check_period = check_period
        self.max_steps = max_steps
        self.phase2 = phase2
        self.rate_draw = rate_draw
        self.trace_stride = trace_stride
        self.random_state = random_state

    def fit(self, X, y=None):
        if isinstance(X, EntryStream):
            source, d = X, X.d
        else:
            if isinstance(X, SymmetricMatrix):
                X = X.dense
            X = check_array(X, dtype=np.float64)
            if X.shape[0] != X.shape[1]:
                raise ValueError(f"expected a square matrix, got shape {X.shape}")
            source = SymmetricMatrix(check_symmetric(X, raise_exception=True))
            d = source.d
        grid = default_grid() if self.rates is None else np.asarray(self.rates, dtype=np.float64)
        if self.rate_unit == "gain":
            grid = grid / (d * d)
        elif self.rate_unit != "absolute":
            raise ValueError(f"rate_unit must be 'absolute' or 'gain', got {self.rate_unit!r}")
        cfg = HedgeConfig(eps=self.eps, R=self.R, rates=grid, beta=self.beta, B_max=self.B_max,
                          check_period=self.check_period, max_steps=self.max_steps,
                          phase2=self.phase2, rate_draw=self.rate_draw, trace_stride=self.trace_stride)
        rng = RngStream(int(self.random_state))
        state = finalize(burn_in(cfg, source, rng=rng))
        res = post_burn_in_run(state, cfg, rng=rng.child(state.K * cfg.R))
        w = res.final.w
        self.components_ = w.reshape(1, -1).copy()
        self.rates_ = state.rates
        self.weights_ = state.pi
        self.selected_rate_ = float(state.rates[state.selected])
        self.burn_in_steps_ = state.B
        self.burn_in_complete_ = state.complete
        self.n_steps_ = res.steps
        self.converged_ = res.converged
        self.trace_ = state.trace
        self.n_features_in_ = d
        return self

    def transform(self, X):
        check_is_fitted(self, "components_")
        X = check_array(X, dtype=np.float64)
        return X @ self.components_.T
