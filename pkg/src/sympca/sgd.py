"""Entry-sampled stochastic gradient for the leading eigenvector.

One step observes a cell ``(i, j)`` and applies

    w <- (I + eta * d**2 * A[i, j] * e_i e_j^T) w,   then  w <- w / ||w||,

which changes a single coordinate. The run loops keep vectors unnormalized and
track the norm incrementally (see :mod:`sympca._kernels`).
"""

from __future__ import annotations

import csv
import io
import itertools
import logging
import math
from dataclasses import dataclass, field, fields
from typing import Iterable, List, Optional, Sequence, Union

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_symmetric

from . import _kernels
from .linalg import SymmetricMatrix, _as_array
from .sampler import BLOCK, INIT, EntrySample, EntryStream, RngStream, SampleBuffer

log = logging.getLogger(__name__)

__all__ = [
    "Iterate",
    "TraceRecord",
    "RunResult",
    "DegenerateStepError",
    "sgd_step",
    "dense_step",
    "run_fixed",
    "rayleigh",
    "alignment",
    "ones_unit",
    "random_unit",
    "write_trace",
    "read_trace",
    "EntrySampledPCA",
    "N_RENORM",
    "TRACE_FIELDS",
]

N_RENORM = 1024
DEGENERATE_NORM = 1e-14
TRACE_FIELDS = ("t", "eta", "loss", "rayleigh", "alignment")

STEP_CAP = "step_cap"
TOLERANCE = "tolerance"
DEGENERATE = "degenerate"
EXHAUSTED = "exhausted"


class DegenerateStepError(ArithmeticError):
    """A step annihilated the iterate. ``partial`` holds the run up to that point."""

    def __init__(self, msg: str, partial: Optional["RunResult"] = None):
        super().__init__(msg)
        self.partial = partial


@dataclass(frozen=True)
class Iterate:
    w: np.ndarray
    t: int = 0
    eta: float = 0.0

    def __post_init__(self):
        w = np.array(self.w, dtype=np.float64)
        if abs(np.linalg.norm(w) - 1.0) > 1e-12:
            raise ValueError(f"iterate must be unit norm, got norm {np.linalg.norm(w):.17g}")
        w.setflags(write=False)
        object.__setattr__(self, "w", w)


@dataclass
class TraceRecord:
    """One trace row. ``None`` fields are written as empty CSV cells."""

    t: int
    eta: float
    loss: Optional[float] = None
    rayleigh: Optional[float] = None
    alignment: Optional[float] = None


@dataclass
class RunResult:
    final: Iterate
    trace: List[TraceRecord] = field(default_factory=list)
    stop_reason: str = STEP_CAP
    companion: Optional[Iterate] = None

    @property
    def steps(self) -> int:
        return self.final.t

    @property
    def converged(self) -> bool:
        return self.stop_reason == TOLERANCE


def ones_unit(d: int) -> np.ndarray:
    return np.full(d, 1.0 / math.sqrt(d))


def random_unit(rng: RngStream, d: int) -> np.ndarray:
    """Gaussian direction drawn from the stream's initialisation sub-stream."""
    g = rng.generator(INIT).standard_normal(d)
    return g / np.linalg.norm(g)


def sgd_step(it: Iterate, s: EntrySample, d: int) -> Iterate:
    """One stochastic step from a single observed entry."""
    if not it.eta > 0:
        raise ValueError("eta must be positive")
    w = it.w.copy()
    w[s.i] += it.eta * d * d * s.value * w[s.j]
    nrm = np.linalg.norm(w)
    if nrm < DEGENERATE_NORM:
        raise DegenerateStepError(f"step {it.t + 1}: update annihilated the iterate")
    return Iterate(w / nrm, it.t + 1, it.eta)


def dense_step(w: np.ndarray, s: EntrySample, eta: float, d: int) -> np.ndarray:
    """Reference step: form ``I + eta * A_t`` explicitly, multiply, normalize."""
    At = np.zeros((d, d))
    At[s.i, s.j] = d * d * s.value
    x = (np.eye(d) + eta * At) @ w
    return x / np.linalg.norm(x)


def rayleigh(w: np.ndarray, A) -> float:
    a = _as_array(A)
    w = np.asarray(w, dtype=np.float64)
    return float(w @ a @ w)


def alignment(w: np.ndarray, v: np.ndarray) -> float:
    """``|<w, v>|`` clipped to ``[0, 1]``; the sign of an eigenvector is arbitrary."""
    return float(min(1.0, abs(float(np.dot(w, v)))))


def stability_gain(A) -> float:
    """Largest ``eta * d**2`` for which no single step can flip a coordinate's sign."""
    m = float(np.max(np.abs(_as_array(A))))
    return math.inf if m == 0 else 1.0 / m


class ChainBank:
    """``C`` chains advanced in lockstep, each owning its own sample stream.

    In stored-matrix mode ``source`` is a matrix and chain ``c`` samples from
    ``streams[c]``. In stream mode ``source`` is an iterator of
    :class:`EntrySample` shared by every chain.
    """

    def __init__(self, source, W0: np.ndarray, streams: Optional[Sequence[RngStream]] = None,
                 block: int = BLOCK):
        W0 = np.array(W0, dtype=np.float64, ndmin=2)
        C, d = W0.shape
        self.d = d
        self.t = 0
        self.exhausted = False
        if isinstance(source, (SymmetricMatrix, np.ndarray)):
            self.A = _as_array(source)
            if self.A.shape[0] != d:
                raise ValueError(f"matrix is {self.A.shape[0]}-dimensional, iterates are {d}-dimensional")
            self._flat = np.ascontiguousarray(self.A).ravel()
            if streams is None or len(streams) != C:
                raise ValueError("stored-matrix mode needs one RngStream per chain")
            self._buffers = [SampleBuffer(s, d, block) for s in streams]
            self._stream = None
        else:
            self.A = None
            sd = getattr(source, "d", d)
            if sd != d:
                raise ValueError(f"stream is {sd}-dimensional, iterates are {d}-dimensional")
            self._stream = iter(source)
            self._buffers = None
        self.U = W0.copy()
        self.nrm2 = np.sum(self.U * self.U, axis=1)
        self.ref = self.nrm2.copy()
        self.logscale = np.zeros(C)
        self.status = np.full(C, -1, dtype=np.int64)

    @property
    def n_chains(self) -> int:
        return self.U.shape[0]

    def _draw(self, n: int):
        C = self.n_chains
        if self._buffers is not None:
            idx = np.empty((C, n), dtype=np.int64)
            for c, buf in enumerate(self._buffers):
                idx[c] = buf.take(n)
            return idx, self._flat[idx]
        batch = list(itertools.islice(self._stream, n))
        if len(batch) < n:
            self.exhausted = True
        m = len(batch)
        cells = np.fromiter((s.i * self.d + s.j for s in batch), dtype=np.int64, count=m)
        vals = np.fromiter((s.value for s in batch), dtype=np.float64, count=m)
        return np.broadcast_to(cells, (C, m)).copy(), np.broadcast_to(vals, (C, m)).copy()

    def advance(self, n: int, gains) -> int:
        """Advance all chains ``n`` steps; returns the number actually taken.

        ``gains`` is ``(C,)`` (fixed per chain) or ``(C, n)`` (per step).
        """
        gains = np.asarray(gains, dtype=np.float64)
        per_step = gains.ndim == 2
        if not per_step:
            gains = gains.reshape(-1, 1)
        done = 0
        while done < n:
            m = min(BLOCK, n - done)
            idx, vals = self._draw(m)
            m = idx.shape[1]
            if m == 0:
                break
            g = gains[:, done : done + m] if per_step else gains
            _kernels.advance_chains(
                self.U, self.nrm2, self.ref, self.logscale, idx, vals, np.ascontiguousarray(g),
                self.t, N_RENORM, self.status,
            )
            if np.any(self.status >= 0):
                bad = int(np.argmax(self.status >= 0))
                taken = int(self.status[bad])
                self.t += taken
                return done + taken
            self.t += m
            done += m
            if self.exhausted:
                break
        return done

    def unit(self, c: int = 0) -> np.ndarray:
        u = self.U[c]
        return u / np.linalg.norm(u)

    def units(self) -> np.ndarray:
        return self.U / np.linalg.norm(self.U, axis=1, keepdims=True)

    def log_norms(self) -> np.ndarray:
        """``log ||u_c||`` of the true (unnormalized) vectors."""
        return self.logscale + 0.5 * np.log(np.sum(self.U * self.U, axis=1))


def _as_source(source, d: int):
    if isinstance(source, (SymmetricMatrix, np.ndarray)):
        return source
    if isinstance(source, EntryStream):
        return source
    return EntryStream(d, iter(source))


def run_fixed(
    source,
    w0: Optional[np.ndarray],
    eta: float,
    T: int,
    rng: Optional[RngStream] = None,
    *,
    trace_stride: int = 100,
    v: Optional[np.ndarray] = None,
    companion: Optional[np.ndarray] = None,
    stop_loss: Optional[float] = None,
    stop_alignment: Optional[float] = None,
) -> RunResult:
    """Run ``T`` steps at a fixed rate.

    Args:
        source: Stored matrix or iterable of :class:`EntrySample`.
        w0: Unit initial vector; ``None`` means the normalized all-ones vector.
        eta: Learning rate.
        T: Step cap.
        rng: Sample stream (stored-matrix mode). Defaults to ``RngStream(0)``.
        trace_stride: Steps between trace rows; stop rules are checked on rows.
        v: Reference eigenvector; enables the ``alignment`` column.
        companion: Initial vector of an independent second chain (stream
            ``rng.child(1)``); enables the agreement ``loss`` column.
        stop_loss: Stop once the agreement loss reaches this value.
        stop_alignment: Stop once the alignment with ``v`` reaches this value.

    Raises:
        DegenerateStepError: with the partial result attached.
    """
    if T < 0:
        raise ValueError("T must be nonnegative")
    if eta < 0:
        raise ValueError("eta must be nonnegative")
    if trace_stride < 1:
        raise ValueError("trace_stride must be >= 1")
    rng = rng if rng is not None else RngStream(0)
    if w0 is None:
        if isinstance(source, (SymmetricMatrix, np.ndarray)):
            d = _as_array(source).shape[0]
        else:
            d = source.d
        w0 = ones_unit(d)
    w0 = Iterate(w0).w
    d = w0.size
    source = _as_source(source, d)
    stored = isinstance(source, (SymmetricMatrix, np.ndarray))
    if stored and eta * d * d > stability_gain(source):
        log.warning("eta*d^2=%.3g exceeds the no-sign-flip bound %.3g", eta * d * d, stability_gain(source))
    starts = [w0]
    streams = [rng]
    if companion is not None:
        starts.append(Iterate(companion).w)
        streams.append(rng.child(1))
    bank = ChainBank(source, np.vstack(starts), streams if stored else None)
    a = _as_array(source) if stored else None
    gains = np.full(bank.n_chains, eta * d * d)

    trace: List[TraceRecord] = []

    def record():
        w = bank.unit(0)
        loss = alignment(w, bank.unit(1)) if companion is not None else None
        rq = rayleigh(w, a) if a is not None else None
        al = alignment(w, v) if v is not None else None
        trace.append(TraceRecord(bank.t, eta, loss, rq, al))
        return loss, al

    def result(reason):
        comp = Iterate(bank.unit(1), bank.t, eta) if companion is not None else None
        return RunResult(Iterate(bank.unit(0), bank.t, eta), trace, reason, comp)

    loss, al = record()
    reason = STEP_CAP
    while True:
        if (stop_loss is not None and loss is not None and loss >= stop_loss) or (
            stop_alignment is not None and al is not None and al >= stop_alignment
        ):
            reason = TOLERANCE
            break
        if bank.t >= T:
            break
        n = min(trace_stride, T - bank.t)
        taken = bank.advance(n, gains)
        if np.any(bank.status >= 0):
            record()
            raise DegenerateStepError(
                f"step {bank.t + 1}: update annihilated the iterate", result(DEGENERATE)
            )
        if taken < n or (bank.exhausted and taken == 0):
            if taken:
                record()
            reason = EXHAUSTED
            break
        loss, al = record()
    return result(reason)


def _fmt(x) -> str:
    if x is None:
        return ""
    if isinstance(x, str):
        return x
    if isinstance(x, (bool, np.bool_)):
        return "true" if x else "false"
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    return repr(float(x))


def write_trace(dest, records: Iterable, columns: Sequence[str] = TRACE_FIELDS) -> None:
    """Write trace rows as CSV. ``dest`` is a path or a text file object."""
    own = isinstance(dest, (str, bytes)) or hasattr(dest, "__fspath__")
    fh = open(dest, "w", newline="") if own else dest
    try:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for r in records:
            w.writerow([_fmt(getattr(r, c)) for c in columns])
    finally:
        if own:
            fh.close()


def read_trace(path) -> List[dict]:
    """Read a trace CSV; numeric cells become floats (``t`` int), empty cells ``None``."""
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    out = []
    for row in rows:
        parsed = {}
        for k, val in row.items():
            if val is None or val == "":
                parsed[k] = None
            elif k in ("t", "k"):
                parsed[k] = int(val)
            else:
                try:
                    parsed[k] = float(val)
                except ValueError:
                    parsed[k] = val
        out.append(parsed)
    return out


class EntrySampledPCA(TransformerMixin, BaseEstimator):
    """Leading eigenvector of a symmetric matrix from uniformly sampled entries.

    Parameters
    ----------
    eta : float
        Learning rate. With ``rate_unit="gain"`` the value is ``eta * d**2``,
        the multiplier applied to an observed entry.
    n_steps : int
        Step cap.
    rate_unit : {"absolute", "gain"}
    init : {"ones", "random"} or array of shape (d,)
    trace_stride : int
    stop_agreement : float or None
        If set, runs a companion chain and stops when the two agree to this level.
    random_state : int
    """

    def __init__(self, eta=1e-3, n_steps=100_000, rate_unit="absolute", init="ones",
                 trace_stride=100, stop_agreement=None, random_state=0):
        self.eta = eta
        self.n_steps = n_steps
        self.rate_unit = rate_unit
        self.init = init
        self.trace_stride = trace_stride
        self.stop_agreement = stop_agreement
        self.random_state = random_state

    def _rate(self, d):
        if self.rate_unit == "gain":
            return self.eta / (d * d)
        if self.rate_unit == "absolute":
            return self.eta
        raise ValueError(f"rate_unit must be 'absolute' or 'gain', got {self.rate_unit!r}")

    def fit(self, X, y=None):
        """Fit on a symmetric matrix or an :class:`EntryStream`."""
        if isinstance(X, EntryStream):
            source, d = X, X.d
        else:
            if isinstance(X, SymmetricMatrix):
                X = X.dense
            X = check_array(X, dtype=np.float64, ensure_min_samples=1)
            if X.shape[0] != X.shape[1]:
                raise ValueError(f"expected a square matrix, got shape {X.shape}")
            source = SymmetricMatrix(check_symmetric(X, raise_exception=True))
            d = source.d
        rng = RngStream(int(self.random_state))
        if isinstance(self.init, str):
            if self.init == "ones":
                w0 = ones_unit(d)
            elif self.init == "random":
                w0 = random_unit(rng, d)
            else:
                raise ValueError(f"unknown init {self.init!r}")
        else:
            w0 = np.asarray(self.init, dtype=np.float64)
        companion = random_unit(rng.child(1), d) if self.stop_agreement is not None else None
        res = run_fixed(source, w0, self._rate(d), int(self.n_steps), rng,
                        trace_stride=int(self.trace_stride), companion=companion,
                        stop_loss=self.stop_agreement)
        w = res.final.w
        self.components_ = w.reshape(1, -1).copy()
        self.eigenvalue_ = rayleigh(w, source) if not isinstance(source, EntryStream) else None
        self.n_steps_ = res.steps
        self.stop_reason_ = res.stop_reason
        self.trace_ = res.trace
        self.n_features_in_ = d
        return self

    def transform(self, X):
        check_is_fitted(self, "components_")
        X = check_array(X, dtype=np.float64)
        return X @ self.components_.T
