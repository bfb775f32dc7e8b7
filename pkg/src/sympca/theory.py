"""Exact and Monte Carlo evaluation of the expected-progress quantities.

For a horizon ``T`` the random matrix

    B_T = F_T^T ((1 - eps) I - A) F_T,   F_T = (I + eta A_1) ... (I + eta A_T),

measures progress of the iteration started at ``w0`` through ``V_T = w0^T B_T w0``.
Its expectation obeys a closed linear recurrence, which :func:`propagate_ebt`
runs exactly; :func:`brute_force_ebt` averages over every sample sequence and
:func:`estimate_evt` samples trajectories, so the three can check one another.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from typing import Dict, Iterator, List, Optional, Tuple

import numpy as np

from . import _kernels
from .linalg import MatrixLike, _as_array, eig_all, norm_1to2, operator_norm
from .sampler import BLOCK, RngStream
from .sgd import ChainBank

__all__ = [
    "TheoremParams",
    "PropagatedMoment",
    "BoundReport",
    "PreconditionError",
    "theorem_params",
    "theorem_bound",
    "log_growth",
    "propagate_ebt",
    "iterate_ebt",
    "brute_force_ebt",
    "estimate_evt",
    "check_esd",
    "esd_enumerate",
    "check_lk",
    "norm_diag_coefficients",
    "uniform_diag_bound",
    "check_norm_system",
    "certify_theorem",
    "BRUTE_FORCE_LIMIT",
]

BRUTE_FORCE_LIMIT = 10**6
_LN2 = math.log(2.0)
_RESCALE_BITS = 512


class PreconditionError(ValueError):
    """Inputs fall outside the hypotheses being certified."""


@dataclass(frozen=True)
class TheoremParams:
    eps: float
    p: float
    d: int
    eta: float
    T: int
    C: float = 1.0

    @property
    def thresholds(self) -> Tuple[float, float]:
        cpd2 = self.C * self.p * self.d**2
        first = 4.0 * self.p**2 * self.d**2 * self.C / self.eps
        second = math.log(4.0 * self.p / self.eps) / math.log1p(self.eps / cpd2)
        return first, second


@dataclass(frozen=True)
class BoundReport:
    """Outcome of one inequality ``lhs <= rhs`` (within ``slack``)."""

    name: str
    lhs: float
    rhs: float
    satisfied: bool
    params: Dict[str, object] = field(default_factory=dict)

    @classmethod
    def check(cls, name, lhs, rhs, params=None, slack=None) -> "BoundReport":
        lhs, rhs = float(lhs), float(rhs)
        if slack is None:
            slack = 1e-12 * max(1.0, abs(rhs))
        ok = bool(lhs <= rhs + slack)
        return cls(name, lhs, rhs, ok, dict(params or {}))

    def params_str(self) -> str:
        return ";".join(f"{k}={_fmt_param(v)}" for k, v in self.params.items())


def _fmt_param(v) -> str:
    if isinstance(v, float):
        return repr(v)
    return str(v)


@dataclass(frozen=True)
class PropagatedMoment:
    """``E[B_t] = exp(log_scale) * scaled`` (the scale keeps long horizons finite)."""

    scaled: np.ndarray
    log_scale: float
    t: int
    eps: float
    eta: float

    @property
    def value(self) -> np.ndarray:
        return self.scaled * math.exp(self.log_scale)

    def quadratic_scaled(self, w) -> float:
        w = np.asarray(w, dtype=np.float64)
        return float(w @ self.scaled @ w)

    def quadratic(self, w) -> float:
        """``w^T E[B_t] w``."""
        return self.quadratic_scaled(w) * math.exp(self.log_scale)


def theorem_params(eps: float, p: float, d: int, C: float = 1.0) -> TheoremParams:
    """Rate ``eps / (4 C p d^2)`` and the smallest integer horizon above the threshold as ``ceil + 1``."""
    if not 0.0 < eps < 1.0:
        raise ValueError("eps must lie in (0, 1)")
    if p < 1.0:
        raise ValueError("p must be >= 1")
    if d < 1:
        raise ValueError("d must be >= 1")
    if C <= 0:
        raise ValueError("C must be positive")
    eta = eps / (4.0 * C * p * d * d)
    probe = TheoremParams(eps, p, d, eta, 0, C)
    T = int(math.ceil(max(probe.thresholds))) + 1
    return TheoremParams(eps, p, d, eta, T, C)


def log_growth(eta: float, T: int) -> float:
    """``log((1 + 2 eta)^T)``."""
    return T * math.log1p(2.0 * eta)


def theorem_bound(tp: TheoremParams) -> float:
    """``-(eps / 4p) (1 + 2 eta)^T`` evaluated through logarithms."""
    if tp.eta == 0:
        return -tp.eps / (4.0 * tp.p)
    x = math.log(tp.eps / (4.0 * tp.p)) + log_growth(tp.eta, tp.T)
    return -math.exp(x) if x < 709.0 else -math.inf


def _b0(a: np.ndarray, eps: float) -> np.ndarray:
    return (1.0 - eps) * np.eye(a.shape[0]) - a


def _step(B: np.ndarray, a: np.ndarray, a2: np.ndarray, eta: float, d2: float) -> np.ndarray:
    S = a @ B
    out = B + eta * (S + S.T)
    out[np.diag_indices_from(out)] += eta * eta * d2 * (a2 @ np.diag(B))
    return out


def iterate_ebt(A: MatrixLike, eps: float, eta: float, T: int) -> Iterator[PropagatedMoment]:
    """Yield ``E[B_t]`` for ``t = 0..T`` by stepping the recurrence.

    Rescaling is by powers of two only, so it introduces no rounding.
    """
    a = _as_array(A)
    d = a.shape[0]
    a2 = a * a
    d2 = float(d * d)
    B = _b0(a, eps)
    log_scale = 0.0
    yield PropagatedMoment(B.copy(), 0.0, 0, eps, eta)
    for t in range(1, T + 1):
        B = _step(B, a, a2, eta, d2)
        if np.max(np.abs(B)) > 2.0**_RESCALE_BITS:
            B *= 2.0**-_RESCALE_BITS
            log_scale += _RESCALE_BITS * _LN2
        yield PropagatedMoment(B.copy(), log_scale, t, eps, eta)


def _superoperator(a: np.ndarray, eta: float) -> np.ndarray:
    """Matrix of ``B -> E[(I + eta A_t)^T B (I + eta A_t)]`` on row-major ``vec(B)``."""
    d = a.shape[0]
    eye = np.eye(d)
    L = np.eye(d * d) + eta * (np.kron(a, eye) + np.kron(eye, a))
    diag_idx = np.arange(d) * (d + 1)
    L[np.ix_(diag_idx, diag_idx)] += eta * eta * d * d * (a * a)
    return L


def _power_apply(L: np.ndarray, x: np.ndarray, T: int, shift: float) -> Tuple[np.ndarray, float]:
    """``L^T x`` as ``(y, log_scale)`` with ``L^T x = exp(log_scale) y``, via repeated squaring."""
    c = math.exp(-shift)
    P = L * c
    log_p = 0.0
    y = x.copy()
    log_y = T * shift
    while T:
        if T & 1:
            y = P @ y
            log_y += log_p
            m = np.max(np.abs(y))
            if m > 0:
                e = math.frexp(m)[1]
                y = np.ldexp(y, -e)
                log_y += e * _LN2
        T >>= 1
        if T:
            P = P @ P
            log_p *= 2.0
            m = np.max(np.abs(P))
            if m > 0:
                e = math.frexp(m)[1]
                P = np.ldexp(P, -e)
                log_p += e * _LN2
    return y, log_y


def propagate_ebt(A: MatrixLike, eps: float, eta: float, T: int, method: str = "auto") -> PropagatedMoment:
    """Exact ``E[B_T]`` from ``B_0 = (1 - eps) I - A``.

    Args:
        method: ``"step"`` runs the recurrence ``T`` times (O(d^3 T));
            ``"power"`` applies the ``d^2 x d^2`` linear map by repeated squaring
            (O(d^6 log T)); ``"auto"`` picks the cheaper.
    """
    if T < 0:
        raise ValueError("T must be nonnegative")
    a = _as_array(A)
    d = a.shape[0]
    if method == "auto":
        method = "step" if (T * d**3 <= 4 * d**6 * max(1, T.bit_length()) or d > 40) else "power"
    if method == "step":
        for m in iterate_ebt(a, eps, eta, T):
            pass
        return m
    if method != "power":
        raise ValueError(f"unknown method {method!r}")
    L = _superoperator(a, eta)
    y, log_y = _power_apply(L, _b0(a, eps).ravel(), T, math.log1p(2.0 * eta))
    B = y.reshape(d, d)
    B = 0.5 * (B + B.T)
    return PropagatedMoment(B, log_y, T, eps, eta)


def brute_force_ebt(A: MatrixLike, eps: float, eta: float, T: int) -> np.ndarray:
    """Average ``B_T`` over all ``d^(2T)`` equally likely sample sequences.

    Raises:
        ValueError: if the enumeration exceeds ``BRUTE_FORCE_LIMIT`` sequences.
    """
    a = _as_array(A)
    d = a.shape[0]
    n_seq = (d * d) ** T
    if n_seq > BRUTE_FORCE_LIMIT:
        raise ValueError(
            f"brute force over {n_seq:.3g} sequences (d={d}, T={T}) exceeds the limit of "
            f"{BRUTE_FORCE_LIMIT:.0e}; cost ~{n_seq * T * d**3:.3g} flops"
        )
    eye = np.eye(d)
    factors = np.empty((d * d, d, d))
    for c in range(d * d):
        i, j = divmod(c, d)
        At = np.zeros((d, d))
        At[i, j] = d * d * a[i, j]
        factors[c] = eye + eta * At
    seq = np.arange(n_seq)
    F = np.broadcast_to(eye, (n_seq, d, d)).copy()
    for t in range(T):
        cell = (seq // (d * d) ** t) % (d * d)
        F = F @ factors[cell]
    Bs = np.transpose(F, (0, 2, 1)) @ _b0(a, eps) @ F
    out = np.empty((d, d))
    for i, j in itertools.product(range(d), range(d)):
        out[i, j] = math.fsum(Bs[:, i, j]) / n_seq
    return out


def estimate_evt(A: MatrixLike, w0, eps: float, eta: float, T: int, M: int = 1000,
                 rng: Optional[RngStream] = None, batch: int = 256) -> Tuple[float, float]:
    """Monte Carlo mean and standard error of ``V_T`` over ``M`` independent trajectories.

    Trial ``m`` draws from stream ``rng.child(m)``, so the result does not depend
    on the batch size. Vectors stay unnormalized, with a tracked log scale.
    """
    if M < 2:
        raise ValueError("need at least two trials")
    a = _as_array(A)
    d = a.shape[0]
    w0 = np.asarray(w0, dtype=np.float64)
    rng = rng if rng is not None else RngStream(0)
    gain = eta * d * d
    values = np.empty(M)
    for start in range(0, M, batch):
        n = min(batch, M - start)
        bank = ChainBank(a, np.tile(w0, (n, 1)), [rng.child(start + k) for k in range(n)],
                         block=max(1, min(BLOCK, T)))
        bank.advance(T, np.full(n, gain))
        U = bank.U
        quad = (1.0 - eps) * np.sum(U * U, axis=1) - np.einsum("ci,ij,cj->c", U, a, U)
        values[start : start + n] = np.exp(2.0 * bank.logscale) * quad
    mean = math.fsum(values) / M
    var = math.fsum((values - mean) ** 2) / (M - 1)
    return mean, math.sqrt(var / M)


def esd_enumerate(A: MatrixLike, X) -> np.ndarray:
    """``E[A_t^T X A_t]`` by explicit enumeration of the ``d^2`` cells."""
    a = _as_array(A)
    x = np.asarray(X, dtype=np.float64)
    d = a.shape[0]
    total = np.zeros((d, d))
    for i in range(d):
        for j in range(d):
            At = np.zeros((d, d))
            At[i, j] = d * d * a[i, j]
            total += At.T @ x @ At
    return total / (d * d)


def check_esd(A: MatrixLike, X, tol: float = 1e-12) -> BoundReport:
    """Compare enumeration against ``d^2 diag(A diag(X) A)``; lhs is the max abs residual."""
    a = _as_array(A)
    x = np.asarray(X, dtype=np.float64)
    d = a.shape[0]
    lhs = esd_enumerate(a, x)
    rhs = d * d * np.diag(np.diag(a @ np.diag(np.diag(x)) @ a))
    scale = max(1.0, float(np.max(np.abs(rhs))))
    return BoundReport.check("esd", np.max(np.abs(lhs - rhs)), tol * scale, {"d": d}, slack=0.0)


def check_lk(eta: float, eps: float, T: int, n_grid: int = 100_000) -> BoundReport:
    """Grid maximum of ``(1 + 2 eta s)^T (1 - eps - s)`` on ``[0, 1]`` against the closed-form cap.

    Both sides are compared after dividing by ``(1 + 2 eta)^T`` so large ``T`` stays finite.
    """
    if not 0.0 < eta < 1.0:
        raise ValueError("eta must lie in (0, 1)")
    if eps <= 0:
        raise ValueError("eps must be positive")
    s = np.linspace(0.0, 1.0, n_grid)
    s_c = (T * (1.0 - eps) - 1.0 / (2.0 * eta)) / (T + 1)
    if 0.0 <= s_c <= 1.0:
        s = np.append(s, s_c)
    top = T * math.log1p(2.0 * eta)
    f_scaled = np.exp(T * np.log1p(2.0 * eta * s) - top) * (1.0 - eps - s)
    fmax_scaled = float(np.max(f_scaled))
    bound_scaled = math.exp(-top) + math.exp(T * math.log1p(2.0 * eta * (1.0 - eps)) - top) / (eta * (T + 1))
    params = {"eta": eta, "eps": eps, "T": T, "s_c": s_c}
    rep = BoundReport.check("lk", fmax_scaled, bound_scaled, params, slack=1e-12 * abs(bound_scaled))
    factor = math.exp(top) if top < 700 else math.inf
    return BoundReport("lk", fmax_scaled * factor, bound_scaled * factor, rep.satisfied, params)


def uniform_diag_bound(eta: float, d: int) -> float:
    """``1 + (eta^2 d^2 + 4 eta) / (1 - eta (eta d^2 + 2))``."""
    q = eta * (eta * d * d + 2.0)
    if q >= 1.0:
        raise ValueError(f"eta (eta d^2 + 2) = {q:.6g} >= 1: geometric series diverges")
    return 1.0 + (eta * eta * d * d + 4.0 * eta) / (1.0 - q)


def norm_diag_coefficients(eta: float, d: int, T: int) -> Tuple[float, float, float, float]:
    """Coefficients ``(alpha, beta, gamma)`` of the diagonal-norm bound, plus the uniform bound.

    The geometric sums run over ``max(T - 2, 0)`` terms, so ``T`` in ``{0, 1, 2}``
    gives the empty sum.
    """
    q = eta * (eta * d * d + 2.0)
    if q >= 1.0:
        raise ValueError(f"eta (eta d^2 + 2) = {q:.6g} >= 1: geometric series diverges")
    n = max(T - 2, 0)
    geo_q = (1.0 - q**n) / (1.0 - q)
    geo_eta = (1.0 - eta**n) / (1.0 - eta)
    pre = 2.0 * eta / (eta * d * d + 1.0)
    alpha = pre * (geo_q - geo_eta)
    beta = pre * (eta * d * d * geo_q + geo_eta)
    gamma = 1.0 + eta * eta * d * d * geo_q
    return alpha, beta, gamma, uniform_diag_bound(eta, d)


def _norm_triple(B: np.ndarray) -> np.ndarray:
    return np.array([operator_norm(B), norm_1to2(B), float(np.max(np.abs(np.diag(B))))])


def check_norm_system(A: MatrixLike, eps: float, eta: float, T_max: int,
                      uniform: bool = True) -> List[BoundReport]:
    """One-step and accumulated norm inequalities along the exact ``E[B_t]``.

    For each ``t = 1..T_max`` reports ``dyn_diag``, ``dyn_1to2`` and ``dyn_op``
    (one step from the measured ``t - 1`` norms), ``system_*`` (norms at ``t``
    against ``(I + eta M)^t`` applied to the ``t = 0`` norms) and, with
    ``uniform``, ``diag_uniform`` (diagonal norm against the constant bound).
    ``norm_diag`` compares ``||diag(A diag(E[B_t]) A)||`` with the
    ``(alpha, beta, gamma)`` combination of the ``t = 0`` quantities.
    """
    a = _as_array(A)
    d = a.shape[0]
    e2 = eta * eta * d * d
    M = np.array([[2.0, 0.0, eta * d * d], [1.0, 1.0, eta * d * d], [0.0, 2.0, eta * d * d]])
    step = np.eye(3) + eta * M
    ubound = uniform_diag_bound(eta, d) if uniform else None
    eig = np.linalg.eigvalsh(a)
    b0 = _b0(a, eps)
    base = np.array([float(np.max(1.0 - eps - eig)), norm_1to2(b0), float(np.max(1.0 - eps - np.diag(a)))])
    reports: List[BoundReport] = []
    prev = None
    acc = None
    for m in iterate_ebt(a, eps, eta, T_max):
        if m.log_scale != 0.0:
            raise ValueError("norms overflowed the unscaled range; shorten T_max")
        cur = _norm_triple(m.scaled)
        t = m.t
        al, be, ga, _ = norm_diag_coefficients(eta, d, t)
        lhs = float(np.max(np.abs(np.einsum("ij,j,ji->i", a, np.diag(m.scaled), a))))
        reports.append(BoundReport.check("norm_diag", lhs, float(np.dot([al, be, ga], base)), {"t": t}))
        if prev is None:
            acc = cur.copy()
            if uniform:
                reports.append(BoundReport.check("diag_uniform", cur[2], ubound, {"t": 0}))
            prev = cur
            continue
        op0, n12, nd = prev
        p = {"t": t}
        reports.append(BoundReport.check("dyn_diag", cur[2], 2 * eta * n12 + (1 + e2) * nd, p))
        reports.append(BoundReport.check("dyn_1to2", cur[1], eta * op0 + (1 + eta) * n12 + e2 * nd, p))
        reports.append(BoundReport.check("dyn_op", cur[0], (1 + 2 * eta) * op0 + e2 * nd, p))
        acc = step @ acc
        for name, k in (("system_op", 0), ("system_1to2", 1), ("system_diag", 2)):
            reports.append(BoundReport.check(name, cur[k], acc[k], p))
        if uniform:
            reports.append(BoundReport.check("diag_uniform", cur[2], ubound, p))
        prev = cur
    return reports


def _leading_positive(A: MatrixLike, w0: np.ndarray):
    eig = eig_all(A)
    v = eig.leading.copy()
    if float(w0 @ v) < 0:
        v = -v
    return eig, v


def certify_theorem(A: MatrixLike, w0, eps: float, p: float, C: float = 1.0,
                    eta: Optional[float] = None, T: Optional[int] = None,
                    method: str = "auto", rtol: float = 1e-9) -> BoundReport:
    """Exact ``E[V_T]`` against ``-(eps / 4p)(1 + 2 eta)^T``.

    The alignment ``<w0, v_1>`` is measured, not trusted. Supplying ``eta`` or
    ``T`` overrides the derived parameters and the report is flagged with
    ``in_regime=False`` unless they still satisfy the hypotheses.

    Raises:
        PreconditionError: if ``A`` is not spectrally normalized or ``<w0, v_1> <= 1/p``.
    """
    a = _as_array(A)
    w0 = np.asarray(w0, dtype=np.float64)
    if abs(np.linalg.norm(w0) - 1.0) > 1e-12:
        raise PreconditionError("w0 must be unit norm")
    eig, v = _leading_positive(a, w0)
    if abs(eig.values[0] - 1.0) > 1e-10 or abs(eig.values[-1]) > 1.0 + 1e-10:
        raise PreconditionError(
            f"A must be spectrally normalized (s_1 = {eig.values[0]:.12g}, s_d = {eig.values[-1]:.12g})"
        )
    al = float(w0 @ v)
    if not al > 1.0 / p:
        raise PreconditionError(f"measured alignment {al:.6g} does not exceed 1/p = {1.0 / p:.6g}")
    tp = theorem_params(eps, p, a.shape[0], C)
    use_eta = tp.eta if eta is None else float(eta)
    use_T = tp.T if T is None else int(T)
    in_regime = use_eta == tp.eta and use_T > max(tp.thresholds)
    shift = log_growth(use_eta, use_T)
    mom = propagate_ebt(a, eps, use_eta, use_T, method=method)
    lhs_scaled = mom.quadratic_scaled(w0) * math.exp(mom.log_scale - shift)
    rhs_scaled = -eps / (4.0 * p)
    params = {"d": a.shape[0], "eps": eps, "p": p, "C": C, "eta": use_eta, "T": use_T,
              "alignment": al, "in_regime": in_regime, "log_growth": shift}
    rep = BoundReport.check("theorem", lhs_scaled, rhs_scaled, params, slack=rtol * abs(rhs_scaled))
    factor = math.exp(shift) if shift < 700 else math.inf
    return BoundReport("theorem", lhs_scaled * factor, rhs_scaled * factor, rep.satisfied, params)
