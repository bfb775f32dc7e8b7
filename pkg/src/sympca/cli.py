"""Command-line front end.

Subcommands::

    sympca gen-matrix --kind gaussian --d 200 --out A.bin
    sympca solve --gen spiked:1000 --gain 0.0625 --steps 1000000 --trace solve.csv
    sympca tune --gen spiked:1000 --eps 0.05 --trace tune.csv
    sympca verify --suite tiny --out checks.csv
    sympca report solve.csv tune.csv

All output is a pure function of the arguments and the seed (``--seed``, or
the ``SYMPCA_SEED`` environment variable when the flag is absent).
"""

from __future__ import annotations

import argparse
import csv
import itertools
import logging
import math
import os
import sys
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np

from . import hedge, sgd, theory
from .linalg import NormalizationError, SymmetricMatrix, eig_all, read_matrix, spectral_normalize, write_matrix
from .sampler import RngStream, StreamFormatError, stream_open

log = logging.getLogger("sympca")

SEED_ENV = "SYMPCA_SEED"
KINDS = ("gaussian", "spiked", "wishart")
MAX_ATTEMPTS = 16
DEFAULT_SOLVE_GAIN = 2.0**-4
ORACLE_MAX_D = 5000
UNCONVERGED = "unconverged"


class CLIError(Exception):
    """A user-facing failure; the message is printed without a traceback."""


# ---------------------------------------------------------------- matrices


def _gen_rng(seed: int, attempt: int) -> np.random.Generator:
    ss = np.random.SeedSequence(int(seed) & (2**64 - 1), spawn_key=(attempt,))
    return np.random.Generator(np.random.PCG64(ss))


def gen_matrix(d: int, seed: int = 0, kind: str = "gaussian", theta: float = 6.0) -> SymmetricMatrix:
    """Seeded random symmetric matrix scaled to leading eigenvalue 1.

    Kinds:
        gaussian: ``(M + M^T) / 2`` with i.i.d. standard normal ``M``.
        spiked: the Gaussian kind scaled to spectral radius about 1, plus ``theta u u^T``
            for a random unit ``u``.
        wishart: ``X X^T`` with ``X`` of shape ``(d, 2d)``; positive semidefinite.

    A draw whose most negative eigenvalue outweighs the leading one cannot be
    normalized by scaling; it is redrawn from the next sub-seed, up to 16 times.

    Raises:
        NormalizationError: if every attempt is rejected.
    """
    if d < 1:
        raise ValueError("d must be >= 1")
    if kind not in KINDS:
        raise ValueError(f"unknown kind {kind!r}; expected one of {', '.join(KINDS)}")
    last = None
    for attempt in range(MAX_ATTEMPTS):
        rng = _gen_rng(seed, attempt)
        if kind == "wishart":
            X = rng.standard_normal((d, 2 * d))
            a = X @ X.T
        else:
            M = rng.standard_normal((d, d))
            a = (M + M.T) / 2.0
            if kind == "spiked":
                u = rng.standard_normal(d)
                u /= np.linalg.norm(u)
                a = a / math.sqrt(2.0 * d) + theta * np.outer(u, u)
        try:
            return spectral_normalize(SymmetricMatrix(a))
        except NormalizationError as exc:
            last = exc
    raise NormalizationError(f"{kind}:{d} seed {seed}: {MAX_ATTEMPTS} draws rejected ({last})")


def parse_gen(text: str):
    """``"kind:d"`` -> ``(kind, d)``."""
    kind, sep, dim = text.partition(":")
    if not sep or kind not in KINDS or not dim.isdigit() or int(dim) < 1:
        raise CLIError(f"--gen expects <kind>:<d> with kind in {{{','.join(KINDS)}}}, got {text!r}")
    return kind, int(dim)


def _load_source(args, seed: int):
    """Resolve ``--matrix`` / ``--gen`` / ``--stream`` into ``(source, matrix_or_None)``."""
    if getattr(args, "stream", None):
        try:
            st = stream_open(args.stream, format="triplet")
        except (FileNotFoundError, StreamFormatError) as exc:
            raise CLIError(f"cannot open stream {args.stream}: {exc}") from None
        return st, None
    if getattr(args, "matrix", None):
        try:
            A = read_matrix(args.matrix)
        except FileNotFoundError:
            raise CLIError(f"matrix file not found: {args.matrix}") from None
        except ValueError as exc:
            raise CLIError(f"{args.matrix}: {exc}") from None
        return A, A
    if getattr(args, "gen", None):
        kind, d = parse_gen(args.gen)
        A = gen_matrix(d, seed, kind, theta=args.theta)
        return A, A
    raise CLIError("one of --matrix, --gen or --stream is required")


def _oracle(A: Optional[SymmetricMatrix], enabled: bool):
    if A is None or not enabled or A.d > ORACLE_MAX_D:
        return None
    return eig_all(A).leading


def _seed(args) -> int:
    if args.seed is not None:
        return int(args.seed)
    env = os.environ.get(SEED_ENV)
    if env is not None and env.strip():
        try:
            return int(env)
        except ValueError:
            raise CLIError(f"{SEED_ENV}={env!r} is not an integer") from None
    return 0


def _rate(args, d: int) -> float:
    if args.eta is not None:
        return float(args.eta)
    return float(args.gain) / (d * d)


def _write_summary(dest, row: dict) -> None:
    own = dest is not None
    fh = open(dest, "w", newline="") if own else sys.stdout
    try:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(list(row))
        w.writerow([sgd._fmt(v) for v in row.values()])
    finally:
        if own:
            fh.close()


def _check_outputs(*paths):
    for p in paths:
        if p is None:
            continue
        parent = Path(p).resolve().parent
        if not parent.is_dir():
            raise CLIError(f"output directory does not exist: {parent}")


# ---------------------------------------------------------------- commands


def cmd_gen_matrix(args) -> int:
    seed = _seed(args)
    _check_outputs(args.out)
    A = gen_matrix(args.d, seed, args.kind, theta=args.theta)
    write_matrix(args.out, A)
    return 0


def solve_cmd(args) -> int:
    """Fixed-rate run; exit 1 when ``--eps`` is given and agreement ``1 - eps`` is not reached."""
    seed = _seed(args)
    _check_outputs(args.trace, args.summary)
    source, A = _load_source(args, seed)
    d = source.d
    rng = RngStream(seed)
    eta = _rate(args, d)
    if args.init == "ones":
        w0 = sgd.ones_unit(d)
    else:
        w0 = sgd.random_unit(rng, d)
    companion = sgd.random_unit(rng.child(1), d) if args.companion else None
    v = _oracle(A, args.oracle)
    stop = None if args.eps is None else 1.0 - args.eps
    reason = None
    try:
        res = sgd.run_fixed(source, w0, eta, args.steps, rng, trace_stride=args.trace_stride, v=v,
                            companion=companion, stop_loss=stop)
    except sgd.DegenerateStepError as exc:
        res = exc.partial
        reason = str(exc)
    if args.trace:
        sgd.write_trace(args.trace, res.trace)
    last = res.trace[-1]
    _write_summary(args.summary, {
        "eta": eta, "gain": eta * d * d, "steps": res.steps, "stop_reason": res.stop_reason,
        "loss": last.loss, "rayleigh": last.rayleigh, "alignment": last.alignment,
    })
    if reason:
        print(f"sympca: {reason}", file=sys.stderr)
        return 1
    if stop is not None and not res.converged:
        return 1
    return 0


def tune_cmd(args) -> int:
    """Burn-in, weight normalization, final run; exit 1 unless agreement ``1 - eps`` is reached."""
    seed = _seed(args)
    _check_outputs(args.trace, args.summary)
    source, A = _load_source(args, seed)
    d = source.d
    if args.rates:
        try:
            rates = np.array([float(x) for x in args.rates.split(",")])
        except ValueError:
            raise CLIError(f"--rates expects a comma-separated list of numbers, got {args.rates!r}") from None
    elif args.K is not None or args.rho is not None:
        rho = 0.5 if args.rho is None else args.rho
        K = 20 if args.K is None else args.K
        rates = rho ** np.arange(1, K + 1, dtype=np.float64)
    else:
        rates = hedge.default_grid()
    if args.rate_unit == "gain":
        rates = rates / (d * d)
    try:
        cfg = hedge.HedgeConfig(
            eps=args.eps, R=args.R, rates=rates, beta=args.beta, B_max=args.burn_in_cap,
            check_period=None if args.check_period == 0 else args.check_period,
            max_steps=args.max_steps, phase2=args.phase2, rate_draw=args.rate_draw,
            trace_stride=args.trace_stride,
        )
    except ValueError as exc:
        raise CLIError(str(exc)) from None
    rng = RngStream(seed)
    v = _oracle(A, args.oracle)
    failure = None
    try:
        state = hedge.finalize(hedge.burn_in(cfg, source, rng=rng, v=v))
        res = hedge.post_burn_in_run(state, cfg, rng=rng.child(len(rates) * cfg.R))
    except sgd.DegenerateStepError as exc:
        failure = str(exc)
        res = exc.partial
        state = None
    if state is None:
        print(f"sympca: {failure}", file=sys.stderr)
        return 1
    if args.trace:
        sgd.write_trace(args.trace, state.trace, hedge.TUNE_FIELDS)
    k = state.selected
    last = res.trace[-1]
    _write_summary(args.summary, {
        "selected_k": k, "selected_eta": float(state.rates[k]), "selected_gain": float(state.rates[k]) * d * d,
        "selected_weight": float(state.pi[k]), "burn_in_steps": state.B,
        "burn_in_complete": state.complete, "steps": res.steps, "stop_reason": res.stop_reason,
        "loss": last.loss, "alignment": last.alignment,
    })
    if not state.complete:
        log.warning("burn-in hit the %d-step cap before any rate reached agreement %.4g",
                    cfg.B_max, 1.0 - 10.0 * cfg.eps)
    return 0 if res.converged else 1


# ---------------------------------------------------------------- verification


def _tiny_suite(seed: int) -> List[theory.BoundReport]:
    reps: List[theory.BoundReport] = []
    reps += oracle_equivalence(range(seed, seed + 3), [(2, T) for T in range(1, 5)] + [(3, 1), (3, 2)])
    for s in range(seed, seed + 5):
        rng = _gen_rng(s, 100)
        d = 2 + s % 2
        X = rng.standard_normal((d, d))
        M = rng.standard_normal((d, d))
        reps.append(theory.check_esd((M + M.T) / 2.0, X))
    for eta, eps, T in [(0.1, 0.1, 1), (0.01, 0.05, 500), (0.5, 0.5, 3)]:
        reps.append(theory.check_lk(eta, eps, T, n_grid=10_000))
    A = gen_matrix(2, seed, "wishart")
    brute = theory.brute_force_ebt(A, 0.1, 0.05, 3)
    w0 = sgd.ones_unit(2)
    mean, se = theory.estimate_evt(A, w0, 0.1, 0.05, 3, M=4000, rng=RngStream(seed))
    exact = float(w0 @ brute @ w0)
    reps.append(theory.BoundReport.check("mc_vs_brute", abs(mean - exact), 4.0 * se,
                                         {"d": 2, "T": 3, "M": 4000, "mean": mean, "stderr": se}, slack=0.0))
    A3 = gen_matrix(3, seed, "wishart")
    reps += theory.check_norm_system(A3, 0.1, 1e-3, 20)
    return reps


def oracle_equivalence(seeds, shapes, eps: float = 0.1, eta: float = 0.05, tol: float = 1e-13):
    """``propagate_ebt`` against ``brute_force_ebt`` on Gaussian instances; one report per case."""
    reps = []
    for s in seeds:
        for d, T in shapes:
            A = gen_matrix(d, s, "gaussian")
            exact = theory.propagate_ebt(A, eps, eta, T, method="step").value
            brute = theory.brute_force_ebt(A, eps, eta, T)
            err = float(np.max(np.abs(exact - brute)))
            reps.append(theory.BoundReport.check("ebt_vs_brute", err, tol, {"d": d, "T": T, "seed": s}, slack=0.0))
    return reps


def certify_instance(A, eps: float = 0.1, seed: Optional[int] = None) -> theory.BoundReport:
    """Certify with ``w0`` the normalized ones vector and ``p = 2 / alignment``."""
    w0 = sgd.ones_unit(A.d)
    al = abs(float(w0 @ eig_all(A).leading))
    if al == 0.0:
        raise theory.PreconditionError("ones vector is orthogonal to the leading eigenvector")
    rep = theory.certify_theorem(A, w0, eps, 2.0 / al)
    if seed is not None:
        rep.params["seed"] = seed
    return rep


def _full_suite(seed: int) -> List[theory.BoundReport]:
    reps = _tiny_suite(seed)
    reps += oracle_equivalence(range(seed, seed + 10), [(2, T) for T in range(1, 7)] + [(3, 1), (3, 2)])
    for s in range(seed, seed + 20):
        reps.append(certify_instance(gen_matrix(10, s, "gaussian"), seed=s))
    for s in range(seed, seed + 10):
        Aw = gen_matrix(5, s, "wishart")
        w0 = sgd.ones_unit(5)
        p = 2.0 / abs(float(w0 @ eig_all(Aw).leading))
        tp = theory.theorem_params(0.1, p, 5)
        for r in theory.check_norm_system(Aw, 0.1, tp.eta, 200):
            r.params["seed"] = s
            reps.append(r)
    rng = _gen_rng(seed, 200)
    for _ in range(200):
        eta = float(rng.uniform(0.0, 0.5)) or 0.5
        eps = float(rng.uniform(0.0, 0.5)) or 0.5
        T = int(rng.integers(1, 1001))
        reps.append(theory.check_lk(eta, eps, T, n_grid=10_000))
    return reps


def _instance_checks(A: SymmetricMatrix, eps: float, seed: int) -> List[theory.BoundReport]:
    reps = []
    d = A.d
    if d <= 30:
        X = _gen_rng(seed, 300).standard_normal((d, d))
        reps.append(theory.check_esd(A, X))
    if d <= 40:
        w0 = sgd.ones_unit(d)
        p = 2.0 / abs(float(w0 @ eig_all(A).leading))
        tp = theory.theorem_params(eps, p, d)
        reps += theory.check_norm_system(A, eps, tp.eta, 200)
        reps.append(certify_instance(A, eps))
    if not reps:
        raise CLIError(f"d={d} is too large for the instance checks (d <= 40)")
    return reps


def write_reports(dest, reports: Sequence[theory.BoundReport]) -> None:
    own = dest is not None
    fh = open(dest, "w", newline="") if own else sys.stdout
    try:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["check", "lhs", "rhs", "satisfied", "params"])
        for r in reports:
            w.writerow([r.name, repr(r.lhs), repr(r.rhs), "true" if r.satisfied else "false", r.params_str()])
    finally:
        if own:
            fh.close()


def verify_cmd(args) -> int:
    """Run the checks and write one CSV row each; exit 1 if any fails."""
    seed = _seed(args)
    _check_outputs(args.out)
    if args.matrix or args.gen:
        _, A = _load_source(args, seed)
        reps = _instance_checks(A, args.eps, seed)
    elif args.suite == "tiny":
        reps = _tiny_suite(seed)
    else:
        reps = _full_suite(seed)
    write_reports(args.out, reps)
    failed = [r for r in reps if not r.satisfied]
    if failed:
        names = sorted({r.name for r in failed})
        print(f"sympca: {len(failed)} of {len(reps)} checks failed ({', '.join(names)})", file=sys.stderr)
        return 1
    return 0


# ---------------------------------------------------------------- reporting


def steps_to_threshold(rows, column: str, threshold: float) -> Optional[int]:
    """First ``t`` whose ``column`` reaches ``threshold``; ``None`` if never."""
    for row in rows:
        val = row.get(column)
        if val is not None and val >= threshold:
            return int(row["t"])
    return None


def speedup(steps_a: Optional[int], steps_b: Optional[int]):
    """``steps_b / steps_a``, i.e. how many times faster ``a`` crossed; ``"unconverged"`` if either never did."""
    if steps_a is None or steps_b is None:
        return UNCONVERGED
    if steps_a == 0:
        return math.inf if steps_b > 0 else 1.0
    return steps_b / steps_a


def report_cmd(args) -> int:
    _check_outputs(args.out)
    threshold = 1.0 - args.eps if args.threshold is None else args.threshold
    steps = {}
    for path in args.traces:
        try:
            rows = sgd.read_trace(path)
        except FileNotFoundError:
            raise CLIError(f"trace not found: {path}") from None
        if rows and args.column not in rows[0]:
            raise CLIError(f"{path}: no column {args.column!r}")
        steps[path] = steps_to_threshold(rows, args.column, threshold)
    own = args.out is not None
    fh = open(args.out, "w", newline="") if own else sys.stdout
    try:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["a", "b", "steps_a", "steps_b", "ratio"])
        for a, b in itertools.combinations(args.traces, 2):
            r = speedup(steps[a], steps[b])
            w.writerow([a, b, _steps_cell(steps[a]), _steps_cell(steps[b]),
                        r if isinstance(r, str) else repr(float(r))])
        if len(args.traces) == 1:
            a = args.traces[0]
            w.writerow([a, "", _steps_cell(steps[a]), "", ""])
    finally:
        if own:
            fh.close()
    return 0


def _steps_cell(s):
    return UNCONVERGED if s is None else str(s)


# ---------------------------------------------------------------- parser


def _add_source(p, stream=True):
    g = p.add_mutually_exclusive_group()
    g.add_argument("--matrix", help="binary matrix file")
    g.add_argument("--gen", metavar="KIND:D", help="generate a seeded matrix, e.g. gaussian:200")
    if stream:
        g.add_argument("--stream", help="triplet entry-stream file")
    p.add_argument("--theta", type=float, default=6.0, help="spike strength for --gen spiked:<d>")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sympca", description=__doc__.split("\n\n")[0])
    parser.add_argument("--seed", type=int, default=None, help=f"master seed (default ${SEED_ENV} or 0)")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="cmd", required=True)

    p = sub.add_parser("gen-matrix", help="write a seeded normalized random matrix")
    p.add_argument("--d", type=int, required=True)
    p.add_argument("--kind", choices=KINDS, default="gaussian")
    p.add_argument("--theta", type=float, default=6.0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_matrix)

    p = sub.add_parser("solve", help="fixed-rate run")
    _add_source(p)
    rate = p.add_mutually_exclusive_group()
    rate.add_argument("--eta", type=float, help="absolute learning rate")
    rate.add_argument("--gain", type=float, default=DEFAULT_SOLVE_GAIN, help="eta * d^2 (default 2^-4)")
    p.add_argument("--steps", type=int, default=100_000)
    p.add_argument("--init", choices=("ones", "random"), default="ones")
    p.add_argument("--eps", type=float, default=None, help="stop at agreement loss 1 - eps")
    p.add_argument("--no-companion", dest="companion", action="store_false",
                   help="skip the second chain (no loss column)")
    p.add_argument("--no-oracle", dest="oracle", action="store_false", help="skip the eigensolver (no alignment column)")
    p.add_argument("--trace-stride", type=int, default=100)
    p.add_argument("--trace", help="trace CSV path")
    p.add_argument("--summary", help="summary CSV path (default stdout)")
    p.set_defaults(func=solve_cmd)

    p = sub.add_parser("tune", help="exponential-weights rate selection")
    _add_source(p)
    p.add_argument("--eps", type=float, default=0.05)
    p.add_argument("--rates", help="comma list of rates (default 2^-3,...,2^17)")
    p.add_argument("--rho", type=float, default=None, help="grid ratio for rho^1..rho^K")
    p.add_argument("--K", type=int, default=None, help="grid size for rho^1..rho^K")
    p.add_argument("--rate-unit", choices=("gain", "absolute"), default="gain",
                   help="rates are eta * d^2 (gain) or eta itself")
    p.add_argument("--R", type=int, default=4)
    p.add_argument("--beta", type=float, default=None, help="default sqrt(log K / updates)")
    p.add_argument("--check-period", type=int, default=50, help="steps between loss checks (0: never)")
    p.add_argument("--burn-in-cap", type=int, default=1_000_000)
    p.add_argument("--max-steps", type=int, default=10_000_000, help="overall step cap")
    p.add_argument("--phase2", choices=("pair", "lagged"), default="pair")
    p.add_argument("--rate-draw", choices=("per_step", "once"), default="per_step")
    p.add_argument("--no-oracle", dest="oracle", action="store_false")
    p.add_argument("--trace-stride", type=int, default=None)
    p.add_argument("--trace")
    p.add_argument("--summary")
    p.set_defaults(func=tune_cmd)

    p = sub.add_parser("verify", help="numerical checks of the expectation bounds")
    _add_source(p, stream=False)
    p.add_argument("--suite", choices=("tiny", "full"), default="tiny")
    p.add_argument("--eps", type=float, default=0.1)
    p.add_argument("--out", help="report CSV path (default stdout)")
    p.set_defaults(func=verify_cmd)

    p = sub.add_parser("report", help="steps to threshold and speedup ratios")
    p.add_argument("traces", nargs="+")
    p.add_argument("--eps", type=float, default=0.05)
    p.add_argument("--threshold", type=float, default=None, help="overrides 1 - eps")
    p.add_argument("--column", default="loss")
    p.add_argument("--out")
    p.set_defaults(func=report_cmd)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="sympca: %(message)s")
    try:
        return int(args.func(args))
    except (CLIError, NormalizationError, theory.PreconditionError, StreamFormatError) as exc:
        print(f"sympca: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
