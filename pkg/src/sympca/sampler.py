"""Uniform single-entry sampling and entry-stream I/O.

Each observation is one cell ``(i, j)`` drawn uniformly with replacement from
``{0..d-1}^2``. The stochastic step scales the observed value by ``d**2`` so that
the rank-one matrix ``d**2 * A[i, j] * e_i e_j^T`` is an unbiased estimate of
``A``; that factor is applied by the consumers, never stored here.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Iterator, NamedTuple, Optional

import numpy as np

from .linalg import MAGIC, MatrixLike, SymmetricMatrix, _as_array, read_matrix

__all__ = [
    "EntrySample",
    "RngStream",
    "SampleBuffer",
    "sample_entry",
    "estimator_mean",
    "stream_open",
    "write_triplets",
    "StreamFormatError",
]

# Sub-stream purposes; one SeedSequence child per (stream, purpose).
SAMPLES = 0
INIT = 1
RATES = 2

BLOCK = 1 << 16


class StreamFormatError(ValueError):
    """A malformed entry stream. ``lineno`` is 1-based."""

    def __init__(self, path, lineno: int, msg: str):
        super().__init__(f"{path}:{lineno}: {msg}")
        self.path = path
        self.lineno = lineno


class EntrySample(NamedTuple):
    i: int
    j: int
    value: float


@dataclass(frozen=True)
class RngStream:
    """A reproducible random stream identified by ``(seed, stream)``.

    Distinct stream indices give statistically independent sequences derived
    from one master seed, so parallel chains never share draws. Generation is
    PCG64 on integer state, identical across platforms.
    """

    seed: int
    stream: int = 0

    def generator(self, purpose: int = SAMPLES) -> np.random.Generator:
        ss = np.random.SeedSequence(int(self.seed) & (2**64 - 1), spawn_key=(int(self.stream), purpose))
        return np.random.Generator(np.random.PCG64(ss))

    def child(self, offset: int) -> "RngStream":
        return RngStream(self.seed, self.stream + offset)


class SampleBuffer:
    """Flat cell indices ``i * d + j`` drawn in fixed-size blocks.

    Blocks are always drawn with the same size, so the sequence handed out is
    independent of how callers slice their requests.
    """

    def __init__(self, rng: RngStream, d: int, block: int = BLOCK):
        self.d = d
        self._gen = rng.generator(SAMPLES)
        self._block = block
        self._buf = np.empty(0, dtype=np.int64)
        self._pos = 0

    def take(self, n: int) -> np.ndarray:
        out = np.empty(n, dtype=np.int64)
        filled = 0
        while filled < n:
            if self._pos == self._buf.size:
                self._buf = self._gen.integers(0, self.d * self.d, size=self._block, dtype=np.int64)
                self._pos = 0
            m = min(n - filled, self._buf.size - self._pos)
            out[filled : filled + m] = self._buf[self._pos : self._pos + m]
            self._pos += m
            filled += m
        return out


def sample_entry(A: MatrixLike, rng) -> EntrySample:
    """Draw one cell uniformly and return it with its value.

    Args:
        A: Source matrix.
        rng: A :class:`SampleBuffer` or a ``numpy.random.Generator``.
    """
    a = _as_array(A)
    d = a.shape[0]
    if isinstance(rng, SampleBuffer):
        c = int(rng.take(1)[0])
    else:
        c = int(rng.integers(0, d * d))
    i, j = divmod(c, d)
    return EntrySample(i, j, float(a[i, j]))


def estimator_mean(A: MatrixLike) -> np.ndarray:
    """Average of ``d**2 * A[i, j] * e_i e_j^T`` over all ``d**2`` cells, by enumeration."""
    a = _as_array(A)
    d = a.shape[0]
    out = np.zeros((d, d))
    d2 = float(d * d)
    for i in range(d):
        for j in range(d):
            out[i, j] += d2 * a[i, j] / d2
    return out


def _iter_triplets(path: Path) -> Iterator[EntrySample]:
    with open(path) as fh:
        header = fh.readline()
        if not header:
            raise StreamFormatError(path, 1, "missing 'd=<int>' header")
        key, _, val = header.strip().partition("=")
        if key.strip() != "d" or not val.strip().isdigit() or int(val) < 1:
            raise StreamFormatError(path, 1, f"bad header {header.strip()!r}, expected 'd=<int>'")
        d = int(val)
        for lineno, line in enumerate(fh, start=2):
            parts = line.split()
            if not parts:
                continue
            if len(parts) != 3:
                raise StreamFormatError(path, lineno, f"expected 'i j value', got {line.strip()!r}")
            try:
                i, j, v = int(parts[0]), int(parts[1]), float(parts[2])
            except ValueError:
                raise StreamFormatError(path, lineno, f"unparseable triplet {line.strip()!r}") from None
            if not (1 <= i <= d and 1 <= j <= d):
                raise StreamFormatError(path, lineno, f"index ({i}, {j}) out of range 1..{d}")
            yield EntrySample(i - 1, j - 1, v)


class EntryStream:
    """Iterator over :class:`EntrySample` with the dimension read up front."""

    def __init__(self, d: int, it: Iterator[EntrySample]):
        self.d = d
        self._it = it

    def __iter__(self):
        return self

    def __next__(self) -> EntrySample:
        return next(self._it)


def _read_triplet_dim(path: Path) -> int:
    with open(path) as fh:
        header = fh.readline()
    key, _, val = header.strip().partition("=")
    if key.strip() != "d" or not val.strip().isdigit() or int(val) < 1:
        raise StreamFormatError(path, 1, f"bad header {header.strip()!r}, expected 'd=<int>'")
    return int(val)


def stream_open(path, format: str = "auto", rng: Optional[RngStream] = None, limit: Optional[int] = None) -> EntryStream:
    """Open an entry stream.

    ``"triplet"`` files are read in order. A ``"binary"`` matrix file is treated
    as stored-matrix mode: entries are sampled from it with ``rng`` (infinite
    unless ``limit`` is given). ``"auto"`` sniffs the magic bytes.

    Raises:
        StreamFormatError: on a malformed header or line (raised lazily for lines).
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(path)
    if format == "auto":
        with open(path, "rb") as fh:
            format = "binary" if fh.read(8) == MAGIC else "triplet"
    if format == "triplet":
        d = _read_triplet_dim(path)
        it = _iter_triplets(path)
        if limit is not None:
            it = itertools.islice(it, limit)
        return EntryStream(d, it)
    if format == "binary":
        A = read_matrix(path)
        buf = SampleBuffer(rng if rng is not None else RngStream(0), A.d)

        def gen():
            while True:
                yield sample_entry(A, buf)

        it = gen()
        if limit is not None:
            it = itertools.islice(it, limit)
        return EntryStream(A.d, it)
    raise ValueError(f"unknown stream format {format!r}")


def write_triplets(path, d: int, samples: Iterable[EntrySample]) -> None:
    """Write samples as a triplet file with 1-based indices (values round-trip exactly)."""
    with open(path, "w") as fh:
        fh.write(f"d={d}\n")
        for s in samples:
            fh.write(f"{s.i + 1} {s.j + 1} {float(s.value)!r}\n")


def sample_cells(A: SymmetricMatrix, rng: RngStream, n: int) -> list[EntrySample]:
    """``n`` consecutive samples from the stream a stored-matrix run would consume."""
    buf = SampleBuffer(rng, A.d)
    cells = buf.take(n)
    a = A.dense
    return [EntrySample(int(c // A.d), int(c % A.d), float(a.flat[c])) for c in cells]
