"""Codebook construction, normalization, projection, and subsampling.

Codebooks are immutable row-major ``(N, dim)`` matrices. A single large
fixed codebook can serve many quantizer stages through
:func:`sample_subcodebook`, which draws a small set of distinct rows.
"""

from __future__ import annotations

import struct
import warnings
from dataclasses import InitVar, dataclass

import numpy as np

from .errors import CapacityExceededError, InvalidArgumentError, ParseError
from .rng import derive_rng

CODEBOOK_MAGIC = b"RRVQCB1\x00"
_CODEBOOK_HEADER = struct.Struct("<8sIIQ")

# Row norms below this are treated as degenerate and left unnormalized.
DEGENERATE_NORM = 1e-12


class DegenerateRowWarning(UserWarning):
    """A row with near-zero norm was passed through unnormalized."""


def _validate_codewords(codewords) -> np.ndarray:
    cw = np.ascontiguousarray(codewords, dtype=np.float64)
    if cw.ndim != 2 or cw.shape[0] < 1 or cw.shape[1] < 1:
        raise InvalidArgumentError("codewords must form a non-empty (N, dim) matrix")
    if not np.all(np.isfinite(cw)):
        raise InvalidArgumentError("codewords must be finite")
    cw.setflags(write=False)
    return cw


@dataclass(frozen=True)
class Codebook:
    """A fixed set of codewords, immutable after construction."""

    codewords: np.ndarray
    id: str = ""
    trainable: bool = False
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "codewords", _validate_codewords(self.codewords))

    @property
    def n(self) -> int:
        return self.codewords.shape[0]

    @property
    def dim(self) -> int:
        return self.codewords.shape[1]

    def save(self, path) -> None:
        save_codebook(path, self.codewords, self.seed)

    @classmethod
    def load(cls, path, id: str = "", trainable: bool = False) -> "Codebook":
        codewords, seed = load_codebook(path)
        return cls(codewords=codewords, id=id, trainable=trainable, seed=seed)


@dataclass(frozen=True)
class BigCodebook:
    """A large fixed codebook that is never mutated during a run."""

    codewords: np.ndarray
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "codewords", _validate_codewords(self.codewords))

    @property
    def n(self) -> int:
        return self.codewords.shape[0]

    @property
    def dim(self) -> int:
        return self.codewords.shape[1]

    @classmethod
    def gaussian(cls, n: int, dim: int, seed: int) -> "BigCodebook":
        cb = init_gaussian(n, dim, seed)
        return cls(codewords=cb.codewords, seed=int(seed))

    def save(self, path) -> None:
        save_codebook(path, self.codewords, self.seed)

    @classmethod
    def load(cls, path) -> "BigCodebook":
        codewords, seed = load_codebook(path)
        return cls(codewords=codewords, seed=seed)


@dataclass(frozen=True)
class SubCodebook:
    """A view of ``s`` distinct rows of a parent :class:`BigCodebook`."""

    big: BigCodebook
    indices: np.ndarray
    validate: InitVar[bool] = True

    def __post_init__(self, validate: bool = True):
        idx = np.ascontiguousarray(self.indices, dtype=np.int64)
        if validate:
            if idx.ndim != 1 or idx.size < 1:
                raise InvalidArgumentError("subcodebook indices must be a non-empty vector")
            if idx.min() < 0 or idx.max() >= self.big.n:
                raise InvalidArgumentError("subcodebook indices out of range")
            if np.unique(idx).size != idx.size:
                raise InvalidArgumentError("subcodebook indices must be distinct")
        idx.setflags(write=False)
        object.__setattr__(self, "indices", idx)

    @property
    def s(self) -> int:
        return self.indices.size

    @property
    def codewords(self) -> np.ndarray:
        return self.big.codewords[self.indices]


@dataclass(frozen=True)
class ProjectionPair:
    """Fixed linear maps into and out of a lower-dimensional space.

    ``down`` has orthonormal rows and ``up`` is its transpose, so
    ``up @ down`` is an orthogonal projection: applying the round trip
    twice equals applying it once, and it never increases the norm.
    """

    down: np.ndarray
    up: np.ndarray
    d_proj: int
    seed: int = 0

    def __post_init__(self):
        down = np.ascontiguousarray(self.down, dtype=np.float64)
        up = np.ascontiguousarray(self.up, dtype=np.float64)
        if down.ndim != 2 or down.shape[0] != self.d_proj:
            raise InvalidArgumentError("down must have shape (d_proj, dim)")
        if up.shape != (down.shape[1], down.shape[0]):
            raise InvalidArgumentError("up must be the transpose shape of down")
        down.setflags(write=False)
        up.setflags(write=False)
        object.__setattr__(self, "down", down)
        object.__setattr__(self, "up", up)

    @property
    def dim(self) -> int:
        return self.down.shape[1]

    def project_down(self, x: np.ndarray) -> np.ndarray:
        """Map vectors (or row-stacked matrices) from dim to d_proj space."""
        x = np.asarray(x, dtype=np.float64)
        # Promote vectors so both shapes go through the same matmul path.
        if x.ndim == 1:
            return (x[None, :] @ self.down.T)[0]
        return x @ self.down.T

    def project_up(self, z: np.ndarray) -> np.ndarray:
        """Map vectors (or row-stacked matrices) from d_proj back to dim space."""
        z = np.asarray(z, dtype=np.float64)
        if z.ndim == 1:
            return (z[None, :] @ self.down)[0]
        return z @ self.down


def init_gaussian(n: int, dim: int, seed: int) -> Codebook:
    """Draw ``n`` codewords i.i.d. from the standard normal in ``dim`` dimensions.

    Bit-reproducible for a fixed seed.
    """
    n = int(n)
    dim = int(dim)
    if n < 1 or dim < 1:
        raise InvalidArgumentError("init_gaussian requires n >= 1 and dim >= 1")
    rng = derive_rng(seed)
    codewords = rng.standard_normal((n, dim))
    return Codebook(codewords=codewords, trainable=True, seed=int(seed))


def sample_subcodebook(
    big: BigCodebook,
    s: int,
    rng: np.random.Generator,
    exclude=None,
) -> SubCodebook:
    """Draw ``s`` distinct indices uniformly from ``[0, N_big)`` minus ``exclude``.

    The generator is advanced deterministically, so a draw is a pure
    function of ``(big, s, exclude, rng state)``.
    """
    s = int(s)
    if s < 1:
        raise InvalidArgumentError("sample size must be >= 1")
    if exclude is None:
        excluded = np.empty(0, dtype=np.int64)
    else:
        excluded = np.asarray(
            list(exclude) if isinstance(exclude, (set, frozenset)) else exclude,
            dtype=np.int64,
        )
        if excluded.size and (excluded.min() < 0 or excluded.max() >= big.n):
            raise InvalidArgumentError("exclude indices out of range")
    if excluded.size == 0:
        if s > big.n:
            raise CapacityExceededError(f"cannot draw {s} indices from {big.n}")
        indices = rng.choice(big.n, size=s, replace=False)
    else:
        mask = np.zeros(big.n, dtype=bool)
        mask[excluded] = True
        allowed = np.flatnonzero(~mask)
        if s > allowed.size:
            raise CapacityExceededError(
                f"cannot draw {s} indices from {big.n} with {big.n - allowed.size} excluded"
            )
        indices = allowed[rng.choice(allowed.size, size=s, replace=False)]
    # rng.choice without replacement already guarantees distinct in-range rows.
    return SubCodebook(big=big, indices=indices.astype(np.int64), validate=False)


def make_projection(dim: int, d_proj: int, seed: int) -> ProjectionPair:
    """Build a seeded orthonormal projection via QR of a Gaussian matrix."""
    dim = int(dim)
    d_proj = int(d_proj)
    if not 1 <= d_proj < dim:
        raise InvalidArgumentError("make_projection requires 1 <= d_proj < dim")
    g = derive_rng(seed).standard_normal((dim, d_proj))
    q, r = np.linalg.qr(g)
    # Canonical sign choice keeps the factorization stable across BLAS builds.
    signs = np.sign(np.diag(r))
    signs[signs == 0] = 1.0
    q = q * signs[None, :]
    return ProjectionPair(down=q.T, up=q, d_proj=d_proj, seed=int(seed))


def l2_normalize_rows(m: np.ndarray) -> np.ndarray:
    """Scale each row to unit Euclidean norm.

    Rows with norm below ``DEGENERATE_NORM`` are returned unchanged and
    flagged with a :class:`DegenerateRowWarning`. Accepts a single vector
    and returns one in that case.
    """
    m = np.asarray(m, dtype=np.float64)
    single = m.ndim == 1
    rows = m[None, :] if single else m
    if rows.ndim != 2:
        raise InvalidArgumentError("l2_normalize_rows expects a vector or matrix")
    norms = np.sqrt(np.einsum("ij,ij->i", rows, rows))
    degenerate = norms < DEGENERATE_NORM
    if np.any(degenerate):
        warnings.warn(
            f"{int(degenerate.sum())} row(s) with near-zero norm left unnormalized",
            DegenerateRowWarning,
            stacklevel=2,
        )
    safe = np.where(degenerate, 1.0, norms)
    out = rows / safe[:, None]
    return out[0] if single else out


def save_codebook(path, codewords: np.ndarray, seed: int = 0) -> None:
    """Write a codebook file: magic, u32 N, u32 dim, u64 seed, f32 rows."""
    cw = np.asarray(codewords, dtype=np.float64)
    if cw.ndim != 2:
        raise InvalidArgumentError("codewords must be a matrix")
    header = _CODEBOOK_HEADER.pack(CODEBOOK_MAGIC, cw.shape[0], cw.shape[1], int(seed))
    body = cw.astype("<f4").tobytes(order="C")
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(body)


def load_codebook(path) -> tuple[np.ndarray, int]:
    """Read a codebook file; returns ``(codewords float64, seed)``."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < _CODEBOOK_HEADER.size:
        raise ParseError("codebook file truncated before header")
    magic, n, dim, seed = _CODEBOOK_HEADER.unpack_from(blob)
    if magic != CODEBOOK_MAGIC:
        raise ParseError("not a codebook file (bad magic)")
    if n < 1 or dim < 1:
        raise InvalidArgumentError("codebook file declares an empty matrix")
    expected = _CODEBOOK_HEADER.size + 4 * n * dim
    if len(blob) != expected:
        raise ParseError(f"codebook file has {len(blob)} bytes, expected {expected}")
    data = np.frombuffer(blob, dtype="<f4", offset=_CODEBOOK_HEADER.size)
    return data.astype(np.float64).reshape(n, dim), int(seed)
