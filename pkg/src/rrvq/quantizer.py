"""Nearest-neighbour token selection and the residual quantizer cascade.

A :class:`QuantizerStack` is an ordered run of trainable stages followed
by random stages. Trainable stages own their codebook; random stages
select from a small sub-codebook freshly drawn from a shared big fixed
codebook. Each stage quantizes the running residual and subtracts the
emitted codeword, so the input always equals the sum of emitted
codewords plus the final residual.

Random draws are addressed by ``(master_seed, resample granularity,
frame or batch ordinal)``, which makes token streams reproducible and
lets independent implementations replay the exact draws.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .codebook import (
    BigCodebook,
    Codebook,
    ProjectionPair,
    SubCodebook,
    init_gaussian,
    l2_normalize_rows,
    make_projection,
    sample_subcodebook,
)
from .errors import InvalidArgumentError, ParseError
from .rng import (
    KEY_BIG_INIT,
    KEY_PROJECTION,
    KEY_SAMPLING,
    KEY_TRAINABLE_INIT,
    SAMPLE_BATCH,
    SAMPLE_FIXED,
    SAMPLE_FRAME,
    derive_rng,
    derive_seed,
)

RESAMPLE_MODES = ("per-frame", "per-batch", "fixed-per-run")
RESAMPLE_MODE_CODES = {"per-frame": 0, "per-batch": 1, "fixed-per-run": 2}
_MODE_FROM_CODE = {v: k for k, v in RESAMPLE_MODE_CODES.items()}

TOKEN_MAGIC = b"RRVQTK1\x00"

TRAINABLE = "trainable"
RANDOM = "random"

# Cap the (rows x codewords x dim) distance workspace per chunk.
_CHUNK_ELEMENTS = 1 << 22


def _nn_batch(points: np.ndarray, codewords: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Exact argmin of squared Euclidean distance, row by row.

    Single code path for every selection in the library so that batched
    and one-frame quantization produce bit-identical results.
    """
    t = points.shape[0]
    n, d = codewords.shape
    rows = max(1, _CHUNK_ELEMENTS // max(n * d, 1))
    if t <= rows:
        diff = points[:, None, :] - codewords[None, :, :]
        d2 = np.einsum("tnd,tnd->tn", diff, diff)
        idx = np.argmin(d2, axis=1)
        return idx, d2[np.arange(t), idx]
    indices = np.empty(t, dtype=np.int64)
    dists = np.empty(t, dtype=np.float64)
    for lo in range(0, t, rows):
        hi = min(lo + rows, t)
        indices[lo:hi], dists[lo:hi] = _nn_batch(points[lo:hi], codewords)
    return indices, dists


def _codewords_of(cb) -> np.ndarray:
    if isinstance(cb, np.ndarray):
        return cb
    codewords = getattr(cb, "codewords", None)
    if codewords is None:
        raise InvalidArgumentError("expected a codebook, sub-codebook, or matrix")
    return codewords


def nearest_neighbour(x, cb, normalize: bool = False) -> tuple[int, np.ndarray, float]:
    """Return ``(index, codeword, squared distance)`` of the closest codeword.

    With ``normalize`` the distance is computed between the L2-normalized
    query and L2-normalized codewords (selection by direction only), but
    the returned codeword is always the original row, and the reported
    distance is the one that was minimized. Ties break to the lowest index.
    """
    codewords = np.asarray(_codewords_of(cb), dtype=np.float64)
    if codewords.ndim != 2 or codewords.shape[0] < 1:
        raise InvalidArgumentError("codebook must contain at least one codeword")
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1 or x.shape[0] != codewords.shape[1]:
        raise InvalidArgumentError("query dimension does not match the codebook")
    if not np.all(np.isfinite(x)):
        raise InvalidArgumentError("query must be finite")
    if normalize:
        query = l2_normalize_rows(x[None, :])
        pool = l2_normalize_rows(codewords)
    else:
        query = x[None, :]
        pool = codewords
    idx, d2 = _nn_batch(query, pool)
    i = int(idx[0])
    return i, codewords[i].copy(), float(d2[0])


@dataclass
class QuantizerStage:
    """One stage of the cascade.

    Trainable stages carry their own codebook; random stages carry only a
    sample size and read codewords from the stack's shared big codebook,
    so they never own mutable state.
    """

    kind: str
    codebook: Codebook | None = None
    sample_size: int | None = None
    projection: ProjectionPair | None = None
    normalize: bool = False

    def __post_init__(self):
        if self.kind not in (TRAINABLE, RANDOM):
            raise InvalidArgumentError(f"unknown stage kind {self.kind!r}")
        if self.kind == TRAINABLE and self.codebook is None:
            raise InvalidArgumentError("trainable stages need a codebook")
        if self.kind == RANDOM:
            if self.codebook is not None:
                raise InvalidArgumentError("random stages must not own a codebook")
            if self.sample_size is None or int(self.sample_size) < 1:
                raise InvalidArgumentError("random stages need sample_size >= 1")
            self.sample_size = int(self.sample_size)


@dataclass
class QuantizerStack:
    """Ordered cascade of trainable stages followed by random stages.

    ``resample_mode`` controls when sub-codebooks are redrawn:

    - ``per-frame``: a fresh draw per frame, derived from
      ``(master_seed, frame index)``;
    - ``per-batch``: one draw per :func:`quantize_sequence` call, advanced
      by an internal batch counter;
    - ``fixed-per-run``: one draw derived once and reused for the stack's
      lifetime.

    With ``disjoint`` the random stages of one draw set exclude each
    other's indices, which requires ``sum(sample sizes) <= N_big``.
    """

    dim: int
    stages: list[QuantizerStage]
    big: BigCodebook | None = None
    resample_mode: str = "per-frame"
    master_seed: int = 0
    disjoint: bool = True

    _fixed_draws: list[SubCodebook] | None = field(
        default=None, init=False, repr=False, compare=False
    )
    _batch_counter: int = field(default=0, init=False, repr=False, compare=False)
    _normalized_big: np.ndarray | None = field(
        default=None, init=False, repr=False, compare=False
    )

    def __post_init__(self):
        self.dim = int(self.dim)
        if self.dim < 1:
            raise InvalidArgumentError("stack dim must be >= 1")
        if self.resample_mode not in RESAMPLE_MODES:
            raise InvalidArgumentError(
                f"resample_mode must be one of {RESAMPLE_MODES}, got {self.resample_mode!r}"
            )
        if int(self.master_seed) < 0:
            raise InvalidArgumentError("master_seed must be non-negative")
        seen_random = False
        for k, stage in enumerate(self.stages):
            if stage.kind == RANDOM:
                seen_random = True
            elif seen_random:
                raise InvalidArgumentError(
                    "trainable stages must precede random stages"
                )
            space = self.stage_dim(k)
            if stage.kind == TRAINABLE and stage.codebook.dim != space:
                raise InvalidArgumentError(
                    f"stage {k} codebook dim {stage.codebook.dim} != expected {space}"
                )
            if stage.kind == RANDOM:
                if self.big is None:
                    raise InvalidArgumentError("random stages require a big codebook")
                if self.big.dim != space:
                    raise InvalidArgumentError(
                        f"big codebook dim {self.big.dim} != stage space {space}"
                    )
                if stage.sample_size > self.big.n:
                    raise InvalidArgumentError(
                        "sample_size cannot exceed the big codebook size"
                    )
        if self.disjoint and self.big is not None:
            total = sum(s.sample_size for s in self.stages if s.kind == RANDOM)
            if total > self.big.n:
                raise InvalidArgumentError(
                    f"disjoint sampling needs sum of sample sizes ({total}) <= N_big ({self.big.n})"
                )

    @property
    def n_stages(self) -> int:
        return len(self.stages)

    @property
    def n_trainable(self) -> int:
        return sum(1 for s in self.stages if s.kind == TRAINABLE)

    @property
    def n_random(self) -> int:
        return sum(1 for s in self.stages if s.kind == RANDOM)

    def stage_dim(self, k: int) -> int:
        """Dimension of the space stage ``k`` selects codewords in."""
        stage = self.stages[k]
        return stage.projection.d_proj if stage.projection is not None else self.dim

    def codebook_sizes(self) -> tuple[int, ...]:
        """Per-stage size of the position-token space (N for trainable, s for random)."""
        return tuple(
            s.codebook.n if s.kind == TRAINABLE else s.sample_size for s in self.stages
        )

    def frame_rng(self, frame_index: int) -> np.random.Generator:
        """Stream that drives the sub-codebook draws of one frame (per-frame mode)."""
        return derive_rng(self.master_seed, KEY_SAMPLING, SAMPLE_FRAME, int(frame_index))

    def truncated(self, k: int) -> "QuantizerStack":
        """A stack running only the first ``k`` stages, sharing every codebook."""
        if not 0 <= k <= self.n_stages:
            raise InvalidArgumentError(f"truncation length {k} out of range")
        return QuantizerStack(
            dim=self.dim,
            stages=list(self.stages[:k]),
            big=self.big,
            resample_mode=self.resample_mode,
            master_seed=self.master_seed,
            disjoint=self.disjoint,
        )

    def normalized_big(self) -> np.ndarray:
        if self._normalized_big is None:
            self._normalized_big = l2_normalize_rows(self.big.codewords)
        return self._normalized_big

    def draw_subcodebooks(self, rng: np.random.Generator) -> list[SubCodebook]:
        """Draw one sub-codebook per random stage, chaining exclusions if disjoint."""
        draws: list[SubCodebook] = []
        used = np.empty(0, dtype=np.int64)
        for stage in self.stages:
            if stage.kind != RANDOM:
                continue
            exclude = used if (self.disjoint and used.size) else None
            sub = sample_subcodebook(self.big, stage.sample_size, rng, exclude=exclude)
            draws.append(sub)
            if self.disjoint:
                used = np.concatenate([used, sub.indices])
        return draws

    def fixed_draws(self) -> list[SubCodebook]:
        if self._fixed_draws is None:
            rng = derive_rng(self.master_seed, KEY_SAMPLING, SAMPLE_FIXED, 0)
            self._fixed_draws = self.draw_subcodebooks(rng)
        return self._fixed_draws

    def next_batch_draws(self) -> list[SubCodebook]:
        rng = derive_rng(self.master_seed, KEY_SAMPLING, SAMPLE_BATCH, self._batch_counter)
        self._batch_counter += 1
        return self.draw_subcodebooks(rng)


def build_stack(
    dim: int,
    n_trainable: int,
    trainable_size: int | None,
    n_random: int,
    big_size: int | None,
    sample_size: int | None,
    *,
    master_seed: int = 0,
    normalize: bool = False,
    d_proj: int | None = None,
    resample_mode: str = "per-frame",
    disjoint: bool = True,
) -> QuantizerStack:
    """Assemble a stack with Gaussian-initialized codebooks.

    All codebooks, projections, and the big codebook derive their seeds
    from ``master_seed``, so the whole stack is a pure function of its
    arguments.
    """
    dim = int(dim)
    n_trainable = int(n_trainable)
    n_random = int(n_random)
    if n_trainable < 0 or n_random < 0:
        raise InvalidArgumentError("stage counts must be non-negative")
    space = int(d_proj) if d_proj is not None else dim
    big = None
    if n_random > 0:
        if big_size is None or sample_size is None:
            raise InvalidArgumentError("random stages need big_size and sample_size")
        big = BigCodebook.gaussian(int(big_size), space, derive_seed(master_seed, KEY_BIG_INIT))
    stages: list[QuantizerStage] = []
    for i in range(n_trainable + n_random):
        projection = None
        if d_proj is not None:
            projection = make_projection(dim, d_proj, derive_seed(master_seed, KEY_PROJECTION, i))
        if i < n_trainable:
            if trainable_size is None:
                raise InvalidArgumentError("trainable stages need trainable_size")
            cb = init_gaussian(
                int(trainable_size), space, derive_seed(master_seed, KEY_TRAINABLE_INIT, i)
            )
            cb = Codebook(cb.codewords, id=f"stage-{i}", trainable=True, seed=cb.seed)
            stages.append(
                QuantizerStage(
                    kind=TRAINABLE, codebook=cb, projection=projection, normalize=normalize
                )
            )
        else:
            stages.append(
                QuantizerStage(
                    kind=RANDOM,
                    sample_size=int(sample_size),
                    projection=projection,
                    normalize=normalize,
                )
            )
    return QuantizerStack(
        dim=dim,
        stages=stages,
        big=big,
        resample_mode=resample_mode,
        master_seed=int(master_seed),
        disjoint=disjoint,
    )


@dataclass
class StageToken:
    """Token emitted by one stage for one frame.

    ``index`` is the position inside the stage's codebook or drawn
    sub-codebook (what a codec would transmit). For random stages
    ``big_index`` carries the absolute row in the big codebook and
    ``subcodebook`` the full draw, which diagnostics need.
    """

    stage: int
    index: int
    big_index: int | None = None
    subcodebook: np.ndarray | None = None


@dataclass
class FrameQuantization:
    """Full record of quantizing one frame.

    ``residuals[0]`` is the input; ``residuals[k]`` is what remains after
    stage ``k``. ``reconstruction`` is the sum of emitted codewords, so
    ``reconstruction + residuals[-1]`` recovers the input up to float
    accumulation.
    """

    tokens: list[StageToken]
    codewords: np.ndarray
    residuals: np.ndarray
    reconstruction: np.ndarray


@dataclass
class QuantizationResult:
    """Compact bookkeeping for a quantized frame sequence.

    ``tokens`` holds position-convention indices per frame and stage;
    ``big_tokens`` the absolute big-codebook rows of the random stages.
    ``stage_energies[k]`` is the mean squared residual norm after stage
    ``k`` (index 0 is the input energy).
    """

    tokens: np.ndarray
    big_tokens: np.ndarray
    reconstructions: np.ndarray
    stage_energies: np.ndarray
    n_trainable: int
    n_random: int
    codebook_sizes: tuple[int, ...]
    sample_sizes: tuple[int, ...]
    big_size: int | None
    dim: int
    resample_mode: str
    master_seed: int

    @property
    def n_frames(self) -> int:
        return self.reconstructions.shape[0]

    @property
    def n_stages(self) -> int:
        return self.n_trainable + self.n_random


def _trainable_pool(stack: QuantizerStack, k: int):
    stage = stack.stages[k]
    raw = stage.codebook.codewords
    sel = l2_normalize_rows(raw) if stage.normalize else raw
    return raw, sel, None


def _random_pool(stack: QuantizerStack, k: int, sub: SubCodebook):
    stage = stack.stages[k]
    raw = stack.big.codewords[sub.indices]
    sel = stack.normalized_big()[sub.indices] if stage.normalize else raw
    return raw, sel, sub


def _stage_pools(stack: QuantizerStack, draws: list[SubCodebook]):
    """Materialize (raw, selection-space, draw) codeword views per stage."""
    pools = []
    j = 0
    for k, stage in enumerate(stack.stages):
        if stage.kind == TRAINABLE:
            pools.append(_trainable_pool(stack, k))
        else:
            pools.append(_random_pool(stack, k, draws[j]))
            j += 1
    return pools


def _run_stages(
    stack: QuantizerStack,
    residuals: np.ndarray,
    pools,
    tokens: np.ndarray,
    big_tokens: np.ndarray,
    reconstructions: np.ndarray,
    energies_sums: np.ndarray,
    stage_start: int = 0,
    stage_end: int | None = None,
) -> None:
    """Advance ``residuals`` in place through stages [stage_start, stage_end)."""
    if stage_end is None:
        stage_end = stack.n_stages
    for k in range(stage_start, stage_end):
        stage = stack.stages[k]
        raw, sel, sub = pools[k - stage_start]
        target = (
            stage.projection.project_down(residuals)
            if stage.projection is not None
            else residuals
        )
        query = l2_normalize_rows(target) if stage.normalize else target
        idx, _ = _nn_batch(query, sel)
        emitted = raw[idx]
        if stage.projection is not None:
            emitted = stage.projection.project_up(emitted)
        residuals -= emitted
        reconstructions += emitted
        tokens[:, k] = idx
        if sub is not None:
            big_tokens[:, k - stack.n_trainable] = sub.indices[idx]
        energies_sums[k + 1] += float(np.einsum("ij,ij->", residuals, residuals))


def quantize_frame(
    x, stack: QuantizerStack, rng: np.random.Generator | None = None
) -> FrameQuantization:
    """Quantize one frame through the full cascade.

    In per-frame mode, ``rng`` drives the sub-codebook draws (defaulting
    to the stream of frame 0); in the other modes the stack's shared
    draws are used and ``rng`` is ignored.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1 or x.shape[0] != stack.dim:
        raise InvalidArgumentError(f"frame must be a vector of dim {stack.dim}")
    if not np.all(np.isfinite(x)):
        raise InvalidArgumentError("frame must be finite")
    if stack.resample_mode == "per-frame":
        draws = stack.draw_subcodebooks(rng if rng is not None else stack.frame_rng(0))
    elif stack.resample_mode == "fixed-per-run":
        draws = stack.fixed_draws()
    else:
        draws = stack.next_batch_draws()
    pools = _stage_pools(stack, draws)

    n = stack.n_stages
    residual = x.copy()[None, :]
    residuals = np.empty((n + 1, stack.dim))
    residuals[0] = x
    emitted_rows = np.zeros((n, stack.dim))
    tokens: list[StageToken] = []
    for k, stage in enumerate(stack.stages):
        raw, sel, sub = pools[k]
        target = (
            stage.projection.project_down(residual) if stage.projection is not None else residual
        )
        query = l2_normalize_rows(target) if stage.normalize else target
        idx, _ = _nn_batch(query, sel)
        i = int(idx[0])
        emitted = raw[i]
        if stage.projection is not None:
            emitted = stage.projection.project_up(emitted)
        residual = residual - emitted[None, :]
        residuals[k + 1] = residual[0]
        emitted_rows[k] = emitted
        tokens.append(
            StageToken(
                stage=k,
                index=i,
                big_index=None if sub is None else int(sub.indices[i]),
                subcodebook=None if sub is None else sub.indices,
            )
        )
    return FrameQuantization(
        tokens=tokens,
        codewords=emitted_rows,
        residuals=residuals,
        reconstruction=emitted_rows.sum(axis=0) if n else np.zeros(stack.dim),
    )


def quantize_sequence(frames, stack: QuantizerStack) -> QuantizationResult:
    """Quantize a ``(T, dim)`` frame matrix through the cascade.

    Sub-codebooks are redrawn according to ``stack.resample_mode``. The
    trainable prefix is processed batched; in per-frame mode the random
    suffix walks frames one by one with each frame's derived stream.
    """
    frames = np.asarray(frames, dtype=np.float64)
    if frames.ndim != 2 or frames.shape[0] < 1:
        raise InvalidArgumentError("frames must be a non-empty (T, dim) matrix")
    if frames.shape[1] != stack.dim:
        raise InvalidArgumentError(
            f"frames have dim {frames.shape[1]}, stack expects {stack.dim}"
        )
    if not np.all(np.isfinite(frames)):
        raise InvalidArgumentError("frames must be finite")

    t = frames.shape[0]
    n = stack.n_stages
    n_train = stack.n_trainable
    tokens = np.zeros((t, n), dtype=np.int64)
    big_tokens = np.zeros((t, stack.n_random), dtype=np.int64)
    reconstructions = np.zeros_like(frames)
    energies_sums = np.zeros(n + 1)
    residuals = frames.copy()
    energies_sums[0] = float(np.einsum("ij,ij->", residuals, residuals))

    if stack.resample_mode == "per-frame" and stack.n_random > 0:
        prefix_pools = [_trainable_pool(stack, k) for k in range(n_train)]
        _run_stages(
            stack,
            residuals,
            prefix_pools,
            tokens,
            big_tokens,
            reconstructions,
            energies_sums,
            stage_end=n_train,
        )
        for i in range(t):
            draws = stack.draw_subcodebooks(stack.frame_rng(i))
            pools = [
                _random_pool(stack, n_train + j, draws[j]) for j in range(len(draws))
            ]
            _run_stages(
                stack,
                residuals[i : i + 1],
                pools,
                tokens[i : i + 1],
                big_tokens[i : i + 1],
                reconstructions[i : i + 1],
                energies_sums,
                stage_start=n_train,
            )
    else:
        if stack.resample_mode == "fixed-per-run":
            draws = stack.fixed_draws()
        elif stack.resample_mode == "per-batch":
            draws = stack.next_batch_draws()
        else:
            draws = []
        pools = _stage_pools(stack, draws)
        _run_stages(
            stack, residuals, pools, tokens, big_tokens, reconstructions, energies_sums
        )

    return QuantizationResult(
        tokens=tokens,
        big_tokens=big_tokens,
        reconstructions=reconstructions,
        stage_energies=energies_sums / t,
        n_trainable=n_train,
        n_random=stack.n_random,
        codebook_sizes=stack.codebook_sizes(),
        sample_sizes=tuple(
            s.sample_size for s in stack.stages if s.kind == RANDOM
        ),
        big_size=None if stack.big is None else stack.big.n,
        dim=stack.dim,
        resample_mode=stack.resample_mode,
        master_seed=stack.master_seed,
    )


def dequantize(fq: FrameQuantization) -> np.ndarray:
    """Sum of emitted codewords; the zero vector for an empty token list."""
    if fq.codewords.shape[0] == 0:
        return np.zeros(fq.residuals.shape[1])
    return fq.codewords.sum(axis=0)


_TOKEN_HEADER = struct.Struct("<8sII")
_TOKEN_TAIL = struct.Struct("<QB")


def write_tokens(path, result: QuantizationResult) -> None:
    """Serialize a position-convention token stream.

    Layout: magic, u32 T, u32 n_stages, one u32 per stage (the sample
    size for random stages, 0 marks a trainable stage), u64 master seed,
    u8 resample mode, then a u32 token per frame per stage, row-major.
    """
    t, n = result.tokens.shape
    per_stage = [
        0 if k < result.n_trainable else result.sample_sizes[k - result.n_trainable]
        for k in range(n)
    ]
    with open(path, "wb") as fh:
        fh.write(_TOKEN_HEADER.pack(TOKEN_MAGIC, t, n))
        fh.write(np.asarray(per_stage, dtype="<u4").tobytes())
        fh.write(_TOKEN_TAIL.pack(result.master_seed, RESAMPLE_MODE_CODES[result.resample_mode]))
        fh.write(result.tokens.astype("<u4").tobytes(order="C"))


def read_tokens(path) -> dict:
    """Parse a token file into its header fields and ``(T, n_stages)`` tokens."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < _TOKEN_HEADER.size:
        raise ParseError("token file truncated before header")
    magic, t, n = _TOKEN_HEADER.unpack_from(blob)
    if magic != TOKEN_MAGIC:
        raise ParseError("not a token file (bad magic)")
    offset = _TOKEN_HEADER.size
    expected = offset + 4 * n + _TOKEN_TAIL.size + 4 * t * n
    if len(blob) != expected:
        raise ParseError(f"token file has {len(blob)} bytes, expected {expected}")
    per_stage = np.frombuffer(blob, dtype="<u4", count=n, offset=offset)
    offset += 4 * n
    master_seed, mode_code = _TOKEN_TAIL.unpack_from(blob, offset)
    offset += _TOKEN_TAIL.size
    if mode_code not in _MODE_FROM_CODE:
        raise ParseError(f"unknown resample mode code {mode_code}")
    tokens = np.frombuffer(blob, dtype="<u4", offset=offset).astype(np.int64).reshape(t, n)
    return {
        "tokens": tokens,
        "n_frames": t,
        "n_stages": n,
        "sample_sizes": tuple(int(s) for s in per_stage),
        "master_seed": int(master_seed),
        "resample_mode": _MODE_FROM_CODE[mode_code],
    }
