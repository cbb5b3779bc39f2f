"""Codebook fitting by residual k-means with exponential moving averages.

Each trainable stage is fitted on the residuals left by the stages
before it: assign every vector to its nearest codeword, fold the batch
into EMA-smoothed counts and sums, recompute the codewords, repeat.
Random stages and the big codebook are never touched.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

from .codebook import Codebook, BigCodebook, l2_normalize_rows, make_projection
from .errors import InvalidArgumentError, ParseError
from .quantizer import RANDOM, TRAINABLE, QuantizerStack, QuantizerStage
from .rng import RNG_ALGORITHM

DEFAULT_DECAY = 0.99
DEFAULT_EPSILON = 1e-5
DEFAULT_PASSES = 25

STACK_MANIFEST = "stack.json"


@dataclass
class EmaState:
    """EMA-smoothed cluster masses and vector sums for one codebook."""

    counts: np.ndarray
    sums: np.ndarray
    decay: float = DEFAULT_DECAY
    epsilon: float = DEFAULT_EPSILON

    def __post_init__(self):
        self.counts = np.asarray(self.counts, dtype=np.float64)
        self.sums = np.asarray(self.sums, dtype=np.float64)
        if self.counts.ndim != 1 or self.sums.ndim != 2:
            raise InvalidArgumentError("counts must be (N,), sums must be (N, dim)")
        if self.counts.shape[0] != self.sums.shape[0]:
            raise InvalidArgumentError("counts and sums disagree on N")
        if np.any(self.counts < 0):
            raise InvalidArgumentError("counts must be non-negative")
        if not 0.0 < self.decay < 1.0:
            raise InvalidArgumentError("decay must lie in (0, 1)")
        if self.epsilon <= 0.0:
            raise InvalidArgumentError("epsilon must be positive")

    @classmethod
    def from_codebook(
        cls,
        cb: Codebook,
        decay: float = DEFAULT_DECAY,
        epsilon: float = DEFAULT_EPSILON,
        initial_count: float = 1.0,
    ) -> "EmaState":
        """Seed the state so unassigned codes hold their current value."""
        counts = np.full(cb.n, float(initial_count))
        return cls(counts=counts, sums=cb.codewords * counts[:, None], decay=decay, epsilon=epsilon)


def ema_update(
    state: EmaState, cb: Codebook, batch: np.ndarray, assignments: np.ndarray
) -> tuple[EmaState, Codebook]:
    """Fold one assigned batch into the EMA state and recompute the codebook.

    Counts and sums decay by ``decay`` and absorb the batch statistics
    with weight ``1 - decay``; codewords are the smoothed ratio
    ``sums / counts`` with Laplace smoothing of the counts, so empty
    clusters stay finite and drift toward their prior value.
    """
    batch = np.asarray(batch, dtype=np.float64)
    assignments = np.asarray(assignments, dtype=np.int64)
    n, dim = state.sums.shape
    if batch.ndim != 2 or batch.shape[1] != dim:
        raise InvalidArgumentError(f"batch must be (M, {dim})")
    if assignments.shape != (batch.shape[0],):
        raise InvalidArgumentError("one assignment per batch row required")
    if assignments.size and (assignments.min() < 0 or assignments.max() >= n):
        raise InvalidArgumentError(f"assignments must lie in [0, {n})")

    gamma = state.decay
    batch_counts = np.bincount(assignments, minlength=n).astype(np.float64)
    batch_sums = np.empty((n, dim))
    for d in range(dim):
        batch_sums[:, d] = np.bincount(assignments, weights=batch[:, d], minlength=n)

    counts = gamma * state.counts + (1.0 - gamma) * batch_counts
    sums = gamma * state.sums + (1.0 - gamma) * batch_sums
    total = counts.sum()
    if total <= 0.0:
        raise InvalidArgumentError("EMA state carries no mass; seed counts > 0")
    smoothed = (counts + state.epsilon) / (total + n * state.epsilon) * total
    codewords = sums / smoothed[:, None]

    new_state = EmaState(counts=counts, sums=sums, decay=gamma, epsilon=state.epsilon)
    new_cb = Codebook(codewords, id=cb.id, trainable=cb.trainable, seed=cb.seed)
    return new_state, new_cb


def _assign(vectors: np.ndarray, cb: Codebook, normalize: bool) -> np.ndarray:
    """Batch nearest-codeword assignment through a KD-tree.

    Internal to training only; the quantization path keeps its own exact
    scan so this is free to trade tie-break order for speed.
    """
    if normalize:
        v = l2_normalize_rows(vectors)
        c = l2_normalize_rows(cb.codewords)
    else:
        v = vectors
        c = cb.codewords
    _, assignments = cKDTree(c).query(v, workers=-1)
    return assignments.astype(np.int64)


def fit_codebooks(
    stack: QuantizerStack,
    data: np.ndarray,
    passes: int = DEFAULT_PASSES,
    decay: float = DEFAULT_DECAY,
    epsilon: float = DEFAULT_EPSILON,
) -> QuantizerStack:
    """Fit every trainable stage of ``stack`` in order, in place.

    Stage ``i`` sees the residuals produced by the already-frozen stages
    before it. Stacks without trainable stages are returned unchanged.
    """
    data = np.asarray(data, dtype=np.float64)
    if data.ndim != 2 or data.shape[0] < 1:
        raise InvalidArgumentError("training data must be a non-empty (T, dim) matrix")
    if data.shape[1] != stack.dim:
        raise InvalidArgumentError(
            f"training data dim {data.shape[1]} != stack dim {stack.dim}"
        )
    if int(passes) < 1:
        raise InvalidArgumentError("passes must be >= 1")

    residuals = data.copy()
    for stage in stack.stages:
        if stage.kind != TRAINABLE:
            break
        vectors = (
            stage.projection.project_down(residuals)
            if stage.projection is not None
            else residuals
        )
        cb = stage.codebook
        if vectors.shape[0] < cb.n:
            warnings.warn(
                f"fitting a codebook of {cb.n} codewords on only {vectors.shape[0]} vectors",
                stacklevel=2,
            )
        state = EmaState.from_codebook(cb, decay=decay, epsilon=epsilon)
        for _ in range(int(passes)):
            assignments = _assign(vectors, cb, stage.normalize)
            state, cb = ema_update(state, cb, vectors, assignments)
        stage.codebook = cb
        assignments = _assign(vectors, cb, stage.normalize)
        emitted = cb.codewords[assignments]
        if stage.projection is not None:
            emitted = stage.projection.project_up(emitted)
        residuals -= emitted
    return stack


def commitment_codebook_losses(x: np.ndarray, result) -> tuple[float, float]:
    """Mean squared distance between each stage's input residual and its emitted codeword.

    Summed over stages and reported twice, once under each conventional
    name: without gradient stopping the two quantities coincide, so both
    are returned for interface parity with trainers that separate them.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape != (result.n_frames, result.dim):
        raise InvalidArgumentError("frames do not match the quantization result")
    # The residual update subtracts the emitted codeword, so the stage
    # loss equals the post-stage residual energy.
    loss = float(np.sum(result.stage_energies[1:]))
    return loss, loss


def save_stack(directory, stack: QuantizerStack, training: dict | None = None) -> None:
    """Write a stack as codebook files plus a JSON manifest."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    stages_meta = []
    for k, stage in enumerate(stack.stages):
        meta: dict = {"kind": stage.kind, "normalize": bool(stage.normalize)}
        if stage.projection is not None:
            meta["projection"] = {
                "d_proj": int(stage.projection.d_proj),
                "seed": int(stage.projection.seed),
            }
        else:
            meta["projection"] = None
        if stage.kind == TRAINABLE:
            filename = f"stage_{k:02d}.cb"
            stage.codebook.save(directory / filename)
            meta["codebook_file"] = filename
            meta["codebook_seed"] = int(stage.codebook.seed)
        else:
            meta["sample_size"] = int(stage.sample_size)
        stages_meta.append(meta)
    manifest = {
        "dim": int(stack.dim),
        "resample_mode": stack.resample_mode,
        "master_seed": int(stack.master_seed),
        "disjoint": bool(stack.disjoint),
        "rng_algorithm": RNG_ALGORITHM,
        "stages": stages_meta,
        "big_codebook_file": None,
        "training": training,
    }
    if stack.big is not None:
        stack.big.save(directory / "big_codebook.cb")
        manifest["big_codebook_file"] = "big_codebook.cb"
    with open(directory / STACK_MANIFEST, "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_stack(directory) -> tuple[QuantizerStack, dict]:
    """Read a stack directory back; returns ``(stack, manifest)``.

    Codewords round-trip through the 32-bit file format; projections are
    reconstructed from their recorded seeds.
    """
    directory = Path(directory)
    manifest_path = directory / STACK_MANIFEST
    try:
        with open(manifest_path, "r", encoding="utf-8") as fh:
            manifest = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ParseError(f"stack manifest is not valid JSON: {exc}") from exc
    for key in ("dim", "resample_mode", "master_seed", "disjoint", "stages"):
        if key not in manifest:
            raise ParseError(f"stack manifest missing field {key!r}")
    dim = int(manifest["dim"])
    big = None
    if manifest.get("big_codebook_file"):
        big = BigCodebook.load(directory / manifest["big_codebook_file"])
    stages = []
    for k, meta in enumerate(manifest["stages"]):
        projection = None
        if meta.get("projection"):
            projection = make_projection(
                dim, int(meta["projection"]["d_proj"]), int(meta["projection"]["seed"])
            )
        if meta["kind"] == TRAINABLE:
            cb = Codebook.load(
                directory / meta["codebook_file"], id=f"stage-{k}", trainable=True
            )
            stages.append(
                QuantizerStage(
                    kind=TRAINABLE,
                    codebook=cb,
                    projection=projection,
                    normalize=bool(meta["normalize"]),
                )
            )
        elif meta["kind"] == RANDOM:
            stages.append(
                QuantizerStage(
                    kind=RANDOM,
                    sample_size=int(meta["sample_size"]),
                    projection=projection,
                    normalize=bool(meta["normalize"]),
                )
            )
        else:
            raise ParseError(f"stack manifest has unknown stage kind {meta.get('kind')!r}")
    stack = QuantizerStack(
        dim=dim,
        stages=stages,
        big=big,
        resample_mode=manifest["resample_mode"],
        master_seed=int(manifest["master_seed"]),
        disjoint=bool(manifest["disjoint"]),
    )
    return stack, manifest
