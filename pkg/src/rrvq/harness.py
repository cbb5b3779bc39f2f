"""Experiment runner reproducing the variant-grid study at desk scale.

An :class:`ExperimentConfig` is one column of the variant grid: stack
shape, big-codebook and sample sizes, collapse mitigants, resample mode,
data source, and a list of seeds. Each seed builds and fits its own
stack; reports carry per-seed rows plus mean and sample-std aggregates.
Everything except wall-time fields is a pure function of the config.
"""

from __future__ import annotations

import json
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import InvalidArgumentError
from .features import read_features, synth_gaussian, synth_gmm
from .metrics import distortion_profile, usage_reports
from .quantizer import RESAMPLE_MODES, QuantizerStack, build_stack, quantize_sequence
from .rng import RNG_ALGORITHM, KEY_DATA, derive_seed
from .training import (
    DEFAULT_DECAY,
    DEFAULT_EPSILON,
    DEFAULT_PASSES,
    commitment_codebook_losses,
    fit_codebooks,
)

THREADS_ENV = "RRVQ_THREADS"

# Desk-scale stand-ins for full-corpus training: small enough to run in
# minutes, large enough to keep the usage statistics stable.
DESK_DIM_SYNTH = 8
DESK_DIM_MEL = 32
DESK_TRAINABLE_SIZE = 256
DESK_N_TRAINABLE = 5
DESK_N_RANDOM = 4
DESK_BIG_SIZE = 4096
DESK_SAMPLE_SIZE = 512
DESK_TRAIN_FRAMES = 100_000
DESK_EVAL_FRAMES = 20_000
DESK_DATA_SEED = 20_240_101
DESK_SEEDS = (1, 2, 3, 4, 5)


@dataclass
class Mitigants:
    """Collapse mitigants applied per stage.

    ``normalize`` switches selection to the distance between
    L2-normalized latents and codewords; ``d_proj`` quantizes in a fixed
    orthonormal subspace of that many dimensions.
    """

    normalize: bool = False
    d_proj: int | None = None


@dataclass
class DataSpec:
    """Where the train and eval frames come from.

    ``kind`` is ``gaussian`` or ``gmm`` (generated from ``seed``,
    independent of the experiment seeds, like a fixed dataset) or
    ``files`` pointing at feature files.
    """

    kind: str = "gaussian"
    train_frames: int = DESK_TRAIN_FRAMES
    eval_frames: int = DESK_EVAL_FRAMES
    seed: int = DESK_DATA_SEED
    clusters: int = 2
    separation: float = 20.0
    train_path: str | None = None
    eval_path: str | None = None


@dataclass
class ExperimentConfig:
    """One fully-specified experiment: stack shape, mitigants, data, seeds."""

    name: str = "experiment"
    dim: int = DESK_DIM_SYNTH
    n_trainable: int = DESK_N_TRAINABLE
    trainable_size: int = DESK_TRAINABLE_SIZE
    n_random: int = DESK_N_RANDOM
    big_size: int = DESK_BIG_SIZE
    sample_size: int = DESK_SAMPLE_SIZE
    mitigants: Mitigants = field(default_factory=Mitigants)
    resample_mode: str = "per-frame"
    disjoint: bool = True
    data: DataSpec = field(default_factory=DataSpec)
    seeds: tuple[int, ...] = DESK_SEEDS
    passes: int = DEFAULT_PASSES
    decay: float = DEFAULT_DECAY
    epsilon: float = DEFAULT_EPSILON

    def validate(self) -> None:
        """Reject the config before any work, naming the violated invariant."""
        if self.dim < 1:
            raise InvalidArgumentError("config.dim must be >= 1")
        if self.n_trainable < 0 or self.n_random < 0:
            raise InvalidArgumentError("stage counts must be non-negative")
        if self.n_trainable + self.n_random < 1:
            raise InvalidArgumentError("config needs at least one stage (n_trainable + n_random >= 1)")
        if self.n_trainable > 0 and self.trainable_size < 1:
            raise InvalidArgumentError("trainable_size must be >= 1")
        if self.n_random > 0:
            if self.big_size < 1:
                raise InvalidArgumentError("big_size must be >= 1")
            if not 1 <= self.sample_size <= self.big_size:
                raise InvalidArgumentError(
                    f"sample_size must satisfy 1 <= s <= N_big ({self.sample_size} vs {self.big_size})"
                )
            if self.disjoint and self.n_random * self.sample_size > self.big_size:
                raise InvalidArgumentError(
                    "disjoint sampling requires n_random * sample_size <= big_size "
                    f"({self.n_random} * {self.sample_size} > {self.big_size})"
                )
        if self.mitigants.d_proj is not None and not 1 <= self.mitigants.d_proj < self.dim:
            raise InvalidArgumentError(
                f"mitigants.d_proj must satisfy 1 <= d_proj < dim ({self.mitigants.d_proj} vs {self.dim})"
            )
        if self.resample_mode not in RESAMPLE_MODES:
            raise InvalidArgumentError(
                f"resample_mode must be one of {RESAMPLE_MODES}, got {self.resample_mode!r}"
            )
        if len(self.seeds) < 1:
            raise InvalidArgumentError("config needs at least one seed")
        if any(int(s) < 0 for s in self.seeds):
            raise InvalidArgumentError("seeds must be non-negative integers")
        if not 0.0 < self.decay < 1.0:
            raise InvalidArgumentError("decay must lie in (0, 1)")
        if self.epsilon <= 0:
            raise InvalidArgumentError("epsilon must be positive")
        if self.n_trainable > 0 and self.passes < 1:
            raise InvalidArgumentError("passes must be >= 1 when trainable stages exist")
        if self.data.kind not in ("gaussian", "gmm", "files"):
            raise InvalidArgumentError(f"unknown data kind {self.data.kind!r}")
        if self.data.kind == "files":
            if not self.data.train_path or not self.data.eval_path:
                raise InvalidArgumentError("data kind 'files' needs train_path and eval_path")
        else:
            if self.data.train_frames < 1 or self.data.eval_frames < 1:
                raise InvalidArgumentError("train_frames and eval_frames must be >= 1")
            if self.data.kind == "gmm" and self.data.clusters < 1:
                raise InvalidArgumentError("gmm data needs clusters >= 1")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["seeds"] = [int(s) for s in self.seeds]
        return d

    @classmethod
    def from_dict(cls, raw: dict) -> "ExperimentConfig":
        raw = dict(raw)
        unknown = set(raw) - {f for f in cls.__dataclass_fields__}
        if unknown:
            raise InvalidArgumentError(f"unknown config fields: {sorted(unknown)}")
        if "mitigants" in raw and isinstance(raw["mitigants"], dict):
            raw["mitigants"] = Mitigants(**raw["mitigants"])
        if "data" in raw and isinstance(raw["data"], dict):
            raw["data"] = DataSpec(**raw["data"])
        if "seeds" in raw:
            raw["seeds"] = tuple(int(s) for s in raw["seeds"])
        return cls(**raw)


def default_config(kind: str = "synthetic") -> ExperimentConfig:
    """The desk-scale default: five trained stages plus four random ones.

    The projection mitigant is on by default (quantization in a quarter
    of the dimensions); normalized-distance selection is off, since with
    fixed Gaussian codebooks and no trained encoder it picks codewords
    by direction alone and hurts reconstruction.
    """
    if kind == "synthetic":
        dim = DESK_DIM_SYNTH
        data = DataSpec(kind="gaussian")
    elif kind == "mel":
        dim = DESK_DIM_MEL
        data = DataSpec(kind="gaussian")
    else:
        raise InvalidArgumentError(f"unknown default kind {kind!r}")
    return ExperimentConfig(
        name=f"default-{kind}",
        dim=dim,
        mitigants=Mitigants(normalize=False, d_proj=max(1, dim // 4)),
        data=data,
    )


def variant_configs() -> list[ExperimentConfig]:
    """Desk-scale analog of the variant grid.

    Preserves the studied ratios: a baseline with and without mitigants
    (no random stages), random stacks with N_big/s of 8 and 32 with and
    without mitigants, a doubled big codebook, and a deeper random tail.
    """
    base = default_config("synthetic")
    mit_on = Mitigants(normalize=True, d_proj=base.mitigants.d_proj)
    mit_off = Mitigants(normalize=False, d_proj=None)

    def cfg(name, **kw) -> ExperimentConfig:
        c = ExperimentConfig(
            name=name,
            dim=base.dim,
            mitigants=base.mitigants,
            data=DataSpec(kind="gaussian"),
        )
        for key, value in kw.items():
            setattr(c, key, value)
        return c

    return [
        cfg("baseline", n_random=0, big_size=0, sample_size=0, mitigants=mit_on),
        cfg("baseline-raw", n_random=0, big_size=0, sample_size=0, mitigants=mit_off),
        cfg("rand-s8", mitigants=mit_on),
        cfg("rand-s8-raw", mitigants=mit_off),
        cfg("rand-s32-raw", sample_size=DESK_BIG_SIZE // 32, mitigants=mit_off),
        cfg("rand-big2-s32", big_size=2 * DESK_BIG_SIZE, sample_size=DESK_SAMPLE_SIZE // 2, mitigants=mit_on),
        cfg(
            "rand-big2-s32-deep",
            n_trainable=3,
            n_random=6,
            big_size=2 * DESK_BIG_SIZE,
            sample_size=DESK_SAMPLE_SIZE // 2,
            mitigants=mit_on,
        ),
    ]


def _load_frames(path) -> np.ndarray:
    return read_features(path).frames.astype(np.float64)


def resolve_data(cfg: ExperimentConfig) -> tuple[np.ndarray, np.ndarray]:
    """Materialize the (train, eval) frame matrices for a config."""
    spec = cfg.data
    if spec.kind == "files":
        train = _load_frames(spec.train_path)
        eval_ = _load_frames(spec.eval_path)
        if train.shape[1] != cfg.dim or eval_.shape[1] != cfg.dim:
            raise InvalidArgumentError(
                f"feature files have dim {train.shape[1]}/{eval_.shape[1]}, config expects {cfg.dim}"
            )
        return train, eval_
    train_seed = derive_seed(spec.seed, KEY_DATA, 0)
    eval_seed = derive_seed(spec.seed, KEY_DATA, 1)
    if spec.kind == "gaussian":
        train = synth_gaussian(spec.train_frames, cfg.dim, train_seed)
        eval_ = synth_gaussian(spec.eval_frames, cfg.dim, eval_seed)
    else:
        train = synth_gmm(spec.train_frames, cfg.dim, spec.clusters, spec.separation, train_seed)
        eval_ = synth_gmm(spec.eval_frames, cfg.dim, spec.clusters, spec.separation, eval_seed)
    return train.frames.astype(np.float64), eval_.frames.astype(np.float64)


def build_stack_from_config(cfg: ExperimentConfig, seed: int) -> QuantizerStack:
    return build_stack(
        dim=cfg.dim,
        n_trainable=cfg.n_trainable,
        trainable_size=cfg.trainable_size if cfg.n_trainable else None,
        n_random=cfg.n_random,
        big_size=cfg.big_size if cfg.n_random else None,
        sample_size=cfg.sample_size if cfg.n_random else None,
        master_seed=int(seed),
        normalize=cfg.mitigants.normalize,
        d_proj=cfg.mitigants.d_proj,
        resample_mode=cfg.resample_mode,
        disjoint=cfg.disjoint,
    )


def _metric_block(frames: np.ndarray, result) -> dict:
    profile = distortion_profile(frames, result)
    commitment, codebook_loss = commitment_codebook_losses(frames, result)
    return {
        "final_mse": profile.final_mse,
        "si_sdr": profile.si_sdr_global,
        "si_sdr_frame_mean": profile.si_sdr_mean,
        "stage_energies": [float(e) for e in profile.stage_energies],
        "commitment_loss": commitment,
        "codebook_loss": codebook_loss,
    }


def _perplexity_rows(result) -> list[dict]:
    return [
        {
            "label": rep.label,
            "codebook_size": rep.codebook_size,
            "perplexity": rep.perplexity,
            "ratio_to_max": rep.ratio_to_max,
        }
        for rep in usage_reports(result)
    ]


def _run_seed(cfg: ExperimentConfig, seed: int, train: np.ndarray, eval_: np.ndarray) -> dict:
    stack = build_stack_from_config(cfg, seed)
    t0 = time.perf_counter()
    if cfg.n_trainable > 0:
        fit_codebooks(stack, train, passes=cfg.passes, decay=cfg.decay, epsilon=cfg.epsilon)
    train_time = time.perf_counter() - t0
    t0 = time.perf_counter()
    result = quantize_sequence(eval_, stack)
    eval_time = time.perf_counter() - t0
    row = {"seed": int(seed)}
    row.update(_metric_block(eval_, result))
    row["perplexity"] = _perplexity_rows(result)
    row["train_wall_time_s"] = train_time
    row["eval_wall_time_s"] = eval_time
    return row


def _seed_worker(cfg_dict: dict, seed: int) -> dict:
    cfg = ExperimentConfig.from_dict(cfg_dict)
    train, eval_ = resolve_data(cfg)
    return _run_seed(cfg, seed, train, eval_)


def _thread_budget() -> int:
    raw = os.environ.get(THREADS_ENV, "1")
    try:
        return max(1, int(raw))
    except ValueError:
        raise InvalidArgumentError(f"{THREADS_ENV} must be an integer, got {raw!r}")


def _mean_std(values: list[float]) -> dict:
    arr = np.asarray(values, dtype=np.float64)
    out = {"mean": float(arr.mean())}
    if arr.size > 1:
        out["std"] = float(arr.std(ddof=1))
    return out


def _aggregate(rows: list[dict]) -> dict:
    agg: dict = {"seeds": [row["seed"] for row in rows]}
    for key in ("final_mse", "si_sdr", "si_sdr_frame_mean", "commitment_loss", "codebook_loss"):
        agg[key] = _mean_std([row[key] for row in rows])
    energies = np.asarray([row["stage_energies"] for row in rows], dtype=np.float64)
    agg["stage_energies"] = {"mean": [float(v) for v in energies.mean(axis=0)]}
    if energies.shape[0] > 1:
        agg["stage_energies"]["std"] = [float(v) for v in energies.std(axis=0, ddof=1)]
    pp_rows = []
    for i, ref in enumerate(rows[0]["perplexity"]):
        pps = [row["perplexity"][i]["perplexity"] for row in rows]
        ratios = [row["perplexity"][i]["ratio_to_max"] for row in rows]
        entry = {
            "label": ref["label"],
            "codebook_size": ref["codebook_size"],
            "perplexity": _mean_std(pps),
            "ratio_to_max": _mean_std(ratios),
        }
        pp_rows.append(entry)
    agg["perplexity"] = pp_rows
    agg["wall_time_s"] = {
        "mean": float(
            np.mean([row["train_wall_time_s"] + row["eval_wall_time_s"] for row in rows])
        )
    }
    return agg


def run_experiment(cfg: ExperimentConfig) -> dict:
    """Run one config over all of its seeds and aggregate the metrics.

    Seeds run sequentially unless the ``RRVQ_THREADS`` environment
    variable allows more parallel workers.
    """
    cfg.validate()
    workers = min(_thread_budget(), len(cfg.seeds))
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            rows = list(pool.map(_seed_worker, [cfg.to_dict()] * len(cfg.seeds), cfg.seeds))
    else:
        train, eval_ = resolve_data(cfg)
        rows = [_run_seed(cfg, seed, train, eval_) for seed in cfg.seeds]
    return {
        "config": cfg.to_dict(),
        "rng_algorithm": RNG_ALGORITHM,
        "per_seed": rows,
        "aggregate": _aggregate(rows),
    }


def compare_truncation(cfg: ExperimentConfig, k: int) -> dict:
    """Evaluate the same trained stacks truncated to ``k`` stages vs in full.

    Per seed the stack is built and fitted once; the truncation shares
    its codebooks and draws, so the first ``k`` tokens coincide and the
    deltas isolate what the remaining stages contribute.
    """
    cfg.validate()
    n_stages = cfg.n_trainable + cfg.n_random
    if not 0 <= int(k) <= n_stages:
        raise InvalidArgumentError(
            f"truncation length k={k} must lie in [0, {n_stages}]"
        )
    k = int(k)
    train, eval_ = resolve_data(cfg)
    rows = []
    for seed in cfg.seeds:
        stack = build_stack_from_config(cfg, seed)
        if cfg.n_trainable > 0:
            fit_codebooks(stack, train, passes=cfg.passes, decay=cfg.decay, epsilon=cfg.epsilon)
        full = _metric_block(eval_, quantize_sequence(eval_, stack))
        truncated = _metric_block(eval_, quantize_sequence(eval_, stack.truncated(k)))
        rows.append(
            {
                "seed": int(seed),
                "full": full,
                "truncated": truncated,
                "delta": {
                    "final_mse": full["final_mse"] - truncated["final_mse"],
                    "si_sdr": full["si_sdr"] - truncated["si_sdr"],
                },
            }
        )
    deltas_mse = [row["delta"]["final_mse"] for row in rows]
    deltas_sdr = [row["delta"]["si_sdr"] for row in rows]
    return {
        "config": cfg.to_dict(),
        "k": k,
        "rng_algorithm": RNG_ALGORITHM,
        "per_seed": rows,
        "aggregate": {
            "delta_final_mse": _mean_std(deltas_mse),
            "delta_si_sdr": _mean_std(deltas_sdr),
        },
    }


def grid_table(reports: list[dict]) -> tuple[list[str], list[list[str]]]:
    """Merge experiment reports into one header row plus formatted rows."""
    header = ["metric"] + [rep["config"]["name"] for rep in reports]
    if not reports:
        return header, []

    def fmt(block: dict, digits: int = 4) -> str:
        mean = block["mean"]
        if isinstance(mean, str):
            return mean
        text = f"{mean:.{digits}g}"
        if "std" in block:
            text += f" +- {block['std']:.2g}"
        return text

    rows = []
    for key in ("final_mse", "si_sdr", "wall_time_s"):
        rows.append([key] + [fmt(rep["aggregate"][key]) for rep in reports])
    labels: list[str] = []
    for rep in reports:
        for entry in rep["aggregate"]["perplexity"]:
            if entry["label"] not in labels:
                labels.append(entry["label"])
    for label in labels:
        row = [f"pp {label}"]
        for rep in reports:
            match = next(
                (e for e in rep["aggregate"]["perplexity"] if e["label"] == label), None
            )
            if match is None:
                row.append("")
            else:
                row.append(
                    f"{match['perplexity']['mean']:.1f} ({match['ratio_to_max']['mean']:.2f})"
                )
        rows.append(row)
    return header, rows


def run_grid(cfgs: list[ExperimentConfig]) -> dict:
    """Run configs sequentially and merge them into one comparative table."""
    reports = [run_experiment(cfg) for cfg in cfgs]
    header, rows = grid_table(reports)
    return {"reports": reports, "header": header, "rows": rows}


def load_config(path) -> ExperimentConfig:
    with open(path, "r", encoding="utf-8") as fh:
        try:
            raw = json.load(fh)
        except json.JSONDecodeError as exc:
            raise InvalidArgumentError(f"config is not valid JSON: {exc}") from exc
    if not isinstance(raw, dict):
        raise InvalidArgumentError("config JSON must be an object")
    return ExperimentConfig.from_dict(raw)


def load_config_list(path) -> list[ExperimentConfig]:
    with open(path, "r", encoding="utf-8") as fh:
        try:
            raw = json.load(fh)
        except json.JSONDecodeError as exc:
            raise InvalidArgumentError(f"config list is not valid JSON: {exc}") from exc
    if not isinstance(raw, list):
        raise InvalidArgumentError("config list JSON must be an array")
    return [ExperimentConfig.from_dict(item) for item in raw]
