"""Usage diagnostics and distortion metrics.

Perplexity is the exponentiated Shannon entropy of the empirical
codeword-usage distribution: it equals the codebook size under uniform
usage and collapses to 1 when a single code absorbs everything.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass

import numpy as np

from .errors import InvalidArgumentError
from .quantizer import QuantizationResult

# Error energies below this count as a perfect match.
_SI_SDR_FLOOR = 1e-24


@dataclass
class UsageReport:
    """Occurrence counts for one codebook plus the derived perplexity."""

    counts: np.ndarray
    perplexity: float
    ratio_to_max: float
    codebook_size: int
    label: str = ""

    def formatted(self) -> str:
        """Table cell in the ``value (ratio)`` convention."""
        return f"{self.perplexity:.1f} ({self.ratio_to_max:.2f})"


def perplexity(counts) -> float:
    """Exponentiated entropy of the usage distribution implied by ``counts``.

    Zero counts contribute nothing (0 * log 0 := 0). All-zero counts are
    rejected.
    """
    c = np.asarray(counts, dtype=np.float64)
    if c.ndim != 1 or c.size == 0:
        raise InvalidArgumentError("counts must be a non-empty vector")
    if np.any(c < 0) or not np.all(np.isfinite(c)):
        raise InvalidArgumentError("counts must be finite and non-negative")
    total = c.sum()
    if total <= 0:
        raise InvalidArgumentError("at least one count must be positive")
    p = c / total
    nz = p > 0
    entropy = -float(np.sum(p[nz] * np.log(p[nz])))
    return float(np.exp(entropy))


def _counts_report(tokens: np.ndarray, codebook_size: int, label: str) -> UsageReport:
    if tokens.size == 0:
        raise InvalidArgumentError("empty token stream")
    if tokens.min() < 0 or tokens.max() >= codebook_size:
        raise InvalidArgumentError(
            f"token indices must lie in [0, {codebook_size})"
        )
    counts = np.bincount(tokens.ravel(), minlength=codebook_size)
    pp = perplexity(counts)
    return UsageReport(
        counts=counts,
        perplexity=pp,
        ratio_to_max=pp / codebook_size,
        codebook_size=int(codebook_size),
        label=label,
    )


def usage_histogram(
    tokens,
    stage: int | None = None,
    codebook_size: int | None = None,
    convention: str = "auto",
    label: str = "",
) -> UsageReport:
    """Usage counts and perplexity for one stage (or a raw index stream).

    ``tokens`` is either a :class:`QuantizationResult` together with a
    ``stage`` index, or a bare 1-D index array. For random stages the
    index convention follows ``codebook_size``: the stage's sample size
    selects positions within the drawn sub-codebook, the big-codebook
    size selects absolute rows. Pass ``convention`` explicitly when the
    two sizes coincide.
    """
    if codebook_size is None or int(codebook_size) < 1:
        raise InvalidArgumentError("codebook_size must be a positive integer")
    codebook_size = int(codebook_size)
    if convention not in ("auto", "position", "absolute"):
        raise InvalidArgumentError(f"unknown convention {convention!r}")

    if not isinstance(tokens, QuantizationResult):
        stream = np.asarray(tokens, dtype=np.int64)
        if stream.ndim != 1:
            raise InvalidArgumentError("a raw token stream must be 1-D")
        return _counts_report(stream, codebook_size, label)

    result = tokens
    if stage is None or not 0 <= stage < result.n_stages:
        raise InvalidArgumentError(
            f"stage must lie in [0, {result.n_stages}) for this result"
        )
    is_random = stage >= result.n_trainable
    if convention == "auto":
        if not is_random:
            convention = "position"
        elif result.big_size is not None and codebook_size == result.big_size:
            convention = "absolute"
        else:
            convention = "position"
    if convention == "absolute":
        if not is_random:
            raise InvalidArgumentError("trainable stages have no absolute convention")
        stream = result.big_tokens[:, stage - result.n_trainable]
    else:
        stream = result.tokens[:, stage]
    return _counts_report(stream, codebook_size, label)


def usage_reports(result: QuantizationResult) -> list[UsageReport]:
    """Per-stage usage reports plus the pooled big-codebook report.

    Random stages are reported at both granularities: absolute rows of
    the big codebook (labelled ``cb k``) and positions within the drawn
    sub-codebook (labelled ``cb k (position)``). The final ``big`` row
    pools the absolute tokens of every random stage.
    """
    reports: list[UsageReport] = []
    for k in range(result.n_stages):
        label = f"cb {k + 1}"
        if k < result.n_trainable:
            reports.append(
                usage_histogram(result, k, result.codebook_sizes[k], label=label)
            )
        else:
            reports.append(
                usage_histogram(
                    result, k, result.big_size, convention="absolute", label=label
                )
            )
            reports.append(
                usage_histogram(
                    result,
                    k,
                    result.codebook_sizes[k],
                    convention="position",
                    label=f"{label} (position)",
                )
            )
    if result.n_random > 0:
        reports.append(
            _counts_report(result.big_tokens.ravel(), result.big_size, label="big")
        )
    return reports


def si_sdr(estimate, reference) -> float:
    """Scale-invariant signal-to-distortion ratio in dB.

    The reference is scaled by ``alpha = <estimate, reference> /
    ||reference||^2``; the ratio compares the scaled-reference energy to
    the energy of the error ``alpha * reference - estimate``. Perfect
    matches (error energy below 1e-24) return ``+inf``; estimates
    orthogonal to the reference return ``-inf``.
    """
    e = np.asarray(estimate, dtype=np.float64).ravel()
    r = np.asarray(reference, dtype=np.float64).ravel()
    if e.shape != r.shape or e.size == 0:
        raise InvalidArgumentError("estimate and reference must have equal nonzero length")
    if not (np.all(np.isfinite(e)) and np.all(np.isfinite(r))):
        raise InvalidArgumentError("signals must be finite")
    ref_energy = float(np.dot(r, r))
    if ref_energy == 0.0:
        raise InvalidArgumentError("reference must be nonzero")
    alpha = float(np.dot(e, r)) / ref_energy
    target = alpha * r
    err = target - e
    num = float(np.dot(target, target))
    den = float(np.dot(err, err))
    if num == 0.0:
        return -math.inf
    if den < _SI_SDR_FLOOR:
        return math.inf
    return 10.0 * math.log10(num / den)


@dataclass
class DistortionProfile:
    """Per-stage residual energies and reconstruction quality."""

    stage_energies: np.ndarray
    final_mse: float
    si_sdr_frames: np.ndarray
    si_sdr_mean: float
    si_sdr_global: float


def distortion_profile(frames, result: QuantizationResult) -> DistortionProfile:
    """Residual energy per stage, final MSE, and SI-SDR of the reconstruction.

    ``stage_energies[k]`` is the mean squared residual norm after stage
    ``k`` (index 0 is the input energy); the final MSE divides the last
    entry by the dimension. SI-SDR is reported per frame, as the mean
    over frames, and globally over the flattened sequence.
    """
    frames = np.asarray(frames, dtype=np.float64)
    if frames.shape != (result.n_frames, result.dim):
        raise InvalidArgumentError("frames do not match the quantization result")
    energies = np.asarray(result.stage_energies, dtype=np.float64)
    per_frame = np.array(
        [si_sdr(result.reconstructions[i], frames[i]) for i in range(frames.shape[0])]
    )
    return DistortionProfile(
        stage_energies=energies,
        final_mse=float(energies[-1] / result.dim),
        si_sdr_frames=per_frame,
        si_sdr_mean=float(np.mean(per_frame)),
        si_sdr_global=si_sdr(result.reconstructions.ravel(), frames.ravel()),
    )


def perplexity_table(reports: list[UsageReport]) -> list[tuple[str, str]]:
    """One ``(label, "value (ratio)")`` row per report."""
    return [(rep.label, rep.formatted()) for rep in reports]


def jsonable(obj):
    """Recursively convert a report structure into JSON-serializable types.

    Non-finite floats become the strings ``"inf"``, ``"-inf"``, ``"nan"``
    so emitted JSON stays standard-compliant and byte-stable.
    """
    if isinstance(obj, dict):
        return {str(k): jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return [jsonable(v) for v in obj.tolist()]
    if isinstance(obj, (np.integer, int)):
        return int(obj)
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        if math.isnan(v):
            return "nan"
        if math.isinf(v):
            return "inf" if v > 0 else "-inf"
        return v
    return obj


def dump_report_json(report: dict, path=None) -> str:
    """Serialize a report deterministically; optionally write it to ``path``."""
    text = json.dumps(jsonable(report), indent=2, sort_keys=True) + "\n"
    if path is not None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(text)
    return text


def write_table_csv(path, header: list[str], rows: list[list[str]]) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        writer.writerows(rows)
