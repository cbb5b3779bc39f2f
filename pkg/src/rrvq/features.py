"""Feature frames: synthetic generators, a log-mel front end, and file I/O.

Frames are stored as float32 row vectors, one frame per row, matching
the on-disk feature format exactly so round trips are bit-exact.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidArgumentError, ParseError, UnsupportedFormatError
from .rng import derive_rng

FEATURE_MAGIC = b"RRVQF1\x00\x00"
_FEATURE_HEADER = struct.Struct("<8sIIII")

DEFAULT_N_FFT = 1024
DEFAULT_HOP = 256
DEFAULT_N_MELS = 32

SOURCE_SYNTHETIC = "synthetic"
SOURCE_AUDIO = "audio"


@dataclass
class FeatureSet:
    """A (T, D) float32 frame matrix plus provenance metadata."""

    frames: np.ndarray
    sample_rate_hz: int | None = None
    source: str = SOURCE_SYNTHETIC
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        frames = np.ascontiguousarray(self.frames, dtype="<f4")
        if frames.ndim != 2 or frames.shape[0] < 1 or frames.shape[1] < 1:
            raise InvalidArgumentError("frames must form a non-empty (T, D) matrix")
        if not np.all(np.isfinite(frames)):
            raise InvalidArgumentError("frames must be finite")
        self.frames = frames

    @property
    def n_frames(self) -> int:
        return self.frames.shape[0]

    @property
    def dim(self) -> int:
        return self.frames.shape[1]


def synth_gaussian(n_frames: int, dim: int, seed: int) -> FeatureSet:
    """I.i.d. standard normal frames, deterministic for a fixed seed."""
    n_frames = int(n_frames)
    dim = int(dim)
    if n_frames < 1 or dim < 1:
        raise InvalidArgumentError("synth_gaussian requires n_frames >= 1 and dim >= 1")
    frames = derive_rng(seed).standard_normal((n_frames, dim))
    return FeatureSet(
        frames=frames,
        sample_rate_hz=None,
        source=SOURCE_SYNTHETIC,
        metadata={"generator": "gaussian", "seed": int(seed)},
    )


def _cluster_means(dim: int, clusters: int, separation: float, rng) -> np.ndarray:
    """Cluster means at pairwise distance >= separation / sqrt(2).

    The first 2*dim means sit at +/- (separation/2) along the axes of a
    random orthonormal frame; any further means fall back to random
    directions without a separation guarantee.
    """
    q, r = np.linalg.qr(rng.standard_normal((dim, dim)))
    signs = np.sign(np.diag(r))
    signs[signs == 0] = 1.0
    q = q * signs[None, :]
    means = np.zeros((clusters, dim))
    for i in range(clusters):
        if i < 2 * dim:
            direction = q[:, i // 2] * (1.0 if i % 2 == 0 else -1.0)
        else:
            g = rng.standard_normal(dim)
            direction = g / np.linalg.norm(g)
        means[i] = 0.5 * separation * direction
    return means


def synth_gmm(
    n_frames: int, dim: int, clusters: int, separation: float, seed: int
) -> FeatureSet:
    """Equal-weight Gaussian mixture with unit covariance components."""
    n_frames = int(n_frames)
    dim = int(dim)
    clusters = int(clusters)
    separation = float(separation)
    if n_frames < 1 or dim < 1:
        raise InvalidArgumentError("synth_gmm requires n_frames >= 1 and dim >= 1")
    if clusters < 1:
        raise InvalidArgumentError("clusters must be >= 1")
    if separation < 0:
        raise InvalidArgumentError("separation must be >= 0")
    rng = derive_rng(seed)
    means = _cluster_means(dim, clusters, separation, rng)
    labels = rng.integers(clusters, size=n_frames)
    frames = means[labels] + rng.standard_normal((n_frames, dim))
    return FeatureSet(
        frames=frames,
        sample_rate_hz=None,
        source=SOURCE_SYNTHETIC,
        metadata={
            "generator": "gmm",
            "seed": int(seed),
            "clusters": clusters,
            "separation": separation,
            "means": means.tolist(),
        },
    )


_RIFF_FMT = struct.Struct("<HHIIHH")


def read_wav(path) -> tuple[np.ndarray, int]:
    """Read a PCM WAV file into a mono float64 signal in [-1, 1].

    Supports 16-bit integer and 32-bit float encodings; multichannel
    audio is averaged down to mono.
    """
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 12 or blob[:4] != b"RIFF" or blob[8:12] != b"WAVE":
        raise ParseError("not a RIFF/WAVE file")

    fmt = None
    data = None
    offset = 12
    while offset + 8 <= len(blob):
        chunk_id = blob[offset : offset + 4]
        (chunk_size,) = struct.unpack_from("<I", blob, offset + 4)
        body = blob[offset + 8 : offset + 8 + chunk_size]
        if len(body) < chunk_size:
            raise ParseError(f"chunk {chunk_id!r} truncated")
        if chunk_id == b"fmt ":
            if chunk_size < _RIFF_FMT.size:
                raise ParseError("fmt chunk too short")
            fmt = _RIFF_FMT.unpack_from(body)
            # WAVE_FORMAT_EXTENSIBLE carries the real code in the sub-format GUID.
            if fmt[0] == 0xFFFE and chunk_size >= 40:
                (sub_code,) = struct.unpack_from("<H", body, 24)
                fmt = (sub_code,) + fmt[1:]
        elif chunk_id == b"data":
            data = body
        offset += 8 + chunk_size + (chunk_size & 1)

    if fmt is None:
        raise ParseError("missing fmt chunk")
    if data is None:
        raise ParseError("missing data chunk")
    if len(data) == 0:
        raise ParseError("zero-length data chunk")

    format_code, channels, sample_rate, _, _, bits = fmt
    if channels < 1:
        raise ParseError("fmt chunk declares zero channels")
    if format_code == 1 and bits == 16:
        samples = np.frombuffer(data, dtype="<i2").astype(np.float64) / 32768.0
    elif format_code == 3 and bits == 32:
        samples = np.frombuffer(data, dtype="<f4").astype(np.float64)
    else:
        raise UnsupportedFormatError(
            f"unsupported WAV encoding (format code {format_code}, {bits}-bit); "
            "expected 16-bit PCM or 32-bit float"
        )
    if samples.size % channels != 0:
        raise ParseError("data chunk length is not a whole number of sample frames")
    if channels > 1:
        samples = samples.reshape(-1, channels).mean(axis=1)
    return samples, int(sample_rate)


def _hann_periodic(n: int) -> np.ndarray:
    return 0.5 - 0.5 * np.cos(2.0 * np.pi * np.arange(n) / n)


def _hz_to_mel(hz):
    """Mel scale with a linear region below 1 kHz and log spacing above."""
    hz = np.asarray(hz, dtype=np.float64)
    f_sp = 200.0 / 3.0
    min_log_hz = 1000.0
    min_log_mel = min_log_hz / f_sp
    logstep = np.log(6.4) / 27.0
    mel = hz / f_sp
    above = hz >= min_log_hz
    mel = np.where(above, min_log_mel + np.log(np.maximum(hz, min_log_hz) / min_log_hz) / logstep, mel)
    return mel


def _mel_to_hz(mel):
    mel = np.asarray(mel, dtype=np.float64)
    f_sp = 200.0 / 3.0
    min_log_hz = 1000.0
    min_log_mel = min_log_hz / f_sp
    logstep = np.log(6.4) / 27.0
    hz = mel * f_sp
    above = mel >= min_log_mel
    hz = np.where(above, min_log_hz * np.exp(logstep * (mel - min_log_mel)), hz)
    return hz


def mel_filterbank(sample_rate: int, n_fft: int, n_mels: int) -> np.ndarray:
    """Area-normalized triangular filters from 0 Hz to the Nyquist frequency."""
    fft_freqs = np.arange(n_fft // 2 + 1) * (sample_rate / n_fft)
    mel_points = np.linspace(_hz_to_mel(0.0), _hz_to_mel(sample_rate / 2.0), n_mels + 2)
    hz_points = _mel_to_hz(mel_points)
    fb = np.zeros((n_mels, fft_freqs.size))
    for m in range(n_mels):
        lower, center, upper = hz_points[m], hz_points[m + 1], hz_points[m + 2]
        rising = (fft_freqs - lower) / max(center - lower, 1e-12)
        falling = (upper - fft_freqs) / max(upper - center, 1e-12)
        fb[m] = np.maximum(0.0, np.minimum(rising, falling))
        fb[m] *= 2.0 / (upper - lower)
    return fb


def stft_magnitudes(signal, n_fft: int, hop: int) -> np.ndarray:
    """Hann-windowed magnitude STFT with no padding.

    A signal of length L yields ``(L - n_fft) // hop + 1`` frames of
    ``n_fft // 2 + 1`` bins each.
    """
    signal = np.asarray(signal, dtype=np.float64).ravel()
    n_fft = int(n_fft)
    hop = int(hop)
    if n_fft < 2 or (n_fft & (n_fft - 1)) != 0:
        raise InvalidArgumentError("n_fft must be a power of two >= 2")
    if not 1 <= hop <= n_fft:
        raise InvalidArgumentError("hop must satisfy 1 <= hop <= n_fft")
    if signal.size < n_fft:
        raise InvalidArgumentError(
            f"signal of {signal.size} samples is shorter than one window ({n_fft})"
        )
    n_frames = (signal.size - n_fft) // hop + 1
    window = _hann_periodic(n_fft)
    starts = np.arange(n_frames) * hop
    segments = signal[starts[:, None] + np.arange(n_fft)[None, :]] * window[None, :]
    return np.abs(np.fft.rfft(segments, axis=1))


def log_mel_frames(
    signal,
    sample_rate: int,
    n_fft: int = DEFAULT_N_FFT,
    hop: int = DEFAULT_HOP,
    n_mels: int = DEFAULT_N_MELS,
) -> FeatureSet:
    """Log-compressed mel magnitudes of a mono signal.

    Frames are Hann-windowed with no padding, so a signal of length L
    yields ``(L - n_fft) // hop + 1`` frames of ``n_mels`` bands each.
    Compression is ``log(1e-5 + x)``, which maps silence to log(1e-5).
    """
    n_fft = int(n_fft)
    n_mels = int(n_mels)
    if not 1 <= n_mels <= n_fft // 2:
        raise InvalidArgumentError("n_mels must satisfy 1 <= n_mels <= n_fft / 2")
    if int(sample_rate) < 1:
        raise InvalidArgumentError("sample_rate must be positive")
    magnitudes = stft_magnitudes(signal, n_fft, hop)
    fb = mel_filterbank(int(sample_rate), n_fft, n_mels)
    mel = magnitudes @ fb.T
    frames = np.log(1e-5 + mel)
    return FeatureSet(
        frames=frames,
        sample_rate_hz=int(sample_rate),
        source=SOURCE_AUDIO,
        metadata={
            "n_fft": n_fft,
            "hop": int(hop),
            "n_mels": n_mels,
            "window": "hann-periodic",
            "mel_scale": "slaney-area-normalized",
            "compression": "log(1e-5 + x)",
        },
    )


def write_features(path, fs: FeatureSet) -> None:
    """Write the feature file: magic, u32 T/D/rate/json-length, JSON, f32 rows."""
    meta_blob = json.dumps(
        {"source": fs.source, "metadata": fs.metadata}, sort_keys=True
    ).encode("utf-8")
    header = _FEATURE_HEADER.pack(
        FEATURE_MAGIC,
        fs.n_frames,
        fs.dim,
        0 if fs.sample_rate_hz is None else int(fs.sample_rate_hz),
        len(meta_blob),
    )
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(meta_blob)
        fh.write(fs.frames.astype("<f4").tobytes(order="C"))


def read_features(path) -> FeatureSet:
    """Read a feature file back; the frame bytes round-trip exactly."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < _FEATURE_HEADER.size:
        raise ParseError("feature file truncated before header")
    magic, t, d, rate, meta_len = _FEATURE_HEADER.unpack_from(blob)
    if magic != FEATURE_MAGIC:
        raise ParseError("not a feature file (bad magic)")
    if t < 1 or d < 1:
        raise InvalidArgumentError("feature file declares an empty frame matrix")
    expected = _FEATURE_HEADER.size + meta_len + 4 * t * d
    if len(blob) != expected:
        raise ParseError(f"feature file has {len(blob)} bytes, expected {expected}")
    meta_bytes = blob[_FEATURE_HEADER.size : _FEATURE_HEADER.size + meta_len]
    try:
        meta = json.loads(meta_bytes.decode("utf-8")) if meta_len else {}
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise ParseError(f"feature metadata is not valid JSON: {exc}") from exc
    frames = np.frombuffer(blob, dtype="<f4", offset=_FEATURE_HEADER.size + meta_len)
    return FeatureSet(
        frames=frames.reshape(t, d),
        sample_rate_hz=None if rate == 0 else int(rate),
        source=meta.get("source", SOURCE_SYNTHETIC),
        metadata=meta.get("metadata", {}),
    )
