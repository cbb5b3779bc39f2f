"""Residual vector quantization with randomly subsampled codebooks.

Deep quantizer stages select their codewords from small sub-codebooks
drawn out of one large fixed codebook, instead of training a codebook
per stage. The package bundles the quantizer cascade, EMA k-means
codebook training for the trainable prefix, collapse diagnostics
(usage perplexity), reconstruction metrics, feature front ends, and an
experiment harness with a CLI.
"""

from .errors import (
    CapacityExceededError,
    InvalidArgumentError,
    ParseError,
    RrvqError,
    UnsupportedFormatError,
)
from .rng import RNG_ALGORITHM, derive_rng, derive_seed
from .codebook import (
    BigCodebook,
    Codebook,
    DegenerateRowWarning,
    ProjectionPair,
    SubCodebook,
    init_gaussian,
    l2_normalize_rows,
    load_codebook,
    make_projection,
    sample_subcodebook,
    save_codebook,
)
from .quantizer import (
    FrameQuantization,
    QuantizationResult,
    QuantizerStack,
    QuantizerStage,
    RESAMPLE_MODES,
    StageToken,
    build_stack,
    dequantize,
    nearest_neighbour,
    quantize_frame,
    quantize_sequence,
    read_tokens,
    write_tokens,
)
from .training import (
    EmaState,
    commitment_codebook_losses,
    ema_update,
    fit_codebooks,
    load_stack,
    save_stack,
)
from .metrics import (
    DistortionProfile,
    UsageReport,
    distortion_profile,
    dump_report_json,
    perplexity,
    perplexity_table,
    si_sdr,
    usage_histogram,
    usage_reports,
)
from .features import (
    FeatureSet,
    log_mel_frames,
    mel_filterbank,
    read_features,
    read_wav,
    synth_gaussian,
    synth_gmm,
    write_features,
)
from .harness import (
    DataSpec,
    ExperimentConfig,
    Mitigants,
    build_stack_from_config,
    compare_truncation,
    default_config,
    run_experiment,
    run_grid,
    variant_configs,
)

__version__ = "0.1.0"

__all__ = [
    "BigCodebook",
    "CapacityExceededError",
    "Codebook",
    "DataSpec",
    "DegenerateRowWarning",
    "DistortionProfile",
    "EmaState",
    "ExperimentConfig",
    "FeatureSet",
    "FrameQuantization",
    "InvalidArgumentError",
    "Mitigants",
    "ParseError",
    "ProjectionPair",
    "QuantizationResult",
    "QuantizerStack",
    "QuantizerStage",
    "RESAMPLE_MODES",
    "RNG_ALGORITHM",
    "RrvqError",
    "StageToken",
    "SubCodebook",
    "UnsupportedFormatError",
    "UsageReport",
    "build_stack",
    "build_stack_from_config",
    "commitment_codebook_losses",
    "compare_truncation",
    "default_config",
    "dequantize",
    "derive_rng",
    "derive_seed",
    "distortion_profile",
    "dump_report_json",
    "ema_update",
    "fit_codebooks",
    "init_gaussian",
    "l2_normalize_rows",
    "load_codebook",
    "load_stack",
    "log_mel_frames",
    "make_projection",
    "mel_filterbank",
    "nearest_neighbour",
    "perplexity",
    "perplexity_table",
    "quantize_frame",
    "quantize_sequence",
    "read_features",
    "read_tokens",
    "read_wav",
    "run_experiment",
    "run_grid",
    "sample_subcodebook",
    "save_codebook",
    "save_stack",
    "si_sdr",
    "synth_gaussian",
    "synth_gmm",
    "usage_histogram",
    "usage_reports",
    "variant_configs",
    "write_features",
    "write_tokens",
]
