"""Command-line entry points.

Subcommands: ``features`` (WAV or synthetic source to a feature file),
``train`` (feature file + config to a stack directory), ``quantize``
(stack + features to a token file and metrics JSON), ``experiment``
(config JSON to a report), ``grid`` (config list to a merged table).

Exit codes: 0 on success, 2 for invalid configs or arguments, 3 for I/O
and parse failures.
"""

from __future__ import annotations

import argparse
import json
import sys

from .errors import InvalidArgumentError, ParseError, UnsupportedFormatError
from .features import (
    DEFAULT_HOP,
    DEFAULT_N_FFT,
    DEFAULT_N_MELS,
    log_mel_frames,
    read_features,
    read_wav,
    synth_gaussian,
    synth_gmm,
    write_features,
)
from .harness import (
    compare_truncation,
    load_config,
    load_config_list,
    run_experiment,
    run_grid,
)
from .metrics import (
    distortion_profile,
    dump_report_json,
    usage_reports,
    write_table_csv,
)
from .quantizer import quantize_sequence, write_tokens
from .training import commitment_codebook_losses, fit_codebooks, load_stack, save_stack

EXIT_OK = 0
EXIT_INVALID = 2
EXIT_IO = 3


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="rrvq",
        description="Residual vector quantization with randomly subsampled codebooks.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("features", help="produce a feature file from WAV or a generator")
    source = p.add_mutually_exclusive_group(required=True)
    source.add_argument("--wav", help="input WAV file (16-bit PCM or 32-bit float)")
    source.add_argument("--synth", choices=["gaussian", "gmm"], help="synthetic generator")
    p.add_argument("--out", required=True, help="output feature file")
    p.add_argument("--frames", type=int, default=10_000, help="synthetic frame count")
    p.add_argument("--dim", type=int, default=8, help="synthetic frame dimension")
    p.add_argument("--seed", type=int, default=0, help="synthetic generator seed")
    p.add_argument("--clusters", type=int, default=2, help="gmm cluster count")
    p.add_argument("--separation", type=float, default=20.0, help="gmm cluster separation")
    p.add_argument("--n-fft", type=int, default=DEFAULT_N_FFT)
    p.add_argument("--hop", type=int, default=DEFAULT_HOP)
    p.add_argument("--n-mels", type=int, default=DEFAULT_N_MELS)

    p = sub.add_parser("train", help="fit trainable codebooks on a feature file")
    p.add_argument("--config", required=True, help="experiment config JSON")
    p.add_argument("--features", required=True, help="training feature file")
    p.add_argument("--out", required=True, help="output stack directory")
    p.add_argument("--seed", type=int, default=None, help="stack seed (default: first config seed)")

    p = sub.add_parser("quantize", help="quantize a feature file with a trained stack")
    p.add_argument("--stack", required=True, help="stack directory")
    p.add_argument("--features", required=True, help="feature file to quantize")
    p.add_argument("--tokens", required=True, help="output token file")
    p.add_argument("--metrics", default=None, help="optional metrics JSON output")

    p = sub.add_parser("experiment", help="run one experiment config")
    p.add_argument("--config", required=True, help="experiment config JSON")
    p.add_argument("--out", required=True, help="output report JSON")
    p.add_argument("--truncate", type=int, default=None, help="also compare against a k-stage truncation")

    p = sub.add_parser("grid", help="run a list of configs and merge the tables")
    p.add_argument("--configs", required=True, help="JSON array of experiment configs")
    p.add_argument("--out", required=True, help="output merged CSV")
    p.add_argument("--json", dest="json_out", default=None, help="optional full reports JSON")
    return parser


def _cmd_features(args) -> None:
    if args.wav is not None:
        signal, rate = read_wav(args.wav)
        fs = log_mel_frames(signal, rate, n_fft=args.n_fft, hop=args.hop, n_mels=args.n_mels)
    elif args.synth == "gaussian":
        fs = synth_gaussian(args.frames, args.dim, args.seed)
    else:
        fs = synth_gmm(args.frames, args.dim, args.clusters, args.separation, args.seed)
    write_features(args.out, fs)
    print(f"wrote {fs.n_frames} frames of dim {fs.dim} to {args.out}")


def _cmd_train(args) -> None:
    cfg = load_config(args.config)
    cfg.validate()
    fs = read_features(args.features)
    if fs.dim != cfg.dim:
        raise InvalidArgumentError(
            f"feature file has dim {fs.dim}, config expects {cfg.dim}"
        )
    seed = args.seed if args.seed is not None else int(cfg.seeds[0])
    from .harness import build_stack_from_config

    stack = build_stack_from_config(cfg, seed)
    if cfg.n_trainable > 0:
        fit_codebooks(
            stack, fs.frames.astype(float), passes=cfg.passes, decay=cfg.decay, epsilon=cfg.epsilon
        )
    save_stack(
        args.out,
        stack,
        training={"passes": cfg.passes, "decay": cfg.decay, "epsilon": cfg.epsilon},
    )
    print(f"wrote stack ({stack.n_trainable} trainable + {stack.n_random} random) to {args.out}")


def _cmd_quantize(args) -> None:
    stack, _ = load_stack(args.stack)
    fs = read_features(args.features)
    frames = fs.frames.astype(float)
    result = quantize_sequence(frames, stack)
    write_tokens(args.tokens, result)
    if args.metrics:
        profile = distortion_profile(frames, result)
        commitment, codebook_loss = commitment_codebook_losses(frames, result)
        report = {
            "n_frames": result.n_frames,
            "final_mse": profile.final_mse,
            "si_sdr": profile.si_sdr_global,
            "si_sdr_frame_mean": profile.si_sdr_mean,
            "stage_energies": list(profile.stage_energies),
            "commitment_loss": commitment,
            "codebook_loss": codebook_loss,
            "perplexity": [
                {
                    "label": rep.label,
                    "codebook_size": rep.codebook_size,
                    "perplexity": rep.perplexity,
                    "ratio_to_max": rep.ratio_to_max,
                }
                for rep in usage_reports(result)
            ],
        }
        dump_report_json(report, args.metrics)
    print(f"wrote {result.n_frames} x {result.n_stages} tokens to {args.tokens}")


def _cmd_experiment(args) -> None:
    cfg = load_config(args.config)
    if args.truncate is not None:
        report = compare_truncation(cfg, args.truncate)
    else:
        report = run_experiment(cfg)
    dump_report_json(report, args.out)
    print(f"wrote report to {args.out}")


def _cmd_grid(args) -> None:
    cfgs = load_config_list(args.configs)
    for cfg in cfgs:
        cfg.validate()
    grid = run_grid(cfgs)
    write_table_csv(args.out, grid["header"], grid["rows"])
    if args.json_out:
        dump_report_json({"reports": grid["reports"]}, args.json_out)
    print(f"wrote grid of {len(cfgs)} config(s) to {args.out}")


_COMMANDS = {
    "features": _cmd_features,
    "train": _cmd_train,
    "quantize": _cmd_quantize,
    "experiment": _cmd_experiment,
    "grid": _cmd_grid,
}


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        # argparse exits with 2 on bad arguments, matching our convention.
        return int(exc.code) if exc.code else EXIT_OK
    try:
        _COMMANDS[args.command](args)
    except InvalidArgumentError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except (ParseError, UnsupportedFormatError, OSError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
