"""Command-line entry point: ``tiger <subcommand> ...``."""

from __future__ import annotations

import argparse
import os
import sys
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from threadpoolctl import threadpool_limits

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    pass


def _overrides(pairs: Sequence[str]) -> dict[str, str]:
    out = {}
    for pair in pairs:
        if "=" not in pair:
            raise UsageError(f"override {pair!r} is not key=value")
        key, value = pair.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def _config(args):
    from .model import TigerConfig, load_config

    overrides = _overrides(args.set)
    try:
        if args.config:
            if not Path(args.config).is_file():
                raise UsageError(f"config file not found: {args.config}")
            return load_config(args.config, overrides)
        cfg = TigerConfig.from_preset(args.preset)
        return cfg.with_overrides(overrides) if overrides else cfg
    except (KeyError, ValueError) as exc:
        raise UsageError(str(exc).strip("'\"")) from exc


def _model(args):
    from .model import TigerModel

    if getattr(args, "checkpoint", None):
        if not Path(args.checkpoint).is_file():
            raise UsageError(f"checkpoint not found: {args.checkpoint}")
        return TigerModel.load(args.checkpoint)
    return TigerModel.build(_config(args), seed=args.seed)


def _need_file(path: str) -> Path:
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"file not found: {path}")
    return p


# -- subcommands ----------------------------------------------------------------------------

def cmd_separate(args) -> int:
    from .model import infer_long
    from .wavio import read_wav, write_wav

    wave = read_wav(_need_file(args.input))
    model = _model(args)
    if args.segment:
        outs = infer_long(model, wave, args.segment, args.overlap)
    else:
        outs = model.forward(wave)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    stem = Path(args.input).stem
    for i, y in enumerate(outs, 1):
        path = out_dir / f"{stem}_s{i}.wav"
        write_wav(path, y)
        print(path)
    return EXIT_OK


def cmd_train(args) -> int:
    from .training import TrainConfig, fit, load_examples

    train = load_examples(_need_file(args.manifest))
    valid = load_examples(_need_file(args.valid)) if args.valid else train
    model = _model(args)
    cfg = TrainConfig(loss=args.loss, optimizer=args.optimizer, lr=args.lr, max_epochs=args.epochs,
                      segment_seconds=args.segment, batch_size=args.batch_size, seed=args.seed,
                      max_steps=args.max_steps)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    result = fit(model, train, valid, cfg, checkpoint_path=out / "best.ckpt", history_path=out / "history.csv",
                 log=lambda row: print("epoch {epoch}: train {train_loss:.4f} valid {valid_loss:.4f} lr {lr:g}"
                                       .format(**row), flush=True))
    print(f"stopped after {result.steps} steps ({result.stop_reason}); best valid loss {result.best_valid:.4f}")
    return EXIT_OK


def cmd_mix(args) -> int:
    from .mixgen import MixSpec, generate, write_dataset

    spec = MixSpec(overlap_ratio=args.overlap, seed=args.seed, with_noise=not args.no_noise)
    examples = generate(args.seed, args.count, spec, n_sources=args.sources,
                        source_seconds=args.seconds, sample_rate=args.sample_rate)
    print(write_dataset(args.out, examples))
    return EXIT_OK


def cmd_eval(args) -> int:
    import itertools

    from .metrics import MetricReport, si_sdr
    from .training import load_examples

    model = _model(args)
    report = MetricReport()
    sr = model.config.sample_rate
    from .dsp import Waveform

    for i, ex in enumerate(load_examples(_need_file(args.manifest))):
        mix = Waveform(ex.mixture, sr)
        outs = model.forward(mix)
        refs = [Waveform(r, sr) for r in ex.references]
        # outputs are unordered; report under the best assignment
        perm = max(itertools.permutations(range(len(outs))),
                   key=lambda p: sum(si_sdr(outs[p[k]], refs[k]) for k in range(len(refs))))
        report.add(ex.name or f"utt{i:05d}", [outs[p] for p in perm], mix, refs)
    report.write_csv(args.out)
    if args.summary:
        report.write_json(args.summary)
    s = report.summary()
    print(f"{s['utterances']} utterances: SDRi {s['sdri']:.2f} dB, SI-SDRi {s['si_sdri']:.2f} dB")
    return EXIT_OK


def cmd_profile(args) -> int:
    from .profiler import profile

    report = profile(_model(args), seconds=args.seconds, runs=args.runs, warmup=args.warmup,
                     memory=args.memory)
    sys.stdout.write(report.to_text(per_layer=args.per_layer))
    if args.csv:
        Path(args.csv).write_text(report.to_csv())
    return EXIT_OK


def cmd_spectrogram(args) -> int:
    from .dsp import StftConfig, stft, write_spectrogram_csv, write_spectrogram_pgm
    from .wavio import read_wav

    spec = stft(read_wav(_need_file(args.input)), StftConfig(args.window, args.hop))
    if not args.csv and not args.pgm:
        raise UsageError("give --csv and/or --pgm")
    if args.csv:
        write_spectrogram_csv(args.csv, spec)
    if args.pgm:
        write_spectrogram_pgm(args.pgm, spec)
    print(f"{spec.shape[0]} bins x {spec.shape[1]} frames")
    return EXIT_OK


# -- parser ------------------------------------------------------------------------------------

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    from .model import PRESETS

    common = _Parser(add_help=False)
    common.add_argument("--seed", type=int, default=0, help="seed for every random draw (default 0)")

    model_opts = _Parser(add_help=False)
    model_opts.add_argument("--preset", choices=sorted(PRESETS), default="small", help="model preset")
    model_opts.add_argument("--config", help="sectioned key: value config file (overrides the preset)")
    model_opts.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                            help="dotted config override, e.g. separator.n_blocks=8 (repeatable)")

    ckpt = _Parser(add_help=False)
    ckpt.add_argument("--checkpoint", help="trained checkpoint; when given, preset/config are ignored")

    parser = _Parser(prog="tiger", description="Band-split speech separation toolkit.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("separate", parents=[common, model_opts, ckpt], help="separate a mixture WAV")
    p.add_argument("--in", dest="input", required=True, help="mixture WAV (mono)")
    p.add_argument("--out", default=".", help="output directory (default .)")
    p.add_argument("--segment", type=float, help="sliding-window segment length in seconds")
    p.add_argument("--overlap", type=float, default=0.5, help="segment overlap fraction (default 0.5)")
    p.set_defaults(func=cmd_separate)

    p = sub.add_parser("train", parents=[common, model_opts, ckpt], help="train on a manifest")
    p.add_argument("--manifest", required=True, help="training manifest")
    p.add_argument("--valid", help="validation manifest (default: the training manifest)")
    p.add_argument("--out", required=True, help="directory for best.ckpt and history.csv")
    p.add_argument("--loss", choices=["neg_sisdr_pit", "dnr_mae"], default="neg_sisdr_pit", help="training loss")
    p.add_argument("--optimizer", choices=["adam", "adamw"], default="adam", help="optimizer")
    p.add_argument("--lr", type=float, default=1e-3, help="initial learning rate")
    p.add_argument("--epochs", type=int, default=500, help="maximum epochs")
    p.add_argument("--max-steps", type=int, help="stop after this many optimizer steps")
    p.add_argument("--segment", type=float, default=3.0, help="training crop length in seconds")
    p.add_argument("--batch-size", type=int, default=1, help="utterances per step")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("mix", parents=[common], help="write a synthetic mixture dataset")
    p.add_argument("--out", required=True, help="dataset directory")
    p.add_argument("--count", type=int, default=10, help="number of mixtures")
    p.add_argument("--sources", type=int, default=2, help="sources per mixture")
    p.add_argument("--seconds", type=float, default=1.0, help="length of each source in seconds")
    p.add_argument("--sample-rate", type=int, default=16000, help="sample rate in Hz")
    p.add_argument("--overlap", type=float, help="fixed overlap ratio (default: uniform draw)")
    p.add_argument("--no-noise", action="store_true", help="omit the noise track")
    p.set_defaults(func=cmd_mix)

    p = sub.add_parser("eval", parents=[common, model_opts, ckpt], help="score a model on a manifest")
    p.add_argument("--manifest", required=True, help="evaluation manifest")
    p.add_argument("--out", required=True, help="per-utterance CSV report")
    p.add_argument("--summary", help="optional JSON summary path")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("profile", parents=[common, model_opts, ckpt], help="parameter/MAC/timing report")
    p.add_argument("--seconds", type=float, default=1.0, help="audio length for MACs and timing")
    p.add_argument("--runs", type=int, default=0, help="timed runs per mode (0 skips timing)")
    p.add_argument("--warmup", type=int, default=10, help="untimed warmup runs")
    p.add_argument("--memory", action="store_true", help="measure peak forward allocation")
    p.add_argument("--per-layer", action="store_true", help="print per-module parameter rows")
    p.add_argument("--csv", help="also write the report as CSV")
    p.set_defaults(func=cmd_profile)

    p = sub.add_parser("spectrogram", parents=[common], help="dump a magnitude spectrogram")
    p.add_argument("--in", dest="input", required=True, help="input WAV")
    p.add_argument("--window", type=int, default=640, help="STFT window size")
    p.add_argument("--hop", type=int, default=160, help="STFT hop")
    p.add_argument("--csv", help="CSV output (frames x bins)")
    p.add_argument("--pgm", help="8-bit PGM output")
    p.set_defaults(func=cmd_spectrogram)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"tiger: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    threads = int(os.environ.get("TIGER_THREADS", "1"))
    np.random.seed(args.seed % 2**32)
    try:
        with threadpool_limits(limits=max(1, threads)):
            return args.func(args)
    except UsageError as exc:
        print(f"tiger: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as exc:  # runtime failure: one line, nonzero
        print(f"tiger: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
