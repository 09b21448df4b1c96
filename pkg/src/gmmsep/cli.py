"""Command-line interface: ``gmmsep <command> [options]``.

Exit codes are 0 on success, 1 on a runtime failure and 2 on a usage or
configuration error. Errors are reported as a single stderr line of the form
``gmmsep: error: <command>: <reason>``.
"""

from __future__ import annotations

import argparse
import logging
import shutil
import sys
from contextlib import contextmanager
from pathlib import Path

import numpy as np
import torch

log = logging.getLogger("gmmsep")

EXIT_OK, EXIT_FAILURE, EXIT_USAGE = 0, 1, 2
COVARIANCES = ("diag", "diag-tied", "sphr", "sphr-tied")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _existing_file(path: str, what: str) -> Path:
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"{what} {path} does not exist")
    return p


@contextmanager
def _cleanup_on_failure(*targets):
    """Remove whatever the block created under ``targets`` if it raises."""
    before = {}
    for t in map(Path, targets):
        before[t] = set(t.iterdir()) if t.is_dir() else (t.exists() or None)
    try:
        yield
    except BaseException:
        for t, old in before.items():
            if old is None or old is False:
                if t.is_dir():
                    shutil.rmtree(t, ignore_errors=True)
                elif t.exists():
                    t.unlink()
            elif isinstance(old, set) and t.is_dir():
                for child in set(t.iterdir()) - old:
                    if child.is_dir():
                        shutil.rmtree(child, ignore_errors=True)
                    else:
                        child.unlink(missing_ok=True)
        raise


def _load_model(path):
    from .separator import load_model
    from .system import CheckpointError
    p = _existing_file(path, "checkpoint")
    try:
        return load_model(p)
    except CheckpointError as e:
        raise UsageError(str(e)) from None


def _read_audio(path, sample_rate):
    from .wavio import read_wav
    try:
        return read_wav(_existing_file(path, "audio file"), sample_rate=sample_rate)
    except ValueError as e:
        raise UsageError(f"{path}: {e}") from None


# --- commands -----------------------------------------------------------------

def cmd_mixgen(args) -> int:
    from .datagen import StemBank, generate_manifest, render_dataset, synthetic_bank
    out = Path(args.out).resolve()
    if not args.synthetic and args.bank is None:
        raise UsageError("give --bank DIR or --synthetic")
    if not args.synthetic:
        try:
            bank = StemBank.from_directory(args.bank, args.split)
        except FileNotFoundError as e:
            raise UsageError(str(e)) from None
        try:
            bank.validate(args.duration)
        except ValueError as e:
            raise UsageError(str(e)) from None
    out.parent.mkdir(parents=True, exist_ok=True)
    with _cleanup_on_failure(out):
        if args.synthetic:
            song_len = args.song_duration or max(4.0, 2.0 * args.duration)
            bank = synthetic_bank(out / "stems", args.split, args.songs, song_len,
                                  args.sample_rate, args.seed)
        specs = generate_manifest(bank, args.count, args.duration, args.seed, args.sample_rate,
                                  args.gain_jitter_db, args.partial_prob)
        manifest = render_dataset(specs, out)
    print(manifest)
    return EXIT_OK


def _train_config(args):
    from .trainer import TrainConfig, desk_config, parse_config_text
    values = {}
    if args.config:
        try:
            values = parse_config_text(_existing_file(args.config, "config").read_text())
        except ValueError as e:
            raise UsageError(f"{args.config}: {e}") from None
    flags = {"covariance": args.covariance, "seed": args.seed, "max_epochs": args.max_epochs,
             "batch_size": args.batch_size, "learning_rate": args.learning_rate,
             "patience": args.patience}
    values.update({k: v for k, v in flags.items() if v is not None})
    if args.baseline:
        values["baseline"] = True
    try:
        return desk_config(**values) if args.preset == "desk" else TrainConfig(**values)
    except (TypeError, ValueError) as e:
        raise UsageError(str(e)) from None


def cmd_train(args) -> int:
    from .trainer import fit
    cfg = _train_config(args)
    train = _existing_file(args.train_manifest, "train manifest")
    val = _existing_file(args.val_manifest, "validation manifest")
    resume = _existing_file(args.resume, "checkpoint") if args.resume else None
    torch.manual_seed(cfg.seed)
    best = fit(train, val, cfg, args.out, resume=resume)
    print(best)
    return EXIT_OK


def cmd_separate(args) -> int:
    from .separator import separate
    from .wavio import write_wav
    model = _load_model(args.checkpoint)
    mix = _read_audio(args.input, model.frontend.sample_rate)
    out = Path(args.out_dir)
    with _cleanup_on_failure(out):
        out.mkdir(parents=True, exist_ok=True)
        stems = separate(mix, model, args.chunk_seconds)
        for name, clip in stems.items():
            write_wav(out / f"{name}.wav", clip)
            print(out / f"{name}.wav")
    return EXIT_OK


def cmd_query(args) -> int:
    from .separator import query_separate
    from .wavio import write_wav
    model = _load_model(args.checkpoint)
    if model.is_baseline:
        raise UsageError("the baseline model has no embedding space to query")
    sr = model.frontend.sample_rate
    query = _read_audio(args.query, sr)
    mix = _read_audio(args.mixture, sr)
    if query.num_samples < model.frontend.window_size:
        raise UsageError("query is shorter than one analysis frame")
    floor = "model" if args.variance_floor == "model" else float(args.variance_floor)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    with _cleanup_on_failure(out):
        clip = query_separate(query, mix, model, diagonal=args.covariance == "diag",
                              gate_db=args.gate_db, variance_floor=floor)
        write_wav(out, clip)
    print(out)
    return EXIT_OK


def cmd_evaluate(args) -> int:
    from .datagen import read_manifest
    from .evaluation import ablation_report
    models = [_load_model(c) for c in args.checkpoint]
    try:
        specs = read_manifest(_existing_file(args.manifest, "manifest"))
    except ValueError as e:
        raise UsageError(f"{args.manifest}: {e}") from None
    report = Path(args.report)
    txt = report.with_suffix(".txt")
    report.parent.mkdir(parents=True, exist_ok=True)
    with _cleanup_on_failure(report, txt):
        ablation_report(models, specs, report, txt, include_mixture=not args.no_mixture_row,
                        aggregate=args.aggregate)
    sys.stdout.write(txt.read_text())
    return EXIT_OK


def cmd_inspect(args) -> int:
    from .separator import export_embedding_views
    model = _load_model(args.checkpoint)
    if model.is_baseline:
        raise UsageError("the baseline model has no embedding space to inspect")
    mix = _read_audio(args.input, model.frontend.sample_rate)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    with _cleanup_on_failure(out):
        views = export_embedding_views(mix, model, out)
    print(f"{out}: {len(views.labels)} bins, {views.grids.shape[0]} dimensions")
    return EXIT_OK


# --- parser -------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="gmmsep", description="Class-conditional embedding source separation.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def add(name, func, help):
        s = sub.add_parser(name, help=help, description=help)
        s.set_defaults(func=func)
        s.add_argument("--seed", type=int, default=None, help="random seed (default 0)")
        return s

    s = add("mixgen", cmd_mixgen, "generate a mixture manifest and render its WAV tree")
    src = s.add_mutually_exclusive_group()
    src.add_argument("--bank", help="stem bank directory laid out as <song>/<class>.wav")
    src.add_argument("--synthetic", action="store_true", help="synthesise the stem bank")
    s.add_argument("--split", default="train")
    s.add_argument("--count", type=int, default=10)
    s.add_argument("--duration", type=float, default=3.2, help="mixture length in seconds")
    s.add_argument("--out", required=True)
    s.add_argument("--sample-rate", type=int, default=48000)
    s.add_argument("--gain-jitter-db", type=float, default=0.0)
    s.add_argument("--partial-prob", type=float, default=0.0,
                   help="probability that a mixture keeps only a subset of its sources")
    s.add_argument("--songs", type=int, default=8, help="synthetic songs per split")
    s.add_argument("--song-duration", type=float, default=None)

    s = add("train", cmd_train, "train a model from mixture manifests")
    s.add_argument("--config", help="flat key = value config file (flags win)")
    s.add_argument("--preset", choices=("full", "desk"), default="full",
                   help="base configuration before the config file and flags")
    s.add_argument("--train-manifest", required=True)
    s.add_argument("--val-manifest", required=True)
    s.add_argument("--covariance", choices=COVARIANCES)
    s.add_argument("--baseline", action="store_true", help="train the sigmoid mask baseline")
    s.add_argument("--max-epochs", type=int)
    s.add_argument("--batch-size", type=int)
    s.add_argument("--learning-rate", type=float)
    s.add_argument("--patience", type=int)
    s.add_argument("--resume", help="last.npz of an interrupted run")
    s.add_argument("--out", required=True, help="run directory")

    s = add("separate", cmd_separate, "split a mixture into one WAV per class")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--in", dest="input", required=True)
    s.add_argument("--out-dir", required=True)
    s.add_argument("--chunk-seconds", type=float, default=None)

    s = add("query", cmd_query, "extract the part of a mixture that sounds like a query clip")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--query", required=True)
    s.add_argument("--mixture", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--covariance", choices=("diag", "sphr"), default="diag",
                   help="structure of the query Gaussian")
    s.add_argument("--gate-db", type=float, default=-40.0)
    s.add_argument("--variance-floor", default="model",
                   help="'model' (learned class variance) or a number")

    s = add("evaluate", cmd_evaluate, "score checkpoints on a manifest and write an SDR report")
    s.add_argument("--checkpoint", required=True, nargs="+")
    s.add_argument("--manifest", required=True)
    s.add_argument("--report", required=True, help="CSV path; an aligned .txt is written beside it")
    s.add_argument("--aggregate", choices=("median", "mean"), default="median")
    s.add_argument("--no-mixture-row", action="store_true")

    s = add("inspect", cmd_inspect, "export embedding PCA, raw dimensions and Gaussians")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--in", dest="input", required=True)
    s.add_argument("--out", required=True, help="output directory")
    return p


def _validate_numbers(args):
    for name in ("count", "songs", "max_epochs", "batch_size", "patience"):
        v = getattr(args, name, None)
        if v is not None and v < 1:
            raise UsageError(f"--{name.replace('_', '-')} must be >= 1")
    for name in ("duration", "song_duration", "chunk_seconds", "learning_rate", "sample_rate"):
        v = getattr(args, name, None)
        if v is not None and v <= 0:
            raise UsageError(f"--{name.replace('_', '-')} must be positive")
    pp = getattr(args, "partial_prob", None)
    if pp is not None and not 0.0 <= pp <= 1.0:
        raise UsageError("--partial-prob must be in [0, 1]")
    vf = getattr(args, "variance_floor", None)
    if vf is not None and vf != "model":
        try:
            if float(vf) <= 0:
                raise ValueError
        except ValueError:
            raise UsageError("--variance-floor must be 'model' or a positive number") from None


def _fail(command, reason, code) -> int:
    reason = " ".join(str(reason).split())
    print(f"gmmsep: error: {command}: {reason}", file=sys.stderr)
    return code


def main(argv=None) -> int:
    parser = build_parser()
    command = "gmmsep"
    try:
        args = parser.parse_args(argv)
        command = args.command
        _validate_numbers(args)
    except UsageError as e:
        return _fail(command, e, EXIT_USAGE)
    except SystemExit as e:  # --help
        return int(e.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.command != "mixgen":
        seed = 0 if args.seed is None else args.seed
        torch.manual_seed(seed)
        np.random.seed(seed)
    elif args.seed is None:
        args.seed = 0
    try:
        return args.func(args)
    except UsageError as e:
        return _fail(command, e, EXIT_USAGE)
    except KeyboardInterrupt:
        return _fail(command, "interrupted", EXIT_FAILURE)
    except Exception as e:
        log.debug("failure", exc_info=True)
        return _fail(command, f"{type(e).__name__}: {e}", EXIT_FAILURE)


if __name__ == "__main__":
    sys.exit(main())
