"""Command-line entry point: ``harmonia {prepare,train,harmonize,eval}``.

Configuration comes from a flat ``key=value`` text file (``--config``), then
``--set key=value`` overrides, then dedicated flags. Keys are the field names of
:class:`ModelConfig` and :class:`TrainSchedule` plus the run keys ``variant``,
``mask_rate``, ``corpus`` and ``checkpoint``.

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
"""

from __future__ import annotations

import argparse
import dataclasses
import logging
import os
import sys
import types
import typing
from dataclasses import dataclass, field
from pathlib import Path

import torch

from . import corpus as C
from . import encodings as enc
from . import evaluation as E
from .model import ContractError, ModelConfig, load_checkpoint
from .training import (ScheduleError, TrainingDiverged, TrainSchedule, Variant, lr_at,
                       train)

log = logging.getLogger("harmonia")

PUBLISHED_MODEL = ModelConfig()
PUBLISHED_SCHEDULE = TrainSchedule()


class UsageError(Exception):
    """Bad flags, config keys or paths; maps to exit code 2."""


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    schedule: TrainSchedule = field(default_factory=TrainSchedule)
    variant: Variant = Variant.DAT
    mask_rate: float = 0.15
    corpus: str | None = None
    checkpoint: str | None = None

    def lines(self) -> list[str]:
        out = [f"{f.name}={_fmt(getattr(self.model, f.name))}"
               for f in dataclasses.fields(ModelConfig)]
        out += [f"{f.name}={_fmt(getattr(self.schedule, f.name))}"
                for f in dataclasses.fields(TrainSchedule)]
        out += [f"variant={self.variant.value}", f"mask_rate={self.mask_rate}",
                f"corpus={_fmt(self.corpus)}", f"checkpoint={_fmt(self.checkpoint)}"]
        return out


def _fmt(value) -> str:
    if value is None:
        return "none"
    if isinstance(value, bool):
        return "true" if value else "false"
    return str(value)


# ---------------------------------------------------------------------------
# config parsing

def read_config_file(path: str | Path) -> dict[str, str]:
    """Flat ``key=value`` lines; blank lines and ``#`` comments are ignored."""
    path = Path(path)
    if not path.is_file():
        raise UsageError(f"config file not found: {path}")
    entries: dict[str, str] = {}
    for n, raw in enumerate(path.read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{n}: expected key=value")
        key, value = (part.strip() for part in line.split("=", 1))
        entries[key] = value
    return entries


def _coerce(text: str, hint, key: str):
    options = typing.get_args(hint) if isinstance(hint, types.UnionType) else (hint,)
    if type(None) in options and text.lower() in ("none", ""):
        return None
    for kind in options:
        if kind is type(None):
            continue
        try:
            if kind is bool:
                lowered = text.lower()
                if lowered in ("1", "true", "yes", "on"):
                    return True
                if lowered in ("0", "false", "no", "off"):
                    return False
                raise ValueError(text)
            return kind(text)
        except ValueError:
            continue
    raise UsageError(f"cannot read {key}={text!r}")


def resolve_config(entries: dict[str, str], published: bool = False) -> RunConfig:
    """Merge ``entries`` over the default (published) settings."""
    model_hints = typing.get_type_hints(ModelConfig)
    sched_hints = typing.get_type_hints(TrainSchedule)
    model_kw, sched_kw, run = {}, {}, RunConfig()
    ignored = []
    for key, text in entries.items():
        if key in model_hints:
            if published:
                ignored.append(key)
                continue
            model_kw[key] = _coerce(text, model_hints[key], key)
        elif key in sched_hints:
            if published and key != "seed":
                ignored.append(key)
                continue
            sched_kw[key] = _coerce(text, sched_hints[key], key)
        elif key == "variant":
            try:
                run.variant = Variant(text)
            except ValueError:
                raise UsageError(f"unknown variant {text!r}; choose from "
                                 f"{', '.join(v.value for v in Variant)}") from None
        elif key == "mask_rate":
            run.mask_rate = _coerce(text, float, key)
        elif key in ("corpus", "checkpoint"):
            setattr(run, key, None if text.lower() == "none" else text)
        else:
            raise UsageError(f"unknown config key {key!r}")
    if ignored:
        log.warning("--published-config ignores overrides for: %s", ", ".join(sorted(ignored)))
    try:
        run.model = ModelConfig(**model_kw)
        run.schedule = TrainSchedule(**sched_kw)
        lr_at(0, run.schedule)
        run.variant.corruption(run.mask_rate)
    except (ValueError, TypeError) as err:
        raise UsageError(f"invalid configuration: {err}") from None
    run.model = run.model.replace(disc_kind=run.variant.disc_kind)
    return run


# ---------------------------------------------------------------------------
# commands

def cmd_prepare(args: argparse.Namespace) -> int:
    seed = _seed(args)
    out = Path(_out(args, "corpus.hdat"))
    skipped = 0
    if args.synthetic:
        if args.songs < 1 or args.bars < 8:
            raise UsageError("--songs must be >= 1 and --bars >= 8")
        sheets = C.synth_corpus(args.songs, args.bars, seed)
    else:
        if args.input is None:
            raise UsageError("prepare needs --in DIR or --synthetic")
        src = Path(args.input)
        if not src.is_dir():
            raise UsageError(f"input directory not found: {src}")
        sheets = []
        for path in sorted(p for p in src.iterdir() if p.is_file()):
            try:
                sheets.extend(C.parse_leadsheets(path.read_text()))
            except C.UnsupportedMeter as err:
                log.warning("%s: skipped (%s)", path, err)
                skipped += 1
            except C.LeadSheetError as err:
                err.args = (f"{path}: {err}",)
                raise
    if not 0 < args.val_frac < 1:
        raise UsageError("--val-frac must lie strictly between 0 and 1")
    corpus = C.build_corpus(sheets, args.val_frac, seed)
    out.parent.mkdir(parents=True, exist_ok=True)
    C.write_corpus(corpus, out)
    n_train, n_val = len(corpus.song_ids("train")), len(corpus.song_ids("val"))
    summary = [f"corpus: {out}",
               f"songs: {n_train + n_val}",
               f"skipped_files: {skipped}",
               f"train_songs: {n_train}",
               f"val_songs: {n_val}",
               f"val_song_fraction: {n_val / max(1, n_train + n_val):.4f}",
               f"snippets: {sum(1 for s in corpus.train if s.transposition_tag == 0) + len(corpus.val)}",
               f"train_samples_augmented: {len(corpus.train)}",
               f"val_samples: {len(corpus.val)}",
               f"split_seed: {seed}"]
    text = "\n".join(summary) + "\n"
    out.with_name(out.name + ".summary.txt").write_text(text)
    sys.stdout.write(text)
    return 0


def _run_config(args: argparse.Namespace) -> RunConfig:
    entries = read_config_file(args.config) if getattr(args, "config", None) else {}
    for item in args.set or []:
        if "=" not in item:
            raise UsageError(f"--set expects key=value, got {item!r}")
        key, value = item.split("=", 1)
        entries[key.strip()] = value.strip()
    flag_map = {"variant": args.variant, "corpus": args.corpus, "epochs": args.epochs,
                "batch_size": args.batch_size, "max_epochs": args.max_epochs,
                "seed": getattr(args, "seed", None)}
    for key, value in flag_map.items():
        if value is not None:
            entries[key] = str(value)
    return resolve_config(entries, published=args.published_config)


def cmd_train(args: argparse.Namespace) -> int:
    run = _run_config(args)
    if args.dry_run:
        sys.stdout.write("\n".join(run.lines()) + "\n")
        return 0
    if run.corpus is None:
        raise UsageError("train needs a corpus (--corpus or corpus= in the config)")
    if not Path(run.corpus).is_file():
        raise UsageError(f"corpus not found: {run.corpus}")
    corpus = C.read_corpus(run.corpus)
    out = Path(_out(args, "run"))
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.txt").write_text("\n".join(run.lines()) + "\n")
    log.info("training %s for %d epochs into %s", run.variant.value, run.schedule.epochs, out)
    result = train(corpus, run.model, run.schedule, run.variant, out, mask_rate=run.mask_rate)
    last_val = [m for m in result.metrics if m["phase"] == "val"][-1]
    print(f"final checkpoint: {result.final_checkpoint}")
    print("validation: " + ", ".join(f"{k}={v:.4f}" for k, v in last_val.items()
                                    if k not in ("epoch", "phase")))
    return 0


def _load(path: str) -> tuple:
    if not Path(path).is_file():
        raise UsageError(f"checkpoint not found: {path}")
    return load_checkpoint(path)


def _read_sheet(path: str) -> C.LeadSheet:
    if not Path(path).is_file():
        raise UsageError(f"lead sheet not found: {path}")
    return C.ingest_leadsheet(path)


def cmd_harmonize(args: argparse.Namespace) -> int:
    model, _ = _load(args.checkpoint)
    style = C.window_sample(_read_sheet(args.style), args.style_beat)
    melody_sheet = _read_sheet(args.melody)
    melody = C.window_sample(melody_sheet, args.melody_beat).melody
    chord = E.swap_harmonize(model, style, melody)
    song_id = f"{melody_sheet.song_id}.{style.song_id}"
    sheet = C.leadsheet_from_grids(song_id, chord, melody, melody_sheet.meter)
    out = Path(_out(args, "harmonized.txt"))
    out.parent.mkdir(parents=True, exist_ok=True)
    C.write_leadsheet(sheet, out)
    print(f"wrote {out}")
    return 0


def _eval_one(model, samples: list[C.Sample], seed: int) -> dict:
    profile = E.transposition_similarity(model, samples)
    generated, truth = E.evaluate_controllability(model, samples, seed)
    return {"similarity": profile, "histogram": generated, "truth": truth}


def _write_eval(result: dict, out: Path) -> None:
    out.mkdir(parents=True, exist_ok=True)
    sim = E.similarity_report(result["similarity"])
    E.write_report(sim, out / "similarity.json")
    E.write_report(E.histogram_report(result["histogram"], "harmony_histogram"),
                   out / "histogram.json")
    E.write_report(E.histogram_report(result["truth"], "ground_truth_histogram"),
                   out / "ground_truth.json")
    E.write_csv(sim["rows"], out / "similarity.csv")
    E.write_csv([{"bucket": b, "generated": result["histogram"].fractions[b],
                  "ground_truth": result["truth"].fractions[b]} for b in E.BUCKETS],
                out / "histogram.csv")


def _labels(paths: list[str]) -> list[str]:
    stems = [Path(p).stem for p in paths]
    if len(set(stems)) == len(stems):
        return stems
    return [f"run{i}_{s}" for i, s in enumerate(stems)]


def cmd_eval(args: argparse.Namespace) -> int:
    paths = list(args.compare or [])
    if args.checkpoint:
        paths.insert(0, args.checkpoint)
    if not paths:
        raise UsageError("eval needs --checkpoint or --compare")
    if args.corpus is None or not Path(args.corpus).is_file():
        raise UsageError(f"corpus not found: {args.corpus}")
    corpus = C.read_corpus(args.corpus)
    samples = [s for s in (corpus.val if args.split == "val" else corpus.train)
               if s.transposition_tag == 0]
    if len(samples) < 2:
        raise UsageError(f"the {args.split} split has fewer than two samples")
    seed = _seed(args)
    out = Path(_out(args, "eval"))
    results = {}
    for label, path in zip(_labels(paths), paths):
        model, _ = _load(path)
        results[label] = _eval_one(model, samples, seed)
        target = out if len(paths) == 1 else out / label
        _write_eval(results[label], target)
        print(f"{label}: mean similarity (1..11) = "
              f"{results[label]['similarity'].mean_nontrivial():.4f}, "
              f"others = {results[label]['histogram'].fractions['others']:.4f}")
    if len(paths) > 1:
        out.mkdir(parents=True, exist_ok=True)
        rows = E.comparison_table(results)
        rows.append({"row": "ground_truth_others",
                     **{k: r["truth"].fractions["others"] for k, r in results.items()}})
        E.write_csv(rows, out / "compare.csv")
        print(f"wrote {out / 'compare.csv'}")
    return 0


# ---------------------------------------------------------------------------
# argument parsing

def _seed(args: argparse.Namespace) -> int:
    return getattr(args, "seed", None) if getattr(args, "seed", None) is not None else 0


def _out(args: argparse.Namespace, default: str) -> str:
    return getattr(args, "out", None) or default


def _global_flags(parser: argparse.ArgumentParser) -> None:
    # SUPPRESS lets the flags appear before or after the command name
    parser.add_argument("--config", default=argparse.SUPPRESS,
                        help="flat key=value config file (overridden by flags)")
    parser.add_argument("--seed", type=int, default=argparse.SUPPRESS,
                        help="random seed for splits, training and pairing (default 0)")
    parser.add_argument("--out", default=argparse.SUPPRESS,
                        help="output path: corpus file, run dir, lead sheet or report dir")
    parser.add_argument("-v", "--verbose", action="store_true", default=argparse.SUPPRESS,
                        help="debug logging")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="harmonia",
        description="Melody-conditioned chord generation with an adversarially "
                    "disentangled latent code.")
    _global_flags(parser)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("prepare", help="slice, augment and split lead sheets into a corpus file")
    _global_flags(p)
    p.add_argument("--in", dest="input", help="directory of lead-sheet text files")
    p.add_argument("--synthetic", action="store_true",
                   help="generate a synthetic diatonic corpus instead of reading files")
    p.add_argument("--songs", type=int, default=200, help="synthetic song count (default 200)")
    p.add_argument("--bars", type=int, default=16, help="bars per synthetic song (default 16)")
    p.add_argument("--val-frac", type=float, default=0.05,
                   help="fraction of songs held out for validation (published: 0.05)")
    p.set_defaults(func=cmd_prepare)

    m, s = PUBLISHED_MODEL, PUBLISHED_SCHEDULE
    p = sub.add_parser(
        "train", help="train a model variant",
        description="Train one variant. Any ModelConfig or TrainSchedule field can be set "
                    f"with --set key=value. Published values: batch {s.batch_size}, "
                    f"alpha {m.alpha}, i/j/k/l {s.i}/{s.j}/{s.k}/{s.l}, epochs {s.epochs}, "
                    f"lr {s.lr_start}->{s.lr_end}, teacher forcing {s.tf_start}->{s.tf_end}, "
                    f"d_z {m.d_z}, dropout {m.dropout}.")
    _global_flags(p)
    p.add_argument("--corpus", help="corpus file from `prepare`")
    p.add_argument("--variant", choices=[v.value for v in Variant],
                   help="dat (default), non-dat, mask-cr or non-cr")
    p.add_argument("--epochs", type=int, help=f"training epochs (published: {s.epochs})")
    p.add_argument("--max-epochs", type=int,
                   help="stop after this many epochs while keeping the full lr/tf schedule")
    p.add_argument("--batch-size", type=int, help=f"mini-batch size (published: {s.batch_size})")
    p.add_argument("--set", action="append", metavar="KEY=VALUE",
                   help="override any config field; repeatable")
    p.add_argument("--published-config", action="store_true",
                   help="use the published model and schedule values, ignoring overrides "
                        "other than seed, variant and paths")
    p.add_argument("--dry-run", action="store_true",
                   help="print the resolved config and exit without training")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("harmonize",
                       help="harmonize melody B in the chord style of lead sheet A")
    _global_flags(p)
    p.add_argument("--checkpoint", required=True, help="trained checkpoint")
    p.add_argument("--style", required=True, help="lead sheet A supplying the chord style")
    p.add_argument("--melody", required=True, help="lead sheet B supplying the melody")
    p.add_argument("--style-beat", type=int, default=0, help="first beat of A's 32-beat window")
    p.add_argument("--melody-beat", type=int, default=0, help="first beat of B's 32-beat window")
    p.set_defaults(func=cmd_harmonize)

    p = sub.add_parser("eval", help="similarity profile and harmony histograms")
    _global_flags(p)
    p.add_argument("--checkpoint", help="checkpoint to evaluate")
    p.add_argument("--compare", nargs="+", metavar="CKPT",
                   help="several checkpoints; also writes a side-by-side compare.csv")
    p.add_argument("--corpus", help="corpus file from `prepare`")
    p.add_argument("--split", choices=("val", "train"), default="val",
                   help="evaluation split (default val, unaugmented samples only)")
    p.set_defaults(func=cmd_eval)
    return parser


def _configure_threads() -> None:
    value = os.environ.get("HARMONIA_THREADS")
    if value is None:
        return
    try:
        n = int(value)
        if n < 1:
            raise ValueError
    except ValueError:
        raise UsageError(f"HARMONIA_THREADS must be a positive integer, got {value!r}") from None
    torch.set_num_threads(n)


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if getattr(args, "verbose", False) else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        _configure_threads()
        return args.func(args)
    except UsageError as err:
        print(f"harmonia {args.command}: error: {err}", file=sys.stderr)
        return 2
    except (ScheduleError, ContractError, enc.EncodingError, C.LeadSheetError,
            C.CorpusError) as err:
        print(f"harmonia {args.command}: error: {err}", file=sys.stderr)
        return 2 if isinstance(err, (ScheduleError, ContractError)) else 1
    except (TrainingDiverged, OSError, RuntimeError) as err:
        print(f"harmonia {args.command}: failed: {err}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
