"""``dicelab`` command line: one subcommand per stage plus full-plan ``distill`` and ``report``.

Exit codes: 0 success, 1 config error, 2 data error, 3 numeric error. Every
failure prints a single line ``ERROR(<class>): <message>`` on stderr.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import fileio, pipeline
from .clustering import Codebook, assign_hard, kmeans_fit, soft_labels
from .corpus import generate_corpus, load_corpus
from .errors import ConfigError, DataError, DiceError
from .mfcc import mfcc
from .model import BASE, ModelConfig, extract_teacher_features
from .probes import TASKS, ProbeConfig, probe_train
from .trainer import TrainConfig, load_encoder, resume, train

COMMANDS = ("gen-corpus", "extract-features", "kmeans", "labels", "train", "distill", "probe", "report")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError(message)


def _global_options() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    g = p.add_argument_group("global options")
    g.add_argument("--out-dir", type=Path, default=Path("."), help="directory for outputs (created if absent)")
    g.add_argument("--seed", type=int, default=None, help="global seed; stage seeds derive from it")
    g.add_argument("-v", "--verbose", action="count", default=0, help="more logging (repeatable)")
    g.add_argument("--threads", type=int, default=1, help="cap on worker threads for generation and extraction")
    return p


def build_parser() -> argparse.ArgumentParser:
    common = _global_options()
    parser = _Parser(prog="dicelab", description="Toy-scale iterative self-distillation for speech encoders.")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    p = sub.add_parser("gen-corpus", parents=[common], help="synthesize a labelled toy corpus")
    p.add_argument("--n-utts", type=int, default=200)
    p.add_argument("--phonemes", type=int, default=4)
    p.add_argument("--speakers", type=int, default=4)
    p.add_argument("--min-seconds", type=float, default=2.0)
    p.add_argument("--max-seconds", type=float, default=2.0)

    p = sub.add_parser("extract-features", parents=[common], help="MFCC or encoder-layer features for a corpus")
    p.add_argument("--corpus", type=Path, required=True, help="corpus directory or corpus.json")
    p.add_argument("--checkpoint", type=Path, help="encoder checkpoint; MFCC when omitted")
    p.add_argument("--layer", type=int, help="encoder layer (default: L/2)")
    p.add_argument("--out", type=Path, help="feature dump (default: <out-dir>/features.bin)")

    p = sub.add_parser("kmeans", parents=[common], help="fit a codebook to a feature dump")
    p.add_argument("--features", type=Path, required=True)
    p.add_argument("--k", type=int, required=True)
    p.add_argument("--max-iters", type=int, default=100)
    p.add_argument("--n-init", type=int, default=10)
    p.add_argument("--out", type=Path, help="codebook file (default: <out-dir>/codebook.bin)")

    p = sub.add_parser("labels", parents=[common], help="hard or soft labels from a codebook")
    p.add_argument("--codebook", type=Path, required=True)
    p.add_argument("--features", type=Path, required=True)
    p.add_argument("--mode", choices=("hard", "soft"), default="hard")
    p.add_argument("--tau", type=float, default=1.0)
    p.add_argument("--out", type=Path, help="label file (default: <out-dir>/labels.bin)")

    p = sub.add_parser("train", parents=[common], help="train an encoder from a JSON config")
    p.add_argument("--config", type=Path, required=True, help="JSON with TrainConfig fields plus 'corpus' and 'model'")
    p.add_argument("--corpus", type=Path, help="corpus directory (overrides the config's 'corpus')")
    p.add_argument("--resume", type=Path, help="checkpoint to continue from")

    p = sub.add_parser("distill", parents=[common], help="run a full multi-stage plan")
    p.add_argument("--preset", required=True, help=f"one of: {', '.join(pipeline.PRESETS)}")
    p.add_argument("--override", action="append", default=[], metavar="KEY=VAL", help="plan override (repeatable)")

    p = sub.add_parser("probe", parents=[common], help="linear probe on a frozen checkpoint")
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--task", choices=TASKS, required=True)
    p.add_argument("--corpus", type=Path, help="corpus directory (default: from --manifest)")
    p.add_argument("--manifest", type=Path, help="experiment manifest to append the result to")
    p.add_argument("--steps", type=int, default=2000)
    p.add_argument("--lr", type=float, default=1e-3)

    p = sub.add_parser("report", parents=[common], help="tabulate one or more experiment manifests")
    p.add_argument("--manifest", type=Path, nargs="+", required=True)
    p.add_argument("--json", action="store_true", help="print a JSON summary instead of tables")
    return parser


def _seed(args, default: int = 0) -> int:
    return default if args.seed is None else args.seed


def _out(args, explicit: Path | None, name: str) -> Path:
    path = explicit if explicit is not None else args.out_dir / name
    path.parent.mkdir(parents=True, exist_ok=True)
    return path


def cmd_gen_corpus(args) -> None:
    args.out_dir.mkdir(parents=True, exist_ok=True)
    manifest, _ = generate_corpus(
        args.n_utts, args.phonemes, args.speakers, _seed(args), args.out_dir, args.min_seconds, args.max_seconds, args.threads
    )
    print(f"wrote {len(manifest)} utterances to {args.out_dir}")


def cmd_extract_features(args) -> None:
    corpus = load_corpus(args.corpus)
    waves = corpus.load_all()
    if args.checkpoint is None:
        if args.layer is not None:
            raise ConfigError("--layer needs --checkpoint")
        feats = [mfcc(w) for w in waves]
    else:
        model = load_encoder(args.checkpoint)
        layer = model.cfg.L // 2 if args.layer is None else args.layer
        feats = extract_teacher_features(model, waves, layer, threads=args.threads)
    out = _out(args, args.out, "features.bin")
    fileio.write_features(out, feats, [u.utterance_id for u in corpus.utterances])
    print(f"wrote {len(feats)} feature matrices of dim {feats[0].shape[1]} to {out}")


def cmd_kmeans(args) -> None:
    _, feats = fileio.read_features(args.features)
    cb = kmeans_fit(feats, args.k, seed=_seed(args), max_iters=args.max_iters, n_init=args.n_init)
    out = _out(args, args.out, "codebook.bin")
    cb.save(out)
    print(f"K={cb.K} inertia={cb.inertia:.6g} iterations={cb.iterations} -> {out}")


def cmd_labels(args) -> None:
    if not args.tau > 0:
        raise ConfigError(f"tau must be > 0, got {args.tau}")
    cb = Codebook.load(args.codebook)
    ids, feats = fileio.read_features(args.features)
    out = _out(args, args.out, "labels.bin")
    if args.mode == "hard":
        fileio.write_hard_labels(out, assign_hard(cb, feats), ids)
    else:
        fileio.write_soft_labels(out, soft_labels(cb, feats, args.tau), ids, args.tau)
    print(f"wrote {args.mode} labels for {len(ids)} utterances to {out}")


def cmd_train(args) -> None:
    if not args.config.exists():
        raise DataError(f"config not found: {args.config}")
    try:
        raw = json.loads(args.config.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}") from None
    cfg = TrainConfig.from_json(args.config)
    if args.seed is not None:
        cfg.seed = args.seed
    corpus_path = args.corpus or raw.get("corpus")
    if corpus_path is None:
        raise ConfigError("train needs a corpus (--corpus or 'corpus' in the config)")
    corpus = load_corpus(corpus_path)
    model_cfg = ModelConfig.from_dict({**BASE.to_dict(), **raw.get("model", {})})
    out_dir = Path(raw["out_dir"]) if "out_dir" in raw and args.out_dir == Path(".") else args.out_dir
    out_dir.mkdir(parents=True, exist_ok=True)
    if args.resume is not None:
        result = resume(args.resume, cfg, corpus, out_dir)
    else:
        result = train(cfg, corpus, model_cfg, out_dir)
    last = result.history[-1].line(cfg.steps) if result.history else "nothing to do"
    print(f"{last}\ncheckpoint: {result.checkpoint}")


def cmd_distill(args) -> None:
    plan = pipeline.preset(args.preset)
    overrides = list(args.override)
    if args.seed is not None:
        overrides.append(f"seed={args.seed}")
    plan = pipeline.apply_overrides(plan, overrides)
    manifest = pipeline.run_plan(plan, args.out_dir, threads=args.threads)
    print(pipeline.report([args.out_dir]))
    print(f"manifest: {args.out_dir / pipeline.MANIFEST} ({len(manifest['stages'])} stages)")


def cmd_probe(args) -> None:
    if args.corpus is None and args.manifest is None:
        raise ConfigError("probe needs --corpus or --manifest")
    if args.corpus is not None:
        corpus = load_corpus(args.corpus)
    else:
        m, root = pipeline.load_manifest(args.manifest)
        corpus = load_corpus(root / m["corpus"]["manifest"]["path"])
    cfg = ProbeConfig(task=args.task, seed=_seed(args), lr=args.lr, steps=args.steps)
    result = probe_train(load_encoder(args.checkpoint), cfg, corpus)
    if args.manifest is not None:
        pipeline.append_probe(args.manifest, str(args.checkpoint), cfg, result)
    print(json.dumps(result.to_json()))


def cmd_report(args) -> None:
    out = pipeline.report(args.manifest, as_json=args.json)
    print(json.dumps(out, indent=2) if args.json else out)


HANDLERS = {
    "gen-corpus": cmd_gen_corpus,
    "extract-features": cmd_extract_features,
    "kmeans": cmd_kmeans,
    "labels": cmd_labels,
    "train": cmd_train,
    "distill": cmd_distill,
    "probe": cmd_probe,
    "report": cmd_report,
}


def main(argv: list[str] | None = None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    parser = build_parser()
    if not argv:
        parser.print_usage(sys.stderr)
        return 1
    try:
        try:
            args = parser.parse_args(argv)
        except ConfigError:
            parser.print_usage(sys.stderr)
            raise
        if args.command is None:
            parser.print_usage(sys.stderr)
            return 1
        logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2), format="%(levelname)s %(name)s: %(message)s")
        if args.threads < 1:
            raise ConfigError("--threads must be >= 1")
        args.out_dir.mkdir(parents=True, exist_ok=True)
        HANDLERS[args.command](args)
    except DiceError as exc:
        print(f"ERROR({exc.kind}): {_one_line(exc)}", file=sys.stderr)
        return exc.exit_code
    except (FileNotFoundError, IsADirectoryError) as exc:
        print(f"ERROR(data): {_one_line(exc)}", file=sys.stderr)
        return DataError.exit_code
    return 0


def _one_line(exc: BaseException) -> str:
    return " ".join(str(exc).split()) or type(exc).__name__


if __name__ == "__main__":
    sys.exit(main())
