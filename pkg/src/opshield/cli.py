"""``opshield`` command-line entry point.

Every subcommand ends its output with one ``RESULT key=value ...`` line.
Exit codes: 0 success, 2 data failure (or partial failure), 64 usage error,
70 internal error.
"""

from __future__ import annotations

import argparse
import csv
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace
from pathlib import Path

from . import evaluation as ev
from . import fasttext as ft
from . import fusion
from .config import RunConfig, load_config
from .errors import EmptySequence, InvalidConfig, OpshieldError
from .odt import Label, Mode, TokenSequence, extract_sequence, read_jsonl, write_jsonl
from .opdump import import_vld, parse_dump, serialize_dump

EXIT_OK, EXIT_DATA, EXIT_USAGE, EXIT_INTERNAL = 0, 2, 64, 70
log = logging.getLogger("opshield")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def _result(**kv) -> None:
    parts = []
    for k, v in kv.items():
        if isinstance(v, float):
            v = f"{v:.6f}"
        parts.append(f"{k}={v}")
    print("RESULT " + " ".join(parts), flush=True)


def _config(args) -> RunConfig:
    overrides = dict(s.split("=", 1) for s in args.set or ())
    overrides = {k.strip(): v.strip() for k, v in overrides.items()}
    cfg = load_config(args.config, overrides)
    if args.seed is not None:
        cfg = cfg.with_seed(args.seed)
    if getattr(args, "mode", None):
        cfg = replace(cfg, mode=Mode(args.mode))
    return cfg


def _map(fn, items, jobs):
    # order-preserving, so output never depends on the worker count
    if jobs <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(fn, items, chunksize=max(1, len(items) // (4 * jobs))))


# --- corpus loading ----------------------------------------------------------------

def _load_sequences(path: Path, cfg: RunConfig, mode: Mode | None = None) -> list[TokenSequence]:
    """A corpus directory (``labels.csv`` + dumps) or a JSONL file of token sequences."""
    if path.is_dir():
        return ev.extract_corpus(ev.read_corpus(path), cfg, mode)
    with open(path, encoding="utf-8") as fh:
        seqs = read_jsonl(fh)
    if mode is not None and any(s.mode is not Mode(mode) for s in seqs):
        raise InvalidConfig(f"{path} holds sequences of another mode")
    return seqs


def _load_corpus(path: Path) -> list[ev.Sample]:
    if not path.is_dir():
        raise UsageError(f"{path} is not a corpus directory")
    return ev.read_corpus(path)


# --- subcommands -------------------------------------------------------------------

def _parse_one(job):
    path, vld = job
    try:
        text = Path(path).read_text(encoding="utf-8")
        dump = import_vld(text) if vld else parse_dump(text)
        return serialize_dump(dump), None
    except (OpshieldError, OSError, UnicodeDecodeError) as exc:
        return None, f"{path}: {exc}"


def cmd_parse(args) -> int:
    outputs = _map(_parse_one, [(p, args.vld) for p in args.inputs], args.jobs)
    out_dir = Path(args.output) if args.output else None
    if out_dir:
        out_dir.mkdir(parents=True, exist_ok=True)
    ok = failed = 0
    for path, (text, err) in zip(args.inputs, outputs):
        if err:
            print(err, file=sys.stderr)
            failed += 1
            continue
        ok += 1
        if out_dir:
            (out_dir / (Path(path).stem + ".odump")).write_text(text, encoding="utf-8")
        else:
            sys.stdout.write(text)
    _result(parsed=ok, failed=failed)
    return EXIT_DATA if failed else EXIT_OK


def _extract_one(job):
    path, cfg, mode = job
    try:
        dump = parse_dump(Path(path).read_text(encoding="utf-8"))
        return extract_sequence(dump, cfg.rules, cfg.decode, mode, None, Path(path).stem), None
    except EmptySequence as exc:
        return None, ("skip", f"{path}: {exc}")
    except (OpshieldError, OSError, UnicodeDecodeError) as exc:
        return None, ("fail", f"{path}: {exc}")


def cmd_extract(args) -> int:
    cfg = _config(args)
    files, labels = [], {}
    for p in map(Path, args.inputs):
        if p.is_dir():
            labels.update(ev.read_labels(p / "labels.csv") if (p / "labels.csv").exists() else {})
            files.extend(sorted(p.glob("*.odump")))
        else:
            files.append(p)
    results = _map(_extract_one, [(f, cfg, cfg.mode) for f in files], args.jobs)
    seqs, skipped, failed = [], 0, 0
    for seq, err in results:
        if err:
            kind, msg = err
            log.warning("%s%s", "skipped " if kind == "skip" else "", msg)
            skipped += kind == "skip"
            failed += kind == "fail"
            continue
        label = labels.get(seq.source_id)
        seqs.append(TokenSequence(seq.tokens, label, seq.source_id, seq.mode))
    if args.output:
        with open(args.output, "w", encoding="utf-8") as fh:
            write_jsonl(seqs, fh)
    else:
        write_jsonl(seqs, sys.stdout)
    _result(records=len(seqs), skipped=skipped, failed=failed, mode=cfg.mode.value)
    if failed or not seqs:
        return EXIT_DATA
    return EXIT_OK


def _save_embedder(model: ft.EmbeddingModel, stem: Path) -> None:
    stem.parent.mkdir(parents=True, exist_ok=True)
    stem.with_suffix(".vec").write_text(ft.save_vec(model), encoding="utf-8")
    stem.with_suffix(".ftbk").write_bytes(ft.save_buckets(model))


def cmd_embed(args) -> int:
    cfg = _config(args)
    seqs = _load_sequences(Path(args.corpus), cfg, cfg.mode)
    model = ft.train_skipgram(seqs, cfg.embed)
    stem = Path(args.output)
    _save_embedder(model, stem.with_suffix("") if stem.suffix == ".vec" else stem)
    losses = model.loss_history or [float("nan")]
    _result(vocab=model.vocab_size, dim=model.dim, epochs=len(model.loss_history), final_loss=float(losses[-1]))
    return EXIT_OK


def _write_split(path: Path, parts) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["source_id", "split"])
        for name, part in zip(("train", "val", "test"), parts):
            for s in part:
                w.writerow([s.source_id, name])


def _read_split(path: Path) -> dict:
    with open(path, newline="", encoding="utf-8") as fh:
        return {row["source_id"]: row["split"] for row in csv.DictReader(fh)}


def cmd_train(args) -> int:
    cfg = _config(args)
    seqs = _load_sequences(Path(args.corpus), cfg, cfg.mode)
    train_set, val_set, test_set = ev.split_dataset(seqs, cfg.split)
    out = Path(args.output)
    out.mkdir(parents=True, exist_ok=True)
    embed = ft.train_skipgram(train_set, cfg.embed)
    # train against the embedder exactly as it will be reloaded from the checkpoint
    embed = ft.load_model(ft.save_vec(embed), ft.save_buckets(embed), cfg.embed)
    model, history = fusion.train(train_set, embed, cfg.encoder, cfg.fusion, cfg.train, val=val_set)
    fusion.save_model(model, out, history)
    _write_split(out / "split.csv", (train_set, val_set, test_set))
    (out / "mode.txt").write_text(cfg.mode.value + "\n", encoding="utf-8")
    last = history.epochs[-1] if history.epochs else {"train_loss": float("nan"), "val_acc": float("nan"), "val_f1": float("nan")}
    _result(epochs=len(history.epochs), train_loss=float(last["train_loss"]), val_acc=float(last["val_acc"]),
            val_f1=float(last["val_f1"]), train=len(train_set), val=len(val_set), test=len(test_set))
    return EXIT_OK


def _model_mode(model_dir: Path) -> Mode:
    f = model_dir / "mode.txt"
    return Mode(f.read_text(encoding="utf-8").strip()) if f.exists() else Mode.ODT


def cmd_eval(args) -> int:
    cfg = _config(args)
    model_dir = Path(args.model)
    model = fusion.load_model(model_dir)
    seqs = _load_sequences(Path(args.corpus), cfg, _model_mode(model_dir))
    split_file = model_dir / "split.csv"
    part = "all"
    if not args.all and split_file.exists():
        split = _read_split(split_file)
        chosen = [s for s in seqs if split.get(s.source_id) == "test"]
        if chosen:
            seqs, part = chosen, "test"
    m = fusion.evaluate(model, seqs)
    if args.report:
        Path(args.report).write_text(ev.metrics_csv({_model_mode(model_dir).value: m}), encoding="utf-8")
    print(ev.metrics_table({_model_mode(model_dir).value: m}), end="")
    _result(split=part, n=m.total, acc=m.accuracy, precision=m.precision, recall=m.recall, f1=m.f1)
    return EXIT_OK


def cmd_predict(args) -> int:
    model_dir = Path(args.model)
    model = fusion.load_model(model_dir)
    cfg = _config(args)
    mode = _model_mode(model_dir)
    failed, flagged, last = 0, 0, None
    for path in args.inputs:
        try:
            dump = parse_dump(Path(path).read_text(encoding="utf-8"))
            seq = extract_sequence(dump, cfg.rules, cfg.decode, mode)
            prob, label = fusion.predict(model, seq.tokens)
        except (OpshieldError, OSError, UnicodeDecodeError) as exc:
            print(f"{path}: {exc}", file=sys.stderr)
            failed += 1
            continue
        flagged += label is Label.WEBSHELL
        last = (prob, label)
        if len(args.inputs) > 1:
            print(f"{path}\t{prob:.6f}\t{label.name.lower()}")
    if len(args.inputs) == 1 and last is not None:
        _result(prob=last[0], label=last[1].name.lower())
    else:
        _result(files=len(args.inputs) - failed, webshell=flagged, failed=failed)
    return EXIT_DATA if failed else EXIT_OK


def cmd_gen(args) -> int:
    seed = 42 if args.seed is None else args.seed
    samples = ev.gen_corpus(seed, args.benign, args.malicious)
    ev.write_corpus(samples, args.output)
    _result(samples=len(samples), benign=args.benign, malicious=args.malicious, seed=seed,
            overlap=ev.opcode_overlap(samples))
    return EXIT_OK


def cmd_ablate(args) -> int:
    cfg = _config(args)
    report = ev.run_ablation(_load_corpus(Path(args.corpus)), cfg)
    print(report.to_table(), end="")
    if args.report:
        Path(args.report).write_text(report.to_csv(), encoding="utf-8")
    _result(acc_odt=report.odt.accuracy, acc_ost=report.ost.accuracy, delta=report.delta,
            f1_odt=report.odt.f1, f1_ost=report.ost.f1)
    return EXIT_OK


def _grid(text: str) -> tuple:
    try:
        values = tuple(float(x) for x in text.split(",") if x.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"not a comma-separated list of numbers: {text!r}") from None
    if not values or any(not 0.0 <= v <= 1.0 for v in values):
        raise argparse.ArgumentTypeError("lambda candidates must lie in [0, 1]")
    return values


def cmd_lambda(args) -> int:
    cfg = _config(args)
    if args.corpus:
        seqs = _load_sequences(Path(args.corpus), cfg, cfg.mode)
    else:
        # no corpus given: search on a small generated one
        samples = ev.gen_corpus(cfg.train.seed, args.benign, args.malicious)
        seqs = ev.extract_corpus(samples, cfg)
    best, table = ev.lambda_search(seqs, cfg, args.grid or None)
    print(f"{'lambda':>6} {'val_acc':>8} {'val_f1':>8}")
    for row in table:
        print(f"{row['lambda']:>6.2f} {row['accuracy']:>8.4f} {row['f1']:>8.4f}")
    _result(best_lambda=float(best), candidates=len(table))
    return EXIT_OK


# --- argument parsing --------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="key = value config file (default: $OPSHIELD_CONFIG)")
    common.add_argument("--seed", type=int, help="overrides every seed in the config")
    common.add_argument("--jobs", type=int, default=os.cpu_count() or 1, help="worker processes for per-file work")
    common.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key")
    common.add_argument("-v", "--verbose", action="store_true")

    p = _Parser(prog="opshield", description="Opcode-level webshell detection.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("parse", parents=[common], help="validate dumps and write canonical .odump")
    s.add_argument("inputs", nargs="+")
    s.add_argument("--vld", action="store_true", help="inputs are raw VLD listings")
    s.add_argument("-o", "--output", help="output directory (default: stdout)")
    s.set_defaults(func=cmd_parse)

    s = sub.add_parser("extract", parents=[common], help="dumps to JSONL token sequences")
    s.add_argument("inputs", nargs="+", help=".odump files or corpus directories")
    s.add_argument("--mode", choices=[m.value for m in Mode])
    s.add_argument("-o", "--output")
    s.set_defaults(func=cmd_extract)

    s = sub.add_parser("embed", parents=[common], help="train the subword skip-gram embedder")
    s.add_argument("corpus", help="corpus directory or JSONL")
    s.add_argument("--mode", choices=[m.value for m in Mode])
    s.add_argument("-o", "--output", required=True, help="output stem; writes .vec and .ftbk")
    s.set_defaults(func=cmd_embed)

    s = sub.add_parser("train", parents=[common], help="fit embedder and classifier, write a checkpoint")
    s.add_argument("corpus")
    s.add_argument("--mode", choices=[m.value for m in Mode])
    s.add_argument("-o", "--output", required=True)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("eval", parents=[common], help="score a checkpoint on its held-out split")
    s.add_argument("model")
    s.add_argument("corpus")
    s.add_argument("--all", action="store_true", help="score every sample, not just the test split")
    s.add_argument("--report", help="write a metrics CSV here")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("predict", parents=[common], help="classify dumps")
    s.add_argument("model")
    s.add_argument("inputs", nargs="+")
    s.set_defaults(func=cmd_predict)

    s = sub.add_parser("gen", parents=[common], help="write a synthetic labelled corpus")
    s.add_argument("--benign", type=int, default=500)
    s.add_argument("--malicious", type=int, default=500)
    s.add_argument("-o", "--output", required=True)
    s.set_defaults(func=cmd_gen)

    s = sub.add_parser("ablate", parents=[common], help="compare ODT and OST on one corpus")
    s.add_argument("corpus")
    s.add_argument("--report", help="write the comparison CSV here")
    s.set_defaults(func=cmd_ablate)

    s = sub.add_parser("lambda", parents=[common], help="grid search over the fusion weight")
    s.add_argument("corpus", nargs="?")
    s.add_argument("--grid", type=_grid)
    s.add_argument("--mode", choices=[m.value for m in Mode])
    s.add_argument("--benign", type=int, default=100, help="generated corpus size when no corpus is given")
    s.add_argument("--malicious", type=int, default=100)
    s.set_defaults(func=cmd_lambda)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    if args.jobs < 1:
        print("opshield: error: --jobs must be at least 1", file=sys.stderr)
        return EXIT_USAGE
    try:
        return args.func(args)
    except (InvalidConfig, UsageError) as exc:
        print(f"opshield: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (OpshieldError, OSError, UnicodeDecodeError) as exc:
        print(f"opshield: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_DATA
    except Exception:  # noqa: BLE001
        log.exception("internal error")
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
