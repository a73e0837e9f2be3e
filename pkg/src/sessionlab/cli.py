"""Command-line entry point: ``sessionlab <stage> [options]``.

Every stage writes its artifacts plus a ``run.json`` (arguments, seed, input
digests, tool version) into ``--out``. Exit codes: 0 success, 1 unexpected
error, 2 usage, 3 missing input, 4 schema mismatch, 5 infeasible rebalance.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import sys
from importlib import resources
from pathlib import Path
from typing import Optional, Sequence

from . import __version__
from .model import Label, LogEntry, Session, SchemaError, dump_jsonl, iter_jsonl, load_sessions

EXIT_OK, EXIT_ERROR, EXIT_USAGE, EXIT_MISSING, EXIT_SCHEMA, EXIT_INFEASIBLE = 0, 1, 2, 3, 4, 5


class MissingInput(Exception):
    pass


class StageSchemaError(Exception):
    pass


# --- helpers -------------------------------------------------------------------

def _digest(path: Path) -> str:
    h = hashlib.sha256()
    if path.is_dir():
        for f in sorted(p for p in path.rglob("*") if p.is_file() and p.name != "run.json"):
            h.update(f.relative_to(path).as_posix().encode() + b"\0")
            h.update(hashlib.sha256(f.read_bytes()).digest())
    else:
        h.update(path.read_bytes())
    return h.hexdigest()


def _require(*paths) -> None:
    for p in paths:
        if p is not None and not Path(p).exists():
            raise MissingInput(f"input not found: {p}")


def _resolve(path, name: str) -> Path:
    """Accept either a file or a stage output directory containing ``name``."""
    p = Path(path)
    if p.is_dir():
        p = p / name
    if not p.exists():
        raise MissingInput(f"input not found: {p}")
    return p


def _write_json(obj, path: Path) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _write_run(out: Path, args: argparse.Namespace, inputs: Sequence[Path], extra: Optional[dict] = None) -> None:
    params = {k: v for k, v in sorted(vars(args).items()) if k not in ("func", "config", "command")}
    doc = {
        "command": args.command,
        "seed": args.seed,
        "args": params,
        "inputs": {str(p): _digest(Path(p)) for p in inputs},
        "version": __version__,
    }
    if extra:
        doc.update(extra)
    _write_json(doc, out / "run.json")


def _out(path) -> Path:
    p = Path(path)
    p.mkdir(parents=True, exist_ok=True)
    return p


def _load_sessions(path: Path) -> list:
    try:
        return load_sessions(path)
    except SchemaError as exc:
        raise StageSchemaError(f"{path}: {exc}") from exc


# --- stages ---------------------------------------------------------------------

def cmd_gen(args) -> dict:
    from .synth import TestbedConfig, demo_config, generate

    if args.testbed:
        _require(args.testbed)
        try:
            cfg = TestbedConfig.from_json(args.testbed)
        except (TypeError, KeyError, json.JSONDecodeError) as exc:
            raise StageSchemaError(f"{args.testbed}: {exc}") from exc
    else:
        text = resources.files("sessionlab.data").joinpath("demo_testbed.json").read_text()
        cfg = TestbedConfig(**json.loads(text))
    if args.seed is not None:
        cfg.seed = args.seed
    if args.days is not None:
        cfg = demo_config(seed=cfg.seed, days=args.days)
    out = _out(args.out)
    summary = generate(cfg, out)
    _write_json(cfg.to_dict(), out / "testbed.json")
    _write_run(out, args, [Path(args.testbed)] if args.testbed else [], {"summary": summary})
    return summary


def _corpus_year(corpus: Path) -> Optional[int]:
    tb = corpus / "testbed.json"
    if tb.exists():
        from .synth import TestbedConfig
        return TestbedConfig.from_json(tb).start_time.year
    return None


def cmd_parse(args) -> dict:
    from .parsers import ParseStats, attach_tags, hint_from_filename, parse_file, read_labels
    from .sessionizer import sort_entries

    src = Path(args.input)
    _require(src, args.labels)
    if src.is_dir():
        files = sorted(p for p in src.rglob("*") if p.is_file() and p.suffix in (".log", ".gz"))
        root = src
    else:
        files, root = [src], src.parent
    if not files:
        raise MissingInput(f"no .log or .gz files under {src}")
    labels_path = Path(args.labels) if args.labels else (src / "labels.jsonl" if src.is_dir() else None)
    if labels_path is not None and not labels_path.exists():
        labels_path = None
    try:
        labels = read_labels(labels_path) if labels_path else {}
    except ValueError as exc:
        raise StageSchemaError(str(exc)) from exc
    year = args.year or (_corpus_year(src) if src.is_dir() else None) or 1970

    stats = ParseStats()
    entries = []
    for f in files:
        rel = f.relative_to(root).as_posix()
        hint = args.hint or hint_from_filename(f)
        parsed = parse_file(f, hint, year=year, stats=stats)
        entries.extend(attach_tags(parsed, labels.get(rel, {})))
    entries = sort_entries(entries)
    out = _out(args.out)
    dump_jsonl(entries, out / "entries.jsonl")
    summary = {"files": len(files), "entries": len(entries), "parsing_stats": stats.to_dict(), "year": year}
    _write_json(summary, out / "parse_stats.json")
    _write_run(out, args, [src] + ([labels_path] if labels_path else []), {"summary": summary})
    return summary


def _load_entries(path: Path) -> list:
    try:
        return [LogEntry.from_dict(d) for d in iter_jsonl(path)]
    except SchemaError as exc:
        raise StageSchemaError(f"{path}: {exc}") from exc


def cmd_sessionize(args) -> dict:
    from .sessionizer import prevalence, sessionize

    src = _resolve(args.input, "entries.jsonl")
    entries = _load_entries(src)
    sessions = sessionize(entries, gap_seconds=args.gap_seconds)
    out = _out(args.out)
    dump_jsonl(sessions, out / "sessions.jsonl")
    summary = {"entries": len(entries), "sessions": len(sessions),
               "prevalence": prevalence(sessions).to_dict() if sessions else None}
    _write_json(summary, out / "prevalence.json")
    _write_run(out, args, [src], {"summary": summary})
    return summary


def cmd_anonymize(args) -> dict:
    from .anonymizer import AnonKey, Anonymizer

    _require(args.anon_key_file)
    src = Path(args.input)
    if src.is_dir():
        src = src / "sessions.jsonl" if (src / "sessions.jsonl").exists() else src / "entries.jsonl"
    _require(src)
    try:
        key = AnonKey.from_file(args.anon_key_file)
    except ValueError as exc:
        raise StageSchemaError(f"{args.anon_key_file}: {exc}") from exc
    anon = Anonymizer(key)
    records = list(iter_jsonl(src))
    out = _out(args.out)
    try:
        if records and "entries" in records[0]:
            sessions = [Session.from_dict(r) for r in records]
            result = [Session.from_entries([anon.entry(e) for e in s.entries]) for s in sessions]
            name = "sessions.jsonl"
        else:
            result = [anon.entry(LogEntry.from_dict(r)) for r in records]
            name = "entries.jsonl"
    except SchemaError as exc:
        raise StageSchemaError(f"{src}: {exc}") from exc
    dump_jsonl(result, out / name)
    summary = {"records": len(result), "kind": name.split(".")[0]}
    # the key itself is never written; run.json records only its path
    _write_run(out, args, [src], {"summary": summary})
    return summary


def _write_split(out: Path, sessions: list, manifest, pairs: bool) -> None:
    from .dataset import compute_stats, to_instruction_pair

    by_id = {s.session_id: s for s in sessions}
    for split in ("train", "val"):
        chosen = [by_id[i] for i in manifest.split_ids(split)]
        dump_jsonl(chosen, out / f"sessions_{split}.jsonl")
        if pairs:
            dump_jsonl((to_instruction_pair(s) for s in chosen), out / f"pairs_{split}.jsonl")
    _write_json(manifest.to_dict(), out / "manifest.json")
    _write_stats_tables(compute_stats(sessions), out)


def _write_stats_tables(stats, out: Path) -> None:
    _write_json(stats.to_dict(), out / "stats.json")
    with open(out / "hour_histogram.csv", "w", encoding="utf-8", newline="\n") as fh:
        fh.write("hour,sessions\n")
        for h, c in enumerate(stats.hour_histogram):
            fh.write(f"{h},{c}\n")
    with open(out / "per_host_sessions.csv", "w", encoding="utf-8", newline="\n") as fh:
        fh.write("host,sessions\n")
        for host, c in sorted(stats.per_host_sessions.items()):
            fh.write(f"{host},{c}\n")


def cmd_build_foundation(args) -> dict:
    from .dataset import build_foundation

    src = _resolve(args.input, "sessions.jsonl")
    sessions = _load_sessions(src)
    manifest = build_foundation(sessions, seed=args.seed or 0)
    out = _out(args.out)
    _write_split(out, sessions, manifest, pairs=False)
    summary = {"sessions": len(sessions), "prevalence": manifest.achieved_prevalence}
    _write_run(out, args, [src], {"summary": summary})
    return summary


def cmd_build_defense(args) -> dict:
    from .dataset import rebalance

    src = _resolve(args.input, "sessions.jsonl")
    sessions = _load_sessions(src)
    manifest, kept = rebalance(sessions, args.target_prevalence, args.tolerance, seed=args.seed or 0)
    out = _out(args.out)
    _write_split(out, kept, manifest, pairs=True)
    summary = {"input_sessions": len(sessions), "kept_sessions": len(kept),
               "prevalence": manifest.achieved_prevalence}
    _write_run(out, args, [src], {"summary": summary})
    return summary


def cmd_bench(args) -> dict:
    from . import bench

    fractions = [float(f) for f in args.fractions.split(",")]
    inputs = []
    seed = args.seed or 0
    if args.classifier == "miscalibrated":
        seed = bench.DEMO_SEED if args.seed is None else args.seed
        demo = bench.miscalibration_demo(seed=seed, total=args.total)
        attacks, normals, clf = demo.attack_pool, demo.normal_pool, demo.classifier
    else:
        if args.input:
            src = _resolve(args.input, "sessions.jsonl")
            inputs.append(src)
            attacks, normals = bench.pools_from_sessions(_load_sessions(src))
        else:
            attacks, normals = bench.synthetic_pools(args.total, args.total)
        clf = {"always-normal": bench.always_normal, "always-attack": bench.always_attack}[args.classifier]
    try:
        points = bench.sweep(clf, attacks, normals, args.total, fractions, seed=seed)
    except bench.InsufficientPool as exc:
        raise MissingInput(str(exc)) from exc
    out = _out(args.out)
    bench.write_csv(points, out / "sweep.csv")
    bench.write_json(points, out / "sweep.json", {"classifier": args.classifier})
    _write_run(out, args, inputs)
    return {"points": [p.csv_row() for p in points]}


def _examples(sessions: list, max_seq: int, vocab: int, prefix: str) -> list:
    from .dataset import session_prompt
    from .distill import Example, byte_tokenize

    return [Example(f"{prefix}-{s.session_id}", byte_tokenize(session_prompt(s), max_seq, vocab),
                    1 if s.label is Label.ANOMALOUS else 0) for s in sessions]


def cmd_train_distill(args) -> dict:
    import torch

    from .distill import (DistillConfig, MissingTeacherOutput, read_teacher_logits, teacher_logits,
                          train, train_classifier, write_teacher_logits)
    from .tinymodel import TinyConfig, build_model, save_config, save_model

    src = Path(args.input)
    train_path = _resolve(src, "sessions_train.jsonl")
    val_path = _resolve(src, "sessions_val.jsonl")
    _require(args.teacher_logits)
    torch.set_num_threads(1)
    mcfg = TinyConfig(lora_rank=args.lora_r, lora_alpha=args.lora_alpha, lambda_aux=args.lambda_aux,
                      max_seq=args.max_seq, d_model=args.d_model, n_layers=args.layers,
                      seed=args.seed or 0)
    train_s = _load_sessions(train_path)
    val_s = _load_sessions(val_path)
    if args.max_examples:
        train_s, val_s = train_s[:args.max_examples], val_s[:max(1, args.max_examples // 9)]
    train_x = _examples(train_s, mcfg.max_seq, mcfg.vocab_size, "train")
    val_x = _examples(val_s, mcfg.max_seq, mcfg.vocab_size, "val")

    out = _out(args.out)
    if args.teacher_logits:
        try:
            store = read_teacher_logits(args.teacher_logits)
        except ValueError as exc:
            raise StageSchemaError(str(exc)) from exc
    else:
        teacher = build_model(TinyConfig(**{**mcfg.to_dict(), "seed": mcfg.seed + 1}))
        train_classifier(teacher, train_x, epochs=args.teacher_epochs, lr=args.teacher_lr, seed=mcfg.seed)
        store = teacher_logits(teacher, train_x + val_x)
        save_model(teacher, out / "teacher.tensors")
    write_teacher_logits(store, out / "teacher_logits.jsonl")

    dcfg = DistillConfig(temperature=args.temperature, alpha=args.alpha, base_lr=args.lr,
                         warmup_ratio=args.warmup_ratio, epochs=args.epochs,
                         accumulation_steps=args.accumulation_steps, eval_every=args.eval_every,
                         save_every=args.save_every, keep_checkpoints=args.keep_checkpoints,
                         seed=args.seed or 0, use_t2=not args.no_t2, optimizer=args.optimizer)
    student = build_model(mcfg)
    try:
        result = train(student, store, train_x, dcfg, val_x, out)
    except MissingTeacherOutput as exc:
        raise MissingInput(str(exc)) from exc
    save_model(student, out / "student.tensors")
    save_config(mcfg, out / "model_config.json")
    summary = {"steps": result.steps, "epoch_mean_loss": result.epoch_mean_loss,
               "eval_accuracy": result.eval_accuracy, "teacher_agreement": result.teacher_agreement,
               "checkpoints": result.checkpoints, "trainable": result.trainable,
               "train_examples": len(train_x), "val_examples": len(val_x)}
    _write_json(summary, out / "summary.json")
    _write_run(out, args, [train_path, val_path] + ([Path(args.teacher_logits)] if args.teacher_logits else []),
               {"distill_config": dcfg.to_dict(), "model_config": mcfg.to_dict()})
    return summary


def _svg(fig, path: Path) -> None:
    import matplotlib

    matplotlib.rcParams["svg.hashsalt"] = "sessionlab"
    fig.savefig(path, format="svg", metadata={"Date": None})


def cmd_report(args) -> dict:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    from . import bench
    from .dataset import compute_stats

    if not args.sessions and not args.sweep:
        raise MissingInput("report needs --sessions and/or --sweep")
    out = _out(args.out)
    inputs, made = [], []
    if args.sessions:
        src = _resolve(args.sessions, "sessions.jsonl")
        inputs.append(src)
        stats = compute_stats(_load_sessions(src))
        _write_stats_tables(stats, out)
        fig, ax = plt.subplots(figsize=(7, 3.5))
        ax.bar(range(24), stats.hour_histogram, color="#4a7ab5")
        ax.set_xlabel("hour of day (UTC)")
        ax.set_ylabel("sessions")
        ax.set_title("Sessions by start hour")
        ax.set_xticks(range(0, 24, 2))
        fig.tight_layout()
        _svg(fig, out / "hour_histogram.svg")
        plt.close(fig)
        made += ["stats.json", "hour_histogram.csv", "hour_histogram.svg"]
    if args.sweep:
        src = _resolve(args.sweep, "sweep.csv")
        inputs.append(src)
        try:
            rows = bench.read_csv(src)
        except ValueError as exc:
            raise StageSchemaError(str(exc)) from exc
        x = [int(r["attack_pct"]) for r in rows]
        fig, ax = plt.subplots(figsize=(6, 3.5))
        ax.plot(x, [float(r["accuracy"]) for r in rows], marker="o", label="accuracy")
        ax.plot(x, [int(r["true_positive"]) / max(1, int(r["n_attacks"])) for r in rows], marker="s",
                label="recall")
        ax.set_xlabel("attack share of test set (%)")
        ax.set_ylim(-0.02, 1.02)
        ax.legend()
        ax.set_title("Metrics across attack fractions")
        fig.tight_layout()
        _svg(fig, out / "sweep.svg")
        plt.close(fig)
        if src.resolve() != (out / "sweep.csv").resolve():
            (out / "sweep.csv").write_bytes(src.read_bytes())
        made += ["sweep.csv", "sweep.svg"]
    _write_run(out, args, inputs)
    return {"artifacts": made}


# --- parser ---------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    def globals_(default):
        g = argparse.ArgumentParser(add_help=False)
        g.add_argument("--seed", type=int, default=default, help="seed propagated to every random choice")
        g.add_argument("--config", default=default, help="JSON file of option defaults")
        return g

    # accepted before or after the subcommand; the subcommand copy must not reset an earlier value
    common = globals_(argparse.SUPPRESS)
    p = argparse.ArgumentParser(prog="sessionlab", parents=[globals_(None)],
                                description="Security-log sessionization, datasets, benchmarks and distillation.")
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, func, help_):
        sp = sub.add_parser(name, parents=[common], help=help_)
        sp.set_defaults(func=func)
        sp.add_argument("--out", required=True, help="output directory")
        return sp

    sp = add("gen", cmd_gen, "generate a synthetic multi-host corpus")
    sp.add_argument("--testbed", help="testbed JSON (defaults to the shipped demo)")
    sp.add_argument("--days", type=int, help="override the demo duration in days")

    sp = add("parse", cmd_parse, "parse raw logs into LogEntry JSONL")
    sp.add_argument("--input", required=True, help="log file or corpus directory")
    sp.add_argument("--labels", help="labels.jsonl (defaults to <input>/labels.jsonl)")
    sp.add_argument("--hint", choices=["syslog", "apache_access", "auth", "dns", "audit", "suricata", "raw"])
    sp.add_argument("--year", type=int, help="year for syslog timestamps")

    sp = add("sessionize", cmd_sessionize, "group entries into sessions")
    sp.add_argument("--input", required=True)
    sp.add_argument("--gap-seconds", type=float, default=300.0)

    sp = add("anonymize", cmd_anonymize, "pseudonymize IPs and usernames")
    sp.add_argument("--input", required=True)
    sp.add_argument("--anon-key-file", required=True, help="hex-encoded 32-byte key")

    sp = add("build-foundation", cmd_build_foundation, "natural-prevalence dataset with a 90/10 split")
    sp.add_argument("--input", required=True)

    sp = add("build-defense", cmd_build_defense, "rebalanced dataset with instruction pairs")
    sp.add_argument("--input", required=True)
    sp.add_argument("--target-prevalence", type=float, default=0.35)
    sp.add_argument("--tolerance", type=float, default=0.01)

    sp = add("bench", cmd_bench, "accuracy sweep across attack fractions")
    sp.add_argument("--classifier", choices=["always-normal", "always-attack", "miscalibrated"],
                    default="always-normal")
    sp.add_argument("--input", help="sessions JSONL used as pools (defaults to synthetic pools)")
    sp.add_argument("--total", type=int, default=10_000)
    sp.add_argument("--fractions", default="0,0.2,0.4,0.6,0.8,1.0")

    sp = add("train-distill", cmd_train_distill, "train a teacher stand-in and distill a student")
    sp.add_argument("--input", required=True, help="build-defense output directory")
    sp.add_argument("--teacher-logits", help="precomputed teacher logits JSONL")
    sp.add_argument("--temperature", type=float, default=4.0)
    sp.add_argument("--alpha", type=float, default=0.5)
    sp.add_argument("--lr", type=float, default=1e-4)
    sp.add_argument("--warmup-ratio", type=float, default=0.1)
    sp.add_argument("--epochs", type=int, default=5)
    sp.add_argument("--accumulation-steps", type=int, default=16)
    sp.add_argument("--eval-every", type=int, default=100)
    sp.add_argument("--save-every", type=int, default=100)
    sp.add_argument("--keep-checkpoints", type=int, default=3)
    sp.add_argument("--optimizer", choices=["sgd", "adamw"], default="adamw")
    sp.add_argument("--no-t2", action="store_true", help="drop the T^2 factor on the KL term")
    sp.add_argument("--lora-r", type=int, default=16)
    sp.add_argument("--lora-alpha", type=float, default=32.0)
    sp.add_argument("--lambda-aux", type=float, default=0.01)
    sp.add_argument("--d-model", type=int, default=64)
    sp.add_argument("--layers", type=int, default=2)
    sp.add_argument("--max-seq", type=int, default=128)
    sp.add_argument("--max-examples", type=int, default=None)
    sp.add_argument("--teacher-epochs", type=int, default=5)
    sp.add_argument("--teacher-lr", type=float, default=1e-3)

    sp = add("report", cmd_report, "CSV tables and SVG charts")
    sp.add_argument("--sessions", help="sessions JSONL or directory")
    sp.add_argument("--sweep", help="sweep CSV or bench output directory")
    return p


def _apply_config(parser: argparse.ArgumentParser, argv: Sequence[str]) -> argparse.Namespace:
    """Parse, then re-parse with defaults from ``--config`` so explicit flags still win.

    The JSON may hold flat option names (applied to every stage) and per-stage
    sections keyed by subcommand name.
    """
    args = parser.parse_args(argv)
    if not args.config:
        return args
    _require(args.config)
    try:
        doc = json.loads(Path(args.config).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise StageSchemaError(f"{args.config}: {exc}") from exc
    if not isinstance(doc, dict):
        raise StageSchemaError(f"{args.config}: expected a JSON object")
    values = {k: v for k, v in doc.items() if not isinstance(v, dict)}
    values.update(doc.get(args.command, {}))
    values = {k.replace("-", "_"): v for k, v in values.items()}
    known = set(vars(args))
    unknown = sorted(set(values) - known)
    if unknown:
        raise StageSchemaError(f"{args.config}: unknown option(s) for {args.command}: {', '.join(unknown)}")
    sub = parser._subparsers._group_actions[0].choices[args.command]
    sub.set_defaults(**{k: v for k, v in values.items() if k != "seed"})
    if "seed" in values:
        parser.set_defaults(seed=values["seed"])
    return parser.parse_args(argv)


def main(argv: Optional[Sequence[str]] = None) -> int:
    from .dataset import InfeasibleRebalance
    from .parsers import ParseIOError

    parser = build_parser()
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args = _apply_config(parser, argv)
        summary = args.func(args)
    except SystemExit as exc:
        return int(exc.code) if isinstance(exc.code, int) else EXIT_USAGE
    except (MissingInput, ParseIOError, FileNotFoundError) as exc:
        _fail("missing_input", exc)
        return EXIT_MISSING
    except (StageSchemaError, SchemaError) as exc:
        _fail("schema_mismatch", exc)
        return EXIT_SCHEMA
    except InfeasibleRebalance as exc:
        _fail("infeasible_rebalance", exc, min_achievable=exc.min_achievable, max_achievable=exc.max_achievable)
        return EXIT_INFEASIBLE
    except (ValueError, OSError) as exc:
        _fail("error", exc)
        return EXIT_ERROR
    print(json.dumps(summary, sort_keys=True, default=str))
    return EXIT_OK


def _fail(kind: str, exc: BaseException, **extra) -> None:
    print(json.dumps({"error": kind, "message": str(exc), **extra}, sort_keys=True), file=sys.stderr)


if __name__ == "__main__":
    sys.exit(main())
