"""Command line surface: extract corpora, decode scripts, benchmark, simulate.

Exit codes: 0 success, 1 input error, 2 internal invariant violation.
All randomness flows from --seed, so identical inputs and seeds give
byte-identical outputs.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .engine import apar_decode, ar_decode
from .errors import CapacityError, ProtocolError, ScriptMismatch, SimulationError, TreeError
from .extract import (
    Conversation,
    assemble_with_ratio,
    corpus_stats,
    extract_conversation,
)
from .metrics import (
    flatten_max_cached,
    flatten_mean_attended,
    group_metrics,
    mean_attended_tokens,
    max_cached_tokens,
    saved_ratio,
    thread_stats,
    write_report_csv,
    write_report_json,
)
from .script import ReplayModel, as_linear, script_from_json
from .sim import config_from_json, default_config, run_simulation


class CliInputError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message: str) -> None:  # type: ignore[override]
        self.print_usage(sys.stderr)
        raise CliInputError(message)


def _build_parser() -> _Parser:
    parser = _Parser(prog="apar", description=__doc__)
    parser.add_argument("--seed", type=int, default=0, help="seed for all randomness")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("extract", help="turn conversations into training samples")
    p.add_argument("--input", required=True, help="conversations JSONL")
    p.add_argument("--output", required=True, help="training sample JSONL")
    p.add_argument("--stats", help="classification stats JSON")
    p.add_argument(
        "--ratio",
        default="none",
        help="structured:unstructured assembly ratio, e.g. 1:1; 'none' keeps all",
    )
    p.add_argument("--jobs", type=int, default=1, help="worker processes")

    p = sub.add_parser("decode", help="decode a script and print the restored text")
    p.add_argument("--script", required=True, help="script JSON file")
    p.add_argument("--mode", choices=("apar", "ar"), default="apar")
    p.add_argument("--trace", help="write the step trace as JSONL")
    p.add_argument("--block-size", type=int, default=16)

    p = sub.add_parser("bench", help="compare forked decoding against the flatten baseline")
    p.add_argument("--scripts", required=True, help="directory of script JSON files")
    p.add_argument("--report", required=True, help="output report path")
    p.add_argument("--format", choices=("csv", "json"), default="csv")
    p.add_argument(
        "--exclude-category",
        action="append",
        default=[],
        help="drop scripts whose category matches (repeatable)",
    )
    p.add_argument("--block-size", type=int, default=16)
    p.add_argument("--jobs", type=int, default=1, help="worker processes")

    p = sub.add_parser("simulate", help="run the serving simulator")
    p.add_argument("--config", help="simulation config JSON (omit for the default)")
    p.add_argument("--report", required=True, help="output report JSON")
    p.add_argument("--csv", help="also write the sample time series as CSV")

    p = sub.add_parser("report", help="merge bench outputs into one table")
    p.add_argument("--inputs", nargs="*", default=[], help="bench JSON reports")
    p.add_argument("--format", choices=("csv", "json"), default="csv")
    p.add_argument("--output", required=True)
    return parser


def _read_conversations(path: str) -> list[Conversation]:
    conversations = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                payload = json.loads(line)
                conversations.append(Conversation.from_dict(payload))
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise CliInputError(f"{path}:{lineno}: malformed conversation: {exc}")
    return conversations


def _parse_ratio(text: str) -> tuple[int, int] | None:
    if text.lower() in ("none", ""):
        return None
    try:
        a, b = text.split(":")
        return int(a), int(b)
    except ValueError:
        raise CliInputError(f"bad ratio {text!r}; expected like 1:1")


def cmd_extract(args: argparse.Namespace) -> int:
    conversations = _read_conversations(args.input)
    if args.jobs > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(max_workers=args.jobs) as pool:
            per_conv = list(pool.map(extract_conversation, conversations))
    else:
        per_conv = [extract_conversation(conv) for conv in conversations]
    labeled = []
    turns = []
    for conv, extracted in zip(conversations, per_conv):
        for turn_index, sample in extracted:
            labeled.append((conv.id, sample))
            turns.append(turn_index)
    stats = corpus_stats(labeled)
    ratio = _parse_ratio(args.ratio)
    chosen = list(zip(labeled, turns))
    if ratio is not None:
        kept = assemble_with_ratio(labeled, ratio, seed=args.seed)
        kept_ids = {id(entry) for entry in kept}
        chosen = [(entry, turn) for entry, turn in zip(labeled, turns) if id(entry) in kept_ids]
    with open(args.output, "w") as fh:
        for (conv_id, sample), turn_index in chosen:
            fh.write(json.dumps(sample.to_record(conv_id, turn_index)) + "\n")
    if args.stats:
        with open(args.stats, "w") as fh:
            json.dump(stats, fh, indent=2)
            fh.write("\n")
    print(f"wrote {len(chosen)} samples from {len(conversations)} conversations")
    return 0


def _load_script(path: str):
    try:
        return script_from_json(Path(path).read_text())
    except (OSError, json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        raise CliInputError(f"cannot load script {path}: {exc}")


def cmd_decode(args: argparse.Namespace) -> int:
    script = _load_script(args.script)
    if args.mode == "apar":
        result = apar_decode(
            list(script.prompt), ReplayModel(script), block_size=args.block_size
        )
    else:
        result = ar_decode(
            list(script.prompt), as_linear(script), block_size=args.block_size
        )
    print(" ".join(result.output))
    if args.trace:
        Path(args.trace).write_text(result.trace.to_jsonl())
    return 0


def _bench_one(task: tuple[str, int]) -> dict | None:
    path, block_size = task
    script = _load_script(path)
    apar = apar_decode(list(script.prompt), ReplayModel(script), block_size=block_size)
    ar = ar_decode(list(script.prompt), as_linear(script), block_size=block_size)
    seqs = apar.sequences_map()
    apar_cached = max_cached_tokens(apar.trace)
    flat_cached = flatten_max_cached(apar.tree, seqs)
    apar_att = mean_attended_tokens(apar.tree, seqs)
    flat_att = flatten_mean_attended(apar.tree, seqs)
    return {
        "name": Path(path).stem,
        "category": script.category or "",
        "apar_cached": apar_cached,
        "flatten_cached": flat_cached,
        "cached_saved_pct": round(saved_ratio(apar_cached, flat_cached), 1),
        "apar_attended": round(apar_att, 2),
        "flatten_attended": round(flat_att, 2),
        "attended_saved_pct": round(saved_ratio(apar_att, flat_att), 1),
        "apar_steps": apar.trace.steps,
        "ar_steps": ar.trace.steps,
        "step_speedup": round(ar.trace.steps / apar.trace.steps, 3),
        "threads": group_metrics(apar).threads,
    }


def _bench_rows(script_paths, block_size: int, excluded: set[str], jobs: int) -> list[dict]:
    kept = []
    for path in script_paths:
        script = _load_script(str(path))
        if script.category and script.category in excluded:
            continue
        kept.append(str(path))
    tasks = [(path, block_size) for path in kept]
    if jobs > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(max_workers=jobs) as pool:
            return list(pool.map(_bench_one, tasks))
    return [_bench_one(task) for task in tasks]


def cmd_bench(args: argparse.Namespace) -> int:
    script_dir = Path(args.scripts)
    if not script_dir.is_dir():
        raise CliInputError(f"{args.scripts} is not a directory")
    paths = sorted(script_dir.glob("*.json"))
    if not paths:
        raise CliInputError(f"no script JSON files under {args.scripts}")
    rows = _bench_rows(paths, args.block_size, set(args.exclude_category), args.jobs)
    if not rows:
        raise CliInputError("every script was excluded")
    if args.format == "csv":
        write_report_csv(rows, args.report)
    else:
        write_report_json(rows, args.report)
    mean_threads, parallel = thread_stats([row["threads"] for row in rows])
    print(f"benchmarked {len(rows)} scripts: #T={mean_threads:.1f} %P={parallel:.2f}")
    return 0


def cmd_simulate(args: argparse.Namespace) -> int:
    if args.config:
        try:
            config = config_from_json(Path(args.config).read_text(), default_seed=args.seed)
        except (OSError, json.JSONDecodeError, TypeError, ValueError) as exc:
            raise CliInputError(f"cannot load config {args.config}: {exc}")
    else:
        config = default_config()
    report = run_simulation(config)
    Path(args.report).write_text(report.to_json() + "\n")
    if args.csv:
        Path(args.csv).write_text(report.to_csv())
    print(
        f"mode={report.mode} budget={report.cache_budget_fraction}"
        f" throughput={report.summary['throughput']:.1f} tok/s"
        f" completed={report.summary['completed']}"
    )
    return 0


def cmd_report(args: argparse.Namespace) -> int:
    if not args.inputs:
        raise CliInputError("no inputs given")
    rows = []
    for path in args.inputs:
        try:
            rows.extend(json.loads(Path(path).read_text()))
        except (OSError, json.JSONDecodeError) as exc:
            raise CliInputError(f"cannot read {path}: {exc}")
    rows.sort(key=lambda r: str(r.get("name", "")))
    if args.format == "csv":
        write_report_csv(rows, args.output)
    else:
        write_report_json(rows, args.output)
    print(f"merged {len(rows)} rows from {len(args.inputs)} inputs")
    return 0


_COMMANDS = {
    "extract": cmd_extract,
    "decode": cmd_decode,
    "bench": cmd_bench,
    "simulate": cmd_simulate,
    "report": cmd_report,
}


def main(argv: list[str] | None = None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
        return _COMMANDS[args.command](args)
    except CliInputError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (OSError, SimulationError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (ProtocolError, TreeError, CapacityError, ScriptMismatch, AssertionError) as exc:
        print(f"internal error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
