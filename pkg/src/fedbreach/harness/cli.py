"""Command line: ``fedbreach run | attack | inspect | report``.

Exit codes: 0 success, 1 some sweep cell failed, 2 bad arguments or input files.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from ..corpus import Vocabulary
from ..malice import MaliciousConfig, bin_layout, diagnostics
from ..model import GradientUpdate, ModelParams
from ..recovery import run_attack
from . import metrics
from .config import load_spec
from .runner import RECORDS_FILE, TABLE_COLUMNS, format_table, read_records, run_experiment, table_rows

OUTPUT_ENV = "FEDBREACH_OUTPUT_DIR"
EXIT_OK, EXIT_CELL_FAILED, EXIT_USAGE = 0, 1, 2


def _cmd_run(args) -> int:
    override = args.output or os.environ.get(OUTPUT_ENV)
    spec = load_spec(args.spec, output_override=override)
    summary = run_experiment(spec)
    print(format_table(read_records(summary.output_dir / RECORDS_FILE)))
    print(f"\nrecords: {summary.output_dir / RECORDS_FILE}")
    for cell, err in summary.failures:
        print(f"FAILED {cell.key()}: {err}", file=sys.stderr)
    return EXIT_OK if summary.ok else EXIT_CELL_FAILED


def _load_crafted(path):
    params, meta = ModelParams.load(path)
    if "malice.gamma" not in meta:
        raise ValueError(f"{path} carries no malicious configuration; was it saved by a run?")
    return params, MaliciousConfig.from_meta(meta)


def _cmd_attack(args) -> int:
    crafted, mal = _load_crafted(args.params)
    update = GradientUpdate.load(args.update)
    result = run_attack(update, crafted, mal, args.seqs, args.seq_len, seed=args.seed,
                        denoise_sparsity=args.denoise)
    vocab = Vocabulary.load(args.vocab) if args.vocab else None
    print(result.report(vocab))
    record = result.as_record()
    if args.truth:
        truth = np.atleast_2d(np.loadtxt(args.truth, dtype=np.int64))
        acc, _ = metrics.total_accuracy(result.tokens, truth)
        record["total_accuracy"] = acc
        record["token_accuracy"] = metrics.token_accuracy(result.tokens, truth)
        print(f"total accuracy {acc:.4f}")
    if args.out:
        Path(args.out).write_text(json.dumps(record, sort_keys=True) + "\n", encoding="utf-8")
    return EXIT_OK


def _cmd_inspect(args) -> int:
    crafted, mal = _load_crafted(args.params)
    diag = diagnostics(crafted, mal)
    for k, v in diag.items():
        print(f"{k}: {v}")
    if args.boundaries:
        layout = bin_layout(mal, crafted.config)
        for l, c in enumerate(layout.boundaries):
            print(f"bin {l} block {l // layout.width} row {l % layout.width} bias {float(c)!r}")
    return EXIT_OK


def _cmd_report(args) -> int:
    records = read_records(args.records)
    header = [h for h, _ in TABLE_COLUMNS]
    rows = table_rows(records)
    if args.csv:
        with open(args.csv, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(header)
            w.writerows(rows)
        print(f"wrote {len(rows)} rows to {args.csv}")
    else:
        w = csv.writer(sys.stdout)
        w.writerow(header)
        w.writerows(rows)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="fedbreach", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="run every cell of an experiment spec")
    r.add_argument("spec")
    r.add_argument("--output", help=f"output directory (overrides the spec and ${OUTPUT_ENV})")
    r.set_defaults(func=_cmd_run)

    a = sub.add_parser("attack", help="reconstruct text from a saved update and crafted parameters")
    a.add_argument("--update", required=True)
    a.add_argument("--params", required=True)
    a.add_argument("--seqs", type=int, required=True, help="number of sequences N in the update")
    a.add_argument("--seq-len", type=int, required=True)
    a.add_argument("--vocab")
    a.add_argument("--truth", help="whitespace-separated token ids, one sequence per line")
    a.add_argument("--denoise", type=int, help="OMP sparsity for noisy updates")
    a.add_argument("--seed", type=int, default=0)
    a.add_argument("--out", help="write the machine-readable record here")
    a.set_defaults(func=_cmd_attack)

    i = sub.add_parser("inspect", help="print diagnostics of crafted parameters")
    i.add_argument("--params", required=True)
    i.add_argument("--boundaries", action="store_true", help="also list every bin boundary")
    i.set_defaults(func=_cmd_inspect)

    rp = sub.add_parser("report", help="turn a records file into CSV")
    rp.add_argument("records")
    rp.add_argument("--csv")
    rp.set_defaults(func=_cmd_report)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ValueError, FileNotFoundError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
