"""Sweep execution: build, craft, simulate, attack, score; one record per cell."""

from __future__ import annotations

import json
import logging
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .. import corpus as corpus_mod
from ..fedsim import simulate_round
from ..malice import MaliciousConfig, craft_front_end, craft_malicious_params, measurement_vector
from ..model import ModelParams, init_model
from ..numkernel import Rng
from ..recovery import run_attack
from ..special import NUM_RESERVED, RESERVED_TOKENS
from . import metrics
from .config import Cell, ExperimentSpec

log = logging.getLogger(__name__)

RECORDS_FILE = "records.jsonl"
TIMINGS_FILE = "timings.jsonl"
TABLE_FILE = "table.txt"

# stream keys for Rng.spawn; fixed so reruns line up
_CAL_KEY, _DATA_KEY, _ROUND_KEY, _MASK_KEY = 11, 13, 17, 19


@dataclass
class MetricsRow:
    setting: dict
    total_accuracy: float
    token_accuracy: float
    bleu: float
    rouge_l: float
    most_vulnerable_accuracy: float
    certified_fraction: float
    certified_precision: float | None
    rounds: int
    runtime_seconds: float = 0.0
    per_round: dict = field(default_factory=dict)

    def record(self) -> dict:
        """Everything except wall-clock time, so records are reproducible byte for byte."""
        out = asdict(self)
        out.pop("runtime_seconds")
        out["status"] = "ok"
        return out


@dataclass
class Environment:
    """Per-seed artifacts shared by every cell: vocabulary, users and crafted parameters."""

    vocab: corpus_mod.Vocabulary
    shards: list
    crafted: ModelParams
    malice: MaliciousConfig


def _synthetic_vocab(size: int) -> corpus_mod.Vocabulary:
    return corpus_mod.Vocabulary(list(RESERVED_TOKENS) + [f"w{i}" for i in range(size - NUM_RESERVED)])


def build_environment(spec: ExperimentSpec, seed: int) -> Environment:
    cfg = spec.model
    if spec.corpus_paths:
        docs = corpus_mod.read_documents(spec.corpus_paths)
        vocab = corpus_mod.build_vocab([t for _, t in docs], cfg.vocab_size - NUM_RESERVED)
        if len(vocab) != cfg.vocab_size:
            raise ValueError(f"corpus yields only {len(vocab)} vocabulary entries, model expects {cfg.vocab_size}")
        shards = corpus_mod.make_shards(docs, vocab)
    else:
        vocab, shards = _synthetic_vocab(cfg.vocab_size), []

    root = Rng(seed)
    params = init_model(cfg, Rng(spec.init_seed))
    mal = replace(spec.malice, measurement_seed=spec.malice.measurement_seed + seed)
    front = craft_front_end(params, mal)
    m = measurement_vector(mal, cfg)
    cal_rng = root.spawn(_CAL_KEY)
    S = spec.calibration_seq_len
    if spec.calibration == "random":
        cal = corpus_mod.random_token_batches(cfg.vocab_size, spec.calibration_batches, 1, S, cal_rng)
    else:
        # held-out text: users from the end of the shard list
        cal = corpus_mod.make_user_batches(shards[::-1], 1, S, spec.calibration_batches)
    masks = None
    if cfg.task == "masked":
        masks = [corpus_mod.mask_positions(b.shape, spec.mask_rate, cal_rng.spawn(i)) for i, b in enumerate(cal)]
    stats = corpus_mod.estimate_measurement_stats(m, front, cal, masks)
    mal = replace(mal, stats=stats)
    return Environment(vocab, shards, craft_malicious_params(params, mal), mal)


def _round_batches(spec, env, cell: Cell, rng: Rng):
    need = cell.users * spec.rounds
    if spec.data_source == "random":
        flat = corpus_mod.random_token_batches(spec.model.vocab_size, need, cell.batch_size, cell.seq_len,
                                               rng.spawn(_DATA_KEY))
    else:
        flat = corpus_mod.make_user_batches(env.shards, cell.batch_size, cell.seq_len)
    rounds = len(flat) // cell.users
    if rounds == 0:
        raise ValueError(f"only {len(flat)} qualifying users, a round needs {cell.users}")
    rounds = min(rounds, spec.rounds)
    return [flat[r * cell.users:(r + 1) * cell.users] for r in range(rounds)]


def run_cell(spec: ExperimentSpec, env: Environment, cell: Cell, artifacts: Path | None = None) -> MetricsRow:
    t0 = time.perf_counter()
    protocol = spec.protocol_for(cell)
    rng = Rng(cell.seed)
    scores = {k: [] for k in ("total_accuracy", "token_accuracy", "bleu", "rouge_l", "most_vulnerable")}
    cert_slots = cert_correct = total_slots = 0
    for r, users in enumerate(_round_batches(spec, env, cell, rng)):
        round_rng = rng.spawn(_ROUND_KEY).spawn(r)
        masks = None
        if spec.model.task == "masked":
            mrng = round_rng.spawn(_MASK_KEY)
            masks = [corpus_mod.mask_positions(b.shape, spec.mask_rate, mrng.spawn(i)) for i, b in enumerate(users)]
        update = simulate_round(env.crafted, users, protocol, round_rng, masks)
        truth = np.concatenate(users)
        result = run_attack(update, env.crafted, env.malice, truth.shape[0], cell.seq_len, seed=cell.seed + r,
                            denoise_sparsity=spec.denoise_sparsity, resolve=spec.resolve_collisions,
                            cutoff=spec.bow_cutoff)
        if artifacts is not None and r == 0:
            _save_round(artifacts, cell, update, truth, result, env.vocab)
        order = metrics.resort_order(result.tokens, truth)
        rec, cert = result.tokens[order], result.certified[order]
        hit = rec == truth
        scores["total_accuracy"].append(float(hit.mean()))
        scores["token_accuracy"].append(metrics.token_accuracy(rec, truth))
        scores["bleu"].append(metrics.bleu(rec, truth))
        scores["rouge_l"].append(metrics.rouge_l(rec, truth))
        scores["most_vulnerable"].append(float(hit.mean(1).max()))
        cert_slots += int(cert.sum())
        cert_correct += int((cert & hit).sum())
        total_slots += cert.size
    setting = {
        "seed": cell.seed, "batch_size": cell.batch_size, "seq_len": cell.seq_len, "users": cell.users,
        "model": _model_label(spec), "dataset": spec.data_source, "defense": protocol.defense.label(),
        "dropout": protocol.dropout_enabled and spec.model.dropout_rate > 0,
        "denoise_sparsity": spec.denoise_sparsity,
    }
    return MetricsRow(
        setting=setting,
        total_accuracy=float(np.mean(scores["total_accuracy"])),
        token_accuracy=float(np.mean(scores["token_accuracy"])),
        bleu=float(np.mean(scores["bleu"])),
        rouge_l=float(np.mean(scores["rouge_l"])),
        most_vulnerable_accuracy=float(np.mean(scores["most_vulnerable"])),
        certified_fraction=cert_slots / total_slots,
        certified_precision=(cert_correct / cert_slots) if cert_slots else None,
        rounds=len(scores["total_accuracy"]),
        runtime_seconds=time.perf_counter() - t0,
        per_round={"total_accuracy": scores["total_accuracy"], "most_vulnerable": scores["most_vulnerable"]},
    )


def _model_label(spec) -> str:
    m = spec.model
    tied = "tied" if m.tied_embedding else "untied"
    return f"L{m.n_layers}-d{m.d_model}-k{m.ffn_width}-V{m.vocab_size}-{m.activation}-{m.task}-{tied}"


def _cell_slug(cell: Cell) -> str:
    return f"s{cell.seed}_B{cell.batch_size}_S{cell.seq_len}_U{cell.users}_n{cell.noise_scale:g}"


def _save_round(root: Path, cell, update, truth, result, vocab):
    d = root / _cell_slug(cell)
    d.mkdir(parents=True, exist_ok=True)
    update.save(d / "update")
    np.savetxt(d / "truth.txt", truth, fmt="%d")
    (d / "reconstruction.txt").write_text(result.report(vocab) + "\n", encoding="utf-8")


@dataclass
class RunSummary:
    output_dir: Path
    rows: list
    failures: list

    @property
    def ok(self) -> bool:
        return not self.failures


def run_experiment(spec: ExperimentSpec) -> RunSummary:
    """Run every sweep cell; failures are recorded per cell and the sweep continues."""
    out = Path(spec.output_path)
    out.mkdir(parents=True, exist_ok=True)
    records, timings, rows, failures = [], [], [], []
    envs = {}
    for cell in spec.cells():
        t0 = time.perf_counter()
        try:
            if cell.seed not in envs:
                envs[cell.seed] = build_environment(spec, cell.seed)
                if spec.save_artifacts:
                    env = envs[cell.seed]
                    art = out / "artifacts" / f"seed{cell.seed}"
                    art.mkdir(parents=True, exist_ok=True)
                    env.crafted.save(art / "crafted", env.malice.to_meta())
                    env.vocab.save(art / "vocab.txt")
            art_dir = out / "artifacts" if spec.save_artifacts else None
            row = run_cell(spec, envs[cell.seed], cell, art_dir)
            rows.append(row)
            records.append(row.record())
            timings.append({"cell": cell.key(), "runtime_seconds": row.runtime_seconds})
            log.info("%s: total accuracy %.4f", cell.key(), row.total_accuracy)
        except Exception as exc:  # noqa: BLE001 - a failed cell must not stop the sweep
            log.error("%s failed: %s", cell.key(), exc)
            failures.append((cell, str(exc)))
            records.append({"setting": asdict(cell), "status": "error", "error": f"{type(exc).__name__}: {exc}"})
            timings.append({"cell": cell.key(), "runtime_seconds": time.perf_counter() - t0})
    with open(out / RECORDS_FILE, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
    with open(out / TIMINGS_FILE, "w", encoding="utf-8") as fh:
        for rec in timings:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
    (out / TABLE_FILE).write_text(format_table(records) + "\n", encoding="utf-8")
    return RunSummary(out, rows, failures)


TABLE_COLUMNS = (("seed", "seed"), ("B", "batch_size"), ("S", "seq_len"), ("users", "users"),
                 ("defense", "defense"), ("total", "total_accuracy"), ("token", "token_accuracy"),
                 ("bleu", "bleu"), ("rougeL", "rouge_l"), ("best-seq", "most_vulnerable_accuracy"),
                 ("certified", "certified_fraction"))


def table_rows(records) -> list[list[str]]:
    rows = []
    for rec in records:
        s = rec["setting"]
        row = []
        for _, key in TABLE_COLUMNS:
            if key in s:
                v = s[key]
            elif rec.get("status") != "ok":
                v = "error"
            else:
                v = rec[key]
            row.append(f"{v:.4f}" if isinstance(v, float) else str(v))
        rows.append(row)
    return rows


def format_table(records) -> str:
    header = [h for h, _ in TABLE_COLUMNS]
    rows = table_rows(records)
    widths = [max(len(h), *(len(r[i]) for r in rows)) if rows else len(h) for i, h in enumerate(header)]
    lines = ["  ".join(h.rjust(w) for h, w in zip(header, widths))]
    lines.append("  ".join("-" * w for w in widths))
    lines += ["  ".join(c.rjust(w) for c, w in zip(r, widths)) for r in rows]
    return "\n".join(lines)


def read_records(path) -> list[dict]:
    with open(path, encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]
