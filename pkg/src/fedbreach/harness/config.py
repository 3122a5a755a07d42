"""Experiment specification files (INI syntax, read with :mod:`configparser`)."""

from __future__ import annotations

import configparser
import itertools
from dataclasses import dataclass, field, replace
from pathlib import Path

from ..fedsim import DefenseConfig, ProtocolConfig
from ..malice import MaliciousConfig
from ..model import ModelConfig

CALIBRATION_SOURCES = ("random", "corpus")
DATA_SOURCES = ("corpus", "random")


def _opt(sec, key, conv, default=None):
    raw = sec.get(key, fallback="").strip()
    return default if raw == "" else conv(raw)


def _list(sec, key, conv, default):
    """Comma-separated values; an absent key gives ``default``, a blank one an empty list."""
    if key not in sec:
        return list(default)
    raw = sec[key].strip()
    return [conv(x.strip()) for x in raw.split(",") if x.strip()]


def _bool(raw: str) -> bool:
    low = raw.lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {raw!r}")


@dataclass(frozen=True)
class Cell:
    seed: int
    batch_size: int
    seq_len: int
    users: int
    noise_scale: float

    def key(self) -> str:
        return f"seed={self.seed} B={self.batch_size} S={self.seq_len} users={self.users} noise={self.noise_scale:g}"


@dataclass
class ExperimentSpec:
    model: ModelConfig
    malice: MaliciousConfig
    protocol: ProtocolConfig
    corpus_paths: list = field(default_factory=list)
    data_source: str = "corpus"
    batch_sizes: list = field(default_factory=lambda: [1])
    seq_lens: list = field(default_factory=lambda: [32])
    users: list = field(default_factory=lambda: [1])
    noise_scales: list | None = None
    seeds: list = field(default_factory=lambda: [0])
    rounds: int = 10
    init_seed: int = 1
    calibration: str = "random"
    calibration_batches: int = 100
    calibration_seq_len: int = 32
    mask_rate: float = 0.15
    denoise_sparsity: int | None = None
    resolve_collisions: bool = True
    bow_cutoff: float = 1.5
    output_path: Path = Path("runs/experiment")
    save_artifacts: bool = False
    name: str = "experiment"

    def __post_init__(self):
        for axis in ("batch_sizes", "seq_lens", "users", "seeds"):
            if not getattr(self, axis):
                raise ValueError(f"sweep axis {axis} is empty")
        if self.noise_scales is not None and not self.noise_scales:
            raise ValueError("sweep axis noise_scales is empty")
        if self.data_source not in DATA_SOURCES:
            raise ValueError(f"data source must be one of {DATA_SOURCES}")
        if self.calibration not in CALIBRATION_SOURCES:
            raise ValueError(f"calibration must be one of {CALIBRATION_SOURCES}")
        needs_corpus = self.data_source == "corpus" or self.calibration == "corpus"
        if needs_corpus and not self.corpus_paths:
            raise ValueError("corpus paths are required for corpus data or corpus calibration")
        for p in self.corpus_paths:
            if not Path(p).exists():
                raise ValueError(f"corpus path does not exist: {p}")
        if self.rounds < 1:
            raise ValueError("rounds must be >= 1")
        if max(self.seq_lens) > self.model.max_positions:
            raise ValueError("a swept seq_len exceeds model max_positions")

    def cells(self) -> list[Cell]:
        noise = self.noise_scales if self.noise_scales is not None else [self.protocol.defense.noise_scale]
        return [Cell(*c) for c in itertools.product(self.seeds, self.batch_sizes, self.seq_lens, self.users, noise)]

    def protocol_for(self, cell: Cell) -> ProtocolConfig:
        defense = replace(self.protocol.defense, noise_scale=cell.noise_scale)
        return replace(self.protocol, users_per_round=cell.users, batch_size=cell.batch_size,
                       seq_len=cell.seq_len, defense=defense)


def load_spec(path, output_override=None) -> ExperimentSpec:
    """Parse a spec file. Relative paths resolve against the spec file's directory."""
    path = Path(path)
    if not path.is_file():
        raise ValueError(f"spec file not found: {path}")
    cp = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
    try:
        cp.read(path, encoding="utf-8")
    except configparser.Error as exc:
        raise ValueError(f"malformed spec file {path}: {exc}") from exc
    base = path.parent
    for sec in ("model", "malice", "protocol", "data", "sweep", "attack", "output"):
        if not cp.has_section(sec):
            cp.add_section(sec)
    m, mal, pro, dat, sw, att, out = (cp[s] for s in ("model", "malice", "protocol", "data", "sweep",
                                                      "attack", "output"))
    model = ModelConfig(
        vocab_size=m.getint("vocab_size", 500),
        d_model=m.getint("d_model", 64),
        n_layers=m.getint("n_layers", 3),
        n_heads=m.getint("n_heads", 1),
        ffn_width=m.getint("ffn_width", 256),
        max_positions=m.getint("max_positions", 256),
        activation=m.get("activation", "relu"),
        task=m.get("task", "causal"),
        tied_embedding=_bool(m.get("tied_embedding", "false")),
        decoder_bias=_bool(m.get("decoder_bias", "true")),
        dropout_rate=m.getfloat("dropout_rate", 0.0),
    )
    malice = MaliciousConfig(
        measurement_seed=mal.getint("measurement_seed", 0),
        d_prime=_opt(mal, "d_prime", int),
        gamma=mal.getfloat("gamma", 1e8),
        epsilon=mal.getfloat("epsilon", 1e-6),
        gelu_boost=mal.getfloat("gelu_boost", 100.0),
        mlm_last_attention_weight=mal.getfloat("mlm_last_attention_weight", 10.0),
        inspection_noise_std=mal.getfloat("inspection_noise_std", 0.0),
    )
    defense = DefenseConfig(
        clip_norm=_opt(pro, "clip_norm", float),
        noise_scale=pro.getfloat("noise_scale", 0.0),
        noise_dist=pro.get("noise_dist", "laplace"),
    )
    protocol = ProtocolConfig(defense=defense, dropout_enabled=_bool(pro.get("dropout_enabled", "false")))
    corpus = [str((base / p).resolve()) for p in _list(dat, "corpus", str, [])]
    out_path = Path(output_override) if output_override else base / out.get("path", "runs/experiment")
    return ExperimentSpec(
        model=model,
        malice=malice,
        protocol=protocol,
        corpus_paths=corpus,
        data_source=dat.get("source", "corpus"),
        batch_sizes=_list(sw, "batch_sizes", int, [1]),
        seq_lens=_list(sw, "seq_lens", int, [32]),
        users=_list(sw, "users", int, [1]),
        noise_scales=_list(sw, "noise_scales", float, []) or None,
        seeds=_list(sw, "seeds", int, [0]),
        rounds=sw.getint("rounds", 10),
        init_seed=m.getint("init_seed", 1),
        calibration=mal.get("calibration", "random"),
        calibration_batches=mal.getint("calibration_batches", 100),
        calibration_seq_len=mal.getint("calibration_seq_len", 32),
        mask_rate=pro.getfloat("mask_rate", 0.15),
        denoise_sparsity=_opt(att, "denoise_sparsity", int),
        resolve_collisions=_bool(att.get("resolve_collisions", "true")),
        bow_cutoff=att.getfloat("bow_cutoff", 1.5),
        output_path=out_path,
        save_artifacts=_bool(out.get("save_artifacts", "false")),
        name=out.get("name", path.stem),
    )
