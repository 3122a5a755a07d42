"""Shared builders and independent oracles for the test suite."""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from fedbreach.corpus import (Vocabulary, build_vocab, estimate_measurement_stats, make_shards, mask_positions,
                              random_token_batches, read_documents)
from fedbreach.malice import (MaliciousConfig, bin_layout, craft_front_end, craft_malicious_params,
                              measurement_vector)
from fedbreach.model import ModelConfig, ModelParams, forward_features, init_model
from fedbreach.numkernel import Rng
from fedbreach.special import NUM_RESERVED

ROOT = Path(__file__).resolve().parents[1]
CORPUS_DIR = ROOT / "data" / "corpus"


# ---------------------------------------------------------------- oracles

def erf_series(x: float) -> float:
    """Maclaurin series of erf, summed with fsum; accurate for |x| <= 4."""
    terms = []
    n, term = 0, x
    while True:
        t = term / (2 * n + 1)
        terms.append(t)
        if abs(t) < 1e-18 and n > 5:
            break
        n += 1
        term *= -x * x / n
    return 2.0 / math.sqrt(math.pi) * math.fsum(terms)


def phi_series(x: float) -> float:
    return 0.5 * (1.0 + erf_series(x / math.sqrt(2.0)))


def bisect_quantile(p: float, lo: float = -5.0, hi: float = 5.0) -> float:
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if phi_series(mid) < p:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def naive_matmul(a, b):
    a, b = np.asarray(a, float), np.asarray(b, float)
    out = np.zeros((a.shape[0], b.shape[1]))
    for i in range(a.shape[0]):
        for j in range(b.shape[1]):
            s = 0.0
            for k in range(a.shape[1]):
                s += a[i, k] * b[k, j]
            out[i, j] = s
    return out


def fd_relative_errors(p: ModelParams, loss_fn, grads: dict, h: float = 1e-5) -> dict:
    """Per-tensor ||analytic - central difference|| / max of the two norms."""
    errs = {}
    for name, arr in p.tensors.items():
        fd = np.zeros_like(arr)
        flat, fflat = arr.reshape(-1), fd.reshape(-1)
        for i in range(flat.size):
            old = flat[i]
            flat[i] = old + h
            up = loss_fn(p)
            flat[i] = old - h
            down = loss_fn(p)
            flat[i] = old
            fflat[i] = (up - down) / (2 * h)
        g = grads[name]
        scale = max(np.linalg.norm(g), np.linalg.norm(fd))
        errs[name] = 0.0 if scale < 1e-9 else float(np.linalg.norm(g - fd) / scale)
    return errs


def variant_params(activation, task, tied, seed=0):
    cfg = ModelConfig(vocab_size=32, d_model=8, n_layers=2, n_heads=2, ffn_width=16, max_positions=8,
                      activation=activation, task=task, tied_embedding=tied)
    p = init_model(cfg, Rng(seed))
    # O(1) weights exercise every nonlinearity instead of the near-linear regime of the 0.02 init
    for k in p.tensors:
        if ".ln" not in k and not k.startswith("lnf"):
            p.tensors[k] = p.tensors[k] * 20
    return p


# ---------------------------------------------------------------- desk builds

@dataclass
class Desk:
    vocab: Vocabulary
    shards: list
    params: ModelParams
    crafted: ModelParams
    malice: MaliciousConfig

    @property
    def config(self) -> ModelConfig:
        return self.crafted.config


def craft(params: ModelParams, cal_seed: int = 2, cal_batches: int = 100, cal_len: int = 32,
          **malice_kw) -> tuple[ModelParams, MaliciousConfig]:
    cfg = params.config
    mal = MaliciousConfig(**malice_kw)
    front = craft_front_end(params, mal)
    cal_len = min(cal_len, cfg.max_positions)
    cal = random_token_batches(cfg.vocab_size, cal_batches, 1, cal_len, Rng(cal_seed))
    masks = None
    if cfg.task == "masked":
        masks = [mask_positions(b.shape, 0.15, Rng(cal_seed).spawn(i)) for i, b in enumerate(cal)]
    stats = estimate_measurement_stats(measurement_vector(mal, cfg), front, cal, masks)
    mal = MaliciousConfig(stats=stats, **malice_kw)
    return craft_malicious_params(params, mal), mal.resolved(cfg)


def make_desk(vocab_size: int = 500, init_seed: int = 1, **model_kw) -> Desk:
    docs = read_documents(CORPUS_DIR)
    vocab = build_vocab([t for _, t in docs], vocab_size - NUM_RESERVED)
    shards = make_shards(docs, vocab)
    kw = dict(d_model=64, n_layers=3, n_heads=1, ffn_width=256, max_positions=256)
    kw.update(model_kw)
    cfg = ModelConfig(vocab_size=len(vocab), **kw)
    params = init_model(cfg, Rng(init_seed))
    crafted, mal = craft(params)
    return Desk(vocab, shards, params, crafted, mal)


def tiny_config(**kw) -> ModelConfig:
    base = dict(vocab_size=32, d_model=8, n_layers=2, n_heads=2, ffn_width=12, max_positions=8)
    base.update(kw)
    return ModelConfig(**base)


# ---------------------------------------------------------------- ground truth of the readout

def true_bins(crafted: ModelParams, mal: MaliciousConfig, batch) -> dict:
    """Global bin -> list of (sequence, position, block-local FFN input) for every token.

    A token's measurement falls in one global bin; the bin is read in the block
    that owns it, so the FFN input of that block is the ground truth.
    """
    layout = bin_layout(mal, crafted.config)
    feats = forward_features(crafted, batch)
    m = crafted["blocks.0.ffn.w1"][0]
    k = layout.width
    out: dict = {}
    B, S = np.asarray(batch).shape
    for n in range(B):
        for pos in range(S):
            # the measurement drifts slightly across blocks, so locate it with each block's input
            for blk in range(layout.n_blocks):
                u = feats["ffn_inputs"][blk][n, pos]
                l = layout.locate(float(m @ u))
                if l // k == blk and l >= 0:
                    out.setdefault(l, []).append((n, pos, u))
                    break
    return out


def readable_singletons(crafted, mal, batch) -> dict:
    """Bins holding exactly one token whose row has a lower neighbour in the same block."""
    k = crafted.config.ffn_width
    return {l: v[0] for l, v in true_bins(crafted, mal, batch).items() if len(v) == 1 and l % k != k - 1}


# ---------------------------------------------------------------- acceptance log

ACCEPTANCE_LINES: list[str] = []


def record_acceptance(number: int, passed: bool, detail: str) -> None:
    """One PASS/FAIL line per criterion, printed again in the terminal summary."""
    line = f"criterion {number:>2}: {'PASS' if passed else 'FAIL'}  {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
