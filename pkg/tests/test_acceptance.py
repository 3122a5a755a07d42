"""Acceptance suite: one test per criterion, each logging a PASS/FAIL line.

The experiment-driven criteria run the shipped configs under ``configs/``;
the runs of criteria 4 and 5 are shared with criterion 7.
"""

import itertools
import time
from collections import defaultdict
from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest

from fedbreach.corpus import make_user_batches
from fedbreach.harness.config import load_spec
from fedbreach.harness.runner import RECORDS_FILE, run_experiment
from fedbreach.malice import bin_layout
from fedbreach.model import forward_loss, gradient
from fedbreach.numkernel import Rng
from fedbreach.recovery import extract_breached_embeddings, recover_bow_decoder_bias, recover_bow_tied_embedding
from fedbreach.solvers import constrained_kmeans, linear_sum_assignment
from fedbreach.solvers.lsa import KERNELS
from fedbreach.special import EOS_ID, NUM_RESERVED

from helpers import fd_relative_errors, make_desk, readable_singletons, record_acceptance, variant_params

CONFIGS = Path(__file__).resolve().parents[1] / "configs"


def run(name, out, **changes):
    spec = replace(load_spec(CONFIGS / f"{name}.ini", output_override=out), **changes)
    t0 = time.perf_counter()
    summary = run_experiment(spec)
    assert summary.ok, summary.failures
    return summary, time.perf_counter() - t0


def mean_accuracy(summary):
    return float(np.mean([r.total_accuracy for r in summary.rows]))


@pytest.fixture(scope="module")
def single_sequence(tmp_path_factory):
    return run("single_sequence", tmp_path_factory.mktemp("single"))


@pytest.fixture(scope="module")
def user_sweep(tmp_path_factory):
    return run("user_sweep", tmp_path_factory.mktemp("users"))


@pytest.fixture(scope="module")
def dropout_on(tmp_path_factory):
    return run("dropout", tmp_path_factory.mktemp("dropout"))


def test_gradient_correctness():
    t0 = time.perf_counter()
    worst = {}
    for act, task, tied in itertools.product(("relu", "gelu"), ("causal", "masked"), (True, False)):
        p = variant_params(act, task, tied)
        rng = np.random.default_rng(0)
        batch = rng.integers(NUM_RESERVED, p.config.vocab_size, size=(2, 5))
        mask = None
        if task == "masked":
            mask = rng.uniform(size=batch.shape) < 0.4
            mask[:, 0] = True
        errs = fd_relative_errors(p, lambda q: forward_loss(q, batch, mask), gradient(p, batch, mask).tensors)
        worst[(act, task, tied)] = max(errs.values())
    elapsed = time.perf_counter() - t0
    top = max(worst.values())
    passed = top <= 1e-4 and elapsed < 30
    record_acceptance(1, passed, f"max rel err {top:.2e} over {len(worst)} variants, {elapsed:.1f}s")
    assert passed, worst


def test_divided_difference_oracle(desk):
    t0 = time.perf_counter()
    layout = bin_layout(desk.malice, desk.config)
    errs = []
    seed = 0
    while len(errs) < 1000:
        rng = np.random.default_rng(seed)
        batch = rng.integers(NUM_RESERVED, desk.config.vocab_size, size=(int(rng.integers(1, 4)), 32))
        out = {e.bin: e for e in extract_breached_embeddings(gradient(desk.crafted, batch), desk.crafted, layout)}
        for l, (_, _, u) in readable_singletons(desk.crafted, desk.malice, batch).items():
            errs.append(np.linalg.norm(out[l].vector - u) / np.linalg.norm(u))
        seed += 1
    elapsed = time.perf_counter() - t0
    top = max(errs[:1000])
    passed = top <= 1e-6 and elapsed < 60
    record_acceptance(2, passed, f"max rel err {top:.2e} over 1000 bins from {seed} batches, {elapsed:.1f}s")
    assert passed


def brute_force_min(cost):
    n, m = cost.shape
    if n <= m:
        return min(cost[np.arange(n), list(p)].sum() for p in itertools.permutations(range(m), n))
    return brute_force_min(cost.T)


def test_solver_oracles():
    rng = np.random.default_rng(0)
    lsa_bad = 0
    shapes = [(1 + i % 7,) * 2 for i in range(100)] + [(4, 7)] * 100
    for backend in sorted(KERNELS):
        for shape in shapes:
            cost = rng.normal(size=shape)
            asg = linear_sum_assignment(cost, backend=backend)
            got = cost[asg.rows, asg.cols].sum()
            lsa_bad += abs(got - brute_force_min(cost)) > 1e-9 or len(asg.rows) != min(shape)
    km_bad = 0
    for seed in range(50):
        r = np.random.default_rng(seed)
        pts = np.vstack([r.normal(size=(20, 3)), r.normal(size=(20, 3)) + 12.0])
        truth = np.repeat([0, 1], 20)
        for cap in (20, 30):
            res = constrained_kmeans(pts, 2, cap, Rng(seed))
            sizes = np.bincount(res.labels, minlength=2)
            pure = len(set(zip(res.labels.tolist(), truth.tolist()))) == 2
            km_bad += sizes.max() > cap or not pure
    passed = lsa_bad == 0 and km_bad == 0
    record_acceptance(3, passed, f"LSA mismatches {lsa_bad} ({', '.join(sorted(KERNELS))}), "
                                 f"k-means failures {km_bad} over 50 seeds")
    assert passed


def test_single_sequence(single_sequence):
    summary, elapsed = single_sequence
    acc = {r.setting["seq_len"]: r.total_accuracy for r in summary.rows}
    users = {r.rounds for r in summary.rows}
    passed = (all(acc[s] >= 0.95 for s in (16, 32, 64)) and acc[256] >= 0.80 and elapsed < 300
              and users == {100})
    detail = ", ".join(f"S={s} {a:.4f}" for s, a in sorted(acc.items()))
    record_acceptance(4, passed, f"{detail}; {elapsed:.0f}s")
    assert passed


def test_user_sweep(user_sweep):
    summary, _ = user_sweep
    rows = sorted(summary.rows, key=lambda r: r.setting["users"])
    acc = [r.total_accuracy for r in rows]
    monotone = all(b <= a + 0.03 for a, b in zip(acc, acc[1:]))
    vulnerable = all(r.most_vulnerable_accuracy >= r.total_accuracy for r in rows)
    passed = monotone and vulnerable
    detail = ", ".join(f"U={r.setting['users']} {r.total_accuracy:.3f}/{r.most_vulnerable_accuracy:.3f}"
                       for r in rows)
    record_acceptance(5, passed, f"mean/most vulnerable: {detail}")
    assert passed


@pytest.fixture(scope="module")
def tied_desk():
    return make_desk(500, tied_embedding=True)


def test_bag_of_words(desk, tied_desk):
    def recall(d, readout):
        hit = total = 0
        for B in (1, 4, 8):
            for batch in make_user_batches(d.shards, B, 32, 20):
                truth = set(batch.ravel().tolist())
                got = set(readout(gradient(d.crafted, batch), B).tolist())
                hit += len(truth & got)
                total += len(truth)
        return hit / total

    bias = recall(desk, lambda g, B: recover_bow_decoder_bias(g, 32, B))
    tied = recall(tied_desk, lambda g, B: recover_bow_tied_embedding(g, 32, B, cutoff=1.5, exclude=[EOS_ID]))
    passed = bias == 1.0 and tied >= 0.90
    record_acceptance(6, passed, f"decoder-bias recall {bias:.4f}, tied recall {tied:.4f}")
    assert passed


def test_certification_soundness(single_sequence, user_sweep):
    rows = single_sequence[0].rows + user_sweep[0].rows
    precisions = [r.certified_precision for r in rows if r.certified_precision is not None]
    certified = sum(r.certified_fraction for r in rows) / len(rows)
    passed = all(p == 1.0 for p in precisions) and bool(precisions)
    record_acceptance(7, passed, f"min precision {min(precisions, default=float('nan')):.4f} over "
                                 f"{len(precisions)} cells, mean certified fraction {certified:.3f}")
    assert passed


def test_dropout(dropout_on, tmp_path_factory):
    on = mean_accuracy(dropout_on[0])
    spec = load_spec(CONFIGS / "dropout.ini")
    off = mean_accuracy(run("dropout", tmp_path_factory.mktemp("nodrop"),
                            protocol=replace(spec.protocol, dropout_enabled=False))[0])
    passed = off - on >= 0.05 and on >= 0.5
    record_acceptance(8, passed, f"without dropout {off:.4f}, with dropout {on:.4f}")
    assert passed


def test_defense_curve(tmp_path_factory):
    def by_noise(summary):
        acc = defaultdict(list)
        for r in summary.rows:
            acc[float(r.setting["defense"].rsplit("=", 1)[1])].append(r.total_accuracy)
        return {k: float(np.mean(v)) for k, v in sorted(acc.items())}

    raw_summary, _ = run("defense_curve", tmp_path_factory.mktemp("raw"))
    raw = by_noise(raw_summary)
    omp = by_noise(run("defense_curve", tmp_path_factory.mktemp("omp"), denoise_sparsity=32)[0])
    seeds = len({r.setting["seed"] for r in raw_summary.rows})
    levels = list(raw)
    monotone = all(raw[b] <= raw[a] for a, b in zip(levels, levels[1:]))
    middle = levels[1:-1]
    passed = monotone and all(omp[s] > raw[s] for s in middle) and seeds >= 20
    detail = ", ".join(f"{s:g}: {raw[s]:.3f}/{omp[s]:.3f}" for s in levels)
    record_acceptance(9, passed, f"raw/OMP by noise over {seeds} seeds: {detail}")
    assert passed


def test_random_tokens(tmp_path_factory):
    rand = mean_accuracy(run("random_tokens", tmp_path_factory.mktemp("rand"))[0])
    corpus = mean_accuracy(run("random_tokens", tmp_path_factory.mktemp("corp"), data_source="corpus")[0])
    passed = rand >= corpus
    record_acceptance(10, passed, f"random {rand:.4f} vs corpus {corpus:.4f} at B=4, S=32")
    assert passed


def test_determinism(dropout_on, tmp_path_factory):
    first = dropout_on[0].output_dir / RECORDS_FILE
    again = run("dropout", tmp_path_factory.mktemp("again"))[0].output_dir / RECORDS_FILE
    passed = first.read_bytes() == again.read_bytes()
    record_acceptance(11, passed, f"dropout.ini rerun byte-identical: {passed}")
    assert passed
