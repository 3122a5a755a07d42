"""The attacker's readout: bag of words, breached embeddings, sequences, positions, tokens.

Everything works on a received :class:`GradientUpdate` plus the crafted
parameters the server shipped. Matching uses Pearson correlation on the
content dims ``d' .. d-2``; the carrier dim and the identity dims are left out
because layer norm mixes them differently per block.
"""

from __future__ import annotations

import itertools
import logging
from collections import Counter
from dataclasses import dataclass, field

import numpy as np

from .malice import BinLayout, MaliciousConfig, bin_layout
from .model import GradientUpdate, ModelParams
from .numkernel import Rng
from .solvers import ClusterLabels, constrained_kmeans, linear_sum_assignment, omp_denoise
from .special import EOS_ID, MASK_ID, PAD_ID

log = logging.getLogger(__name__)

BIAS_DIFF_RTOL = 1e-8
EMBEDDING_SUPPORT_RTOL = 1e-6
COLLISION_FACTOR = 1.5
CERTIFY_TOL = 1e-2
FINGERPRINT_TOL = 1e-3
# cost added to token copies beyond the estimated multiplicity
SURPLUS_PENALTY = 0.1


@dataclass(frozen=True)
class BreachedEmbedding:
    vector: np.ndarray
    block: int
    row: int
    bin: int
    weight: float
    collision_flag: bool = False


@dataclass
class RecoveryResult:
    tokens: np.ndarray
    certified: np.ndarray
    cluster_ids: np.ndarray
    fill_ins: np.ndarray
    breached_count: int
    bag_of_words: np.ndarray
    positions_source: np.ndarray = field(repr=False, default=None)

    @property
    def shape(self):
        return self.tokens.shape

    @property
    def certified_fraction(self) -> float:
        return float(self.certified.mean()) if self.certified.size else 0.0

    def as_record(self) -> dict:
        return {
            "tokens": self.tokens.tolist(),
            "certified": self.certified.astype(int).tolist(),
            "fill_ins": self.fill_ins.tolist(),
            "breached_count": self.breached_count,
        }

    def report(self, vocab=None) -> str:
        """One line per sequence; certified tokens are wrapped in ``[...]``."""
        lines = []
        for n, (row, cert) in enumerate(zip(self.tokens, self.certified)):
            words = [vocab.tokens[t] if vocab is not None else str(t) for t in row]
            marked = [f"[{w}]" if c else w for w, c in zip(words, cert)]
            lines.append(f"seq {n} (fill-ins {self.fill_ins[n]}): " + " ".join(marked))
        return "\n".join(lines)


# ---------------------------------------------------------------- bag of words

def embedding_support(update: GradientUpdate, rtol: float = EMBEDDING_SUPPORT_RTOL) -> np.ndarray:
    """Token ids whose input-embedding gradient row is (relatively) nonzero."""
    norms = np.linalg.norm(update["tok_emb"], axis=1)
    top = norms.max()
    if top == 0:
        return np.zeros(0, dtype=np.int64)
    return np.flatnonzero(norms > rtol * top)


def _greedy_fill(scores, seed, pool, total, pick):
    """Shared greedy frequency estimate: each pick removes one occurrence's worth of signal."""
    scores = np.array(scores, dtype=np.float64)
    chosen = list(seed)
    impact = scores[chosen].sum() / total
    scores[chosen] -= impact
    pool = np.asarray(pool)
    while len(chosen) < total:
        j = int(pool[pick(scores[pool])])
        scores[j] -= impact
        chosen.append(j)
    return np.sort(np.asarray(chosen[:total], dtype=np.int64))


def recover_bow_decoder_bias(update: GradientUpdate, seq_len: int, n_seqs: int) -> np.ndarray:
    """Token multiset of size ``seq_len * n_seqs`` from the decoder-bias gradient.

    The decoder bias sees targets, i.e. the inputs shifted by one: every token
    except each sequence's first, plus one [EOS] per sequence. For untied
    models the input-embedding support is exact, so the non-[EOS] target
    counts are filled greedily over that support (seeded with the negative
    bias entries), and the ``n_seqs`` first-token slots go to support tokens
    that never occur as a target, then to the tokens whose embedding gradient
    loads most on the position-0 gradient. Tied models have no exact support
    and fall back to a plain greedy fill over the negative entries.
    """
    if "dec.b" not in update.tensors:
        raise ValueError("model has no decoder bias")
    total = seq_len * n_seqs
    g_b = update["dec.b"]
    neg = np.flatnonzero(g_b < 0)
    if neg.size == 0:
        raise ValueError("decoder-bias gradient has no negative entries")
    support = embedding_support(update)
    if "dec.w" not in update.tensors or support.size == 0:
        seed = sorted(neg.tolist(), key=lambda v: g_b[v])[:total]
        return _greedy_fill(g_b, seed, np.arange(len(g_b)), total, np.argmin)

    n_targets = total - n_seqs
    present = set(support.tolist())
    seed = sorted((int(v) for v in neg if v in present), key=lambda v: g_b[v])[:n_targets]
    targets = _greedy_fill(g_b, seed, support, n_targets, np.argmin) if n_targets and seed else \
        np.zeros(0, dtype=np.int64)
    firsts = _first_tokens(update, support, set(targets.tolist()), seq_len, n_seqs)
    return np.sort(np.concatenate([targets, firsts]))


def _first_tokens(update, support, target_set, seq_len, n_seqs):
    """``n_seqs`` guesses for the sequences' first tokens."""
    never = [int(v) for v in support if v not in target_set]
    # each embedding row is a sum of per-position input gradients; regress on the positional rows
    coef = update["tok_emb"][support] @ np.linalg.pinv(update["pos_emb"][:seq_len])
    score = coef[:, 0] * n_seqs
    order = np.argsort(-score, kind="stable")
    if len(never) >= n_seqs:
        rank = {int(support[i]): r for r, i in enumerate(order)}
        return np.array(sorted(never, key=rank.get)[:n_seqs], dtype=np.int64)
    chosen = list(never)
    for v in never:
        score[np.searchsorted(support, v)] -= 1.0
    while len(chosen) < n_seqs:
        i = int(np.argmax(score))
        chosen.append(int(support[i]))
        score[i] -= 1.0
    return np.array(chosen, dtype=np.int64)


def recover_bow_tied_embedding(update: GradientUpdate, seq_len: int, n_seqs: int,
                               cutoff: float = 1.5, exclude=()) -> np.ndarray:
    """Token multiset from log row-norms of a tied embedding gradient.

    ``exclude`` lists ids that can only be targets (the causal ``[EOS]``).
    """
    total = seq_len * n_seqs
    norms = np.linalg.norm(update["tok_emb"], axis=1)
    norms[list(exclude)] = 0.0
    live = norms > 0
    if not live.any():
        raise ValueError("embedding gradient is identically zero")
    logs = np.log(norms[live])
    c = logs.mean() + cutoff * logs.std()
    seed = np.flatnonzero(live)[logs > c]
    if seed.size == 0:
        seed = np.array([int(np.argmax(norms))])
    seed = list(seed[np.argsort(-norms[seed], kind="stable")][:total])
    return _greedy_fill(norms, seed, np.asarray(seed), total, np.argmax)


def recover_bag_of_words(update: GradientUpdate, params: ModelParams, seq_len: int, n_seqs: int,
                         cutoff: float = 1.5) -> np.ndarray:
    """Pick the readout that fits the architecture."""
    cfg = params.config
    if cfg.decoder_bias and cfg.task == "causal":
        return recover_bow_decoder_bias(update, seq_len, n_seqs)
    if cfg.tied_embedding:
        exclude = (EOS_ID,) if cfg.task == "causal" else ()
        return recover_bow_tied_embedding(update, seq_len, n_seqs, cutoff, exclude)
    support = embedding_support(update)
    if support.size == 0:
        raise ValueError("embedding gradient is identically zero")
    reps = -(-seq_len * n_seqs // support.size)
    return np.sort(np.tile(support, reps)[:seq_len * n_seqs])


# ---------------------------------------------------------------- breached embeddings

def extract_breached_embeddings(update: GradientUpdate, crafted: ModelParams, layout: BinLayout,
                                denoise_sparsity: int | None = None) -> list[BreachedEmbedding]:
    """Divided differences of adjacent FFN-1 rows inside each block.

    With ``denoise_sparsity`` the stacked ``[grad b | grad W]`` of each block is
    first replaced by its best step-function fit with that many jumps.
    """
    cfg = crafted.config
    k = cfg.ffn_width
    grads = []
    for b in range(cfg.n_layers):
        gb = np.asarray(update[f"blocks.{b}.ffn.b1"], dtype=np.float64)
        gw = np.asarray(update[f"blocks.{b}.ffn.w1"], dtype=np.float64)
        if denoise_sparsity is not None:
            den = omp_denoise(np.column_stack([gb, gw]), min(denoise_sparsity, k))
            gb, gw = den[:, 0], den[:, 1:]
        grads.append((gb, gw))
    scale = max(float(np.abs(gb).max()) for gb, _ in grads)
    tau = BIAS_DIFF_RTOL * scale
    out = []
    for b, (gb, gw) in enumerate(grads):
        db = gb[:-1] - gb[1:]
        dw = gw[:-1] - gw[1:]
        for j in np.flatnonzero(np.abs(db) > tau):
            out.append(BreachedEmbedding(dw[j] / db[j], b, int(j), b * k + int(j), float(abs(db[j]))))
    if out:
        med = float(np.median([e.weight for e in out]))
        out = [BreachedEmbedding(e.vector, e.block, e.row, e.bin, e.weight, e.weight > COLLISION_FACTOR * med)
               for e in out]
    return out


# ---------------------------------------------------------------- clustering

def select_strongest(breached, limit: int) -> np.ndarray:
    """Indices of the ``limit`` largest-weight embeddings, in original order."""
    if len(breached) <= limit:
        return np.arange(len(breached))
    log.warning("%d breached embeddings exceed the %d available slots; keeping the strongest",
                len(breached), limit)
    w = np.array([e.weight for e in breached])
    return np.sort(np.argsort(-w, kind="stable")[:limit])


def _groups(points, radius):
    """Greedy grouping: each point joins the first representative within ``radius``."""
    reps, members = [], []
    for i, p in enumerate(points):
        for g, r in enumerate(reps):
            if np.linalg.norm(p - r) <= radius:
                members[g].append(i)
                break
        else:
            reps.append(p)
            members.append([i])
    return members


def fingerprint_seeds(points, n_seqs: int, d_prime: int, tol: float = FINGERPRINT_TOL) -> np.ndarray:
    """Starting centroids from groups of coinciding fingerprints.

    Embeddings of one sequence share their standardized identity slice up to
    rounding, so exact groups are sequences; the ``n_seqs`` largest seed the
    clustering. Missing seeds (sequences sharing a first token) repeat the
    largest groups so the size cap splits them.
    """
    members = _groups(points, tol * np.sqrt(d_prime))
    order = sorted(range(len(members)), key=lambda g: (-len(members[g]), members[g][0]))
    seeds = [points[members[g]].mean(0) for g in order[:n_seqs]]
    while len(seeds) < n_seqs:
        seeds.append(seeds[len(seeds) % max(1, len(order))])
    return np.array(seeds)


def cluster_sequences(breached, n_seqs: int, seq_len: int, d_prime: int, rng: Rng | None = None,
                      n_init: int = 4) -> ClusterLabels:
    """Constrained k-means on the standardized identity dims.

    Layer norm shifts and scales every position differently, but centering
    and normalizing the ``d'`` identity entries undoes both, so all positions
    of one sequence map to the same point. Labels cover every entry of
    ``breached``; entries dropped because more than ``n_seqs * seq_len``
    were found get label -1.
    """
    if not breached:
        raise ValueError("no breached embeddings to cluster")
    rng = rng or Rng(0)
    keep = select_strongest(breached, n_seqs * seq_len)
    points = _standardize(np.array([breached[i].vector[:d_prime] for i in keep]))
    best = None
    inits = [fingerprint_seeds(points, n_seqs, d_prime)] + [None] * max(1, n_init)
    for r, init in enumerate(inits):
        cand = constrained_kmeans(points, n_seqs, seq_len, rng.spawn(r), init=init)
        if best is None or cand.objective < best.objective - 1e-12:
            best = cand
    labels = np.full(len(breached), -1, dtype=np.int64)
    labels[keep] = best.labels
    return ClusterLabels(labels, best.sizes, best.centroids, best.objective_trace)


# ---------------------------------------------------------------- matching

def _content(x, d_prime):
    return np.asarray(x, dtype=np.float64)[..., d_prime:-1]


def _standardize(x):
    x = x - x.mean(-1, keepdims=True)
    n = np.linalg.norm(x, axis=-1, keepdims=True)
    return np.divide(x, n, out=np.zeros_like(x), where=n > 0)


def correlation(a, b) -> np.ndarray:
    """Pearson correlation between the rows of ``a`` and the rows of ``b``."""
    return _standardize(np.atleast_2d(a)) @ _standardize(np.atleast_2d(b)).T


def assign_positions(vectors, pos_table, d_prime: int):
    """Map embeddings of one sequence to its positions.

    Returns ``(source, matched)``: ``source[k]`` indexes ``vectors`` for
    position ``k``; ``matched[k]`` is False where the slot was filled by reusing
    the best-correlating embedding after the assignment.
    """
    S = len(pos_table)
    vectors = np.atleast_2d(np.asarray(vectors, dtype=np.float64))
    source = np.full(S, -1, dtype=np.int64)
    matched = np.zeros(S, dtype=bool)
    if vectors.shape[0] == 0 or vectors.shape[1] == 0:
        return source, matched
    corr = correlation(_content(vectors, d_prime), _content(pos_table, d_prime))
    asg = linear_sum_assignment(corr, maximize=True)
    source[asg.cols] = asg.rows
    matched[asg.cols] = True
    for k in np.flatnonzero(~matched):
        source[k] = int(np.argmax(corr[:, k]))
    return source, matched


def slot_token_correlation(slot_vectors, slot_positions, pos_table, tok_table, candidates, d_prime):
    """``corr(u_slot, t_v + p_k)`` for every slot and candidate token, on content dims."""
    U = _standardize(_content(slot_vectors, d_prime))
    P = _content(pos_table, d_prime)[slot_positions]
    Tc = _content(tok_table, d_prime)[candidates]
    P = P - P.mean(-1, keepdims=True)
    Tc = Tc - Tc.mean(-1, keepdims=True)
    num = U @ Tc.T + np.sum(U * P, -1, keepdims=True)
    den2 = np.sum(Tc * Tc, -1)[None, :] + 2.0 * (P @ Tc.T) + np.sum(P * P, -1, keepdims=True)
    den = np.sqrt(np.maximum(den2, 0.0))
    return np.divide(num, den, out=np.zeros_like(num), where=den > 0)


def assign_tokens(slot_vectors, slot_positions, pos_table, tok_table, candidates, d_prime: int,
                  unlimited: bool = False) -> np.ndarray:
    """Token id per slot via assignment against the candidate multiset.

    The position is removed by correlating each slot with ``t_v + p_k`` rather
    than with ``t_v`` alone, which keeps the match invariant to the per-token
    layer-norm scale. Each candidate may be used up to its multiplicity at no
    cost; further copies are available at ``SURPLUS_PENALTY`` so an exhausted
    multiset never forces an implausible token. With ``unlimited`` (a
    full-vocabulary candidate list carries no counts) every slot simply takes
    its best-correlating candidate.
    """
    candidates = np.asarray(candidates, dtype=np.int64)
    if candidates.size == 0:
        raise ValueError("empty candidate set")
    slot_positions = np.asarray(slot_positions, dtype=np.int64)
    n = len(slot_positions)
    if n == 0:
        return np.zeros(0, dtype=np.int64)
    uniq, counts = np.unique(candidates, return_counts=True)
    corr = slot_token_correlation(slot_vectors, slot_positions, pos_table, tok_table, uniq, d_prime)
    if unlimited:
        return uniq[np.argmax(corr, axis=1)]
    extra = -(-n // len(uniq)) + 1
    cols = np.concatenate([np.repeat(np.arange(len(uniq)), counts), np.repeat(np.arange(len(uniq)), extra)])
    penalty = np.concatenate([np.zeros(counts.sum()), np.full(extra * len(uniq), SURPLUS_PENALTY)])
    cost = (1.0 - corr)[:, cols] + penalty[None, :]
    asg = linear_sum_assignment(cost)
    out = np.empty(n, dtype=np.int64)
    out[asg.rows] = uniq[cols[asg.cols]]
    return out


def certify(slot_vectors, slot_positions, slot_tokens, pos_table, tok_table, d_prime: int,
            tol: float = CERTIFY_TOL, collision=None) -> np.ndarray:
    """True where ``u`` is an exact affine image of ``t_v + p_k`` on the content dims.

    Layer norm maps ``t_v + p_k`` to ``a (t_v + p_k) + c`` on those dims, so
    the check fits ``a > 0`` and ``c`` by least squares and thresholds the
    relative residual.
    """
    U = _content(slot_vectors, d_prime)
    Z = _content(pos_table, d_prime)[slot_positions] + _content(tok_table, d_prime)[slot_tokens]
    flags = np.zeros(len(U), dtype=bool)
    for i, (u, z) in enumerate(zip(U, Z)):
        un = np.linalg.norm(u)
        if un == 0 or not np.all(np.isfinite(u)):
            continue
        zc = z - z.mean()
        zz = zc @ zc
        if zz == 0:
            continue
        a = (u - u.mean()) @ zc / zz
        res = (u - u.mean()) - a * zc
        flags[i] = a > 0 and np.linalg.norm(res) <= tol * un
    if collision is not None:
        flags &= ~np.asarray(collision, dtype=bool)
    return flags


def _atoms(positions, tokens, pos_table, tok_table, d_prime):
    """Centered ``t_v + p_k`` for every (position, token) pair, flattened position-major."""
    P = _content(pos_table, d_prime)[positions]
    T = _content(tok_table, d_prime)[tokens]
    Z = P[:, None, :] + T[None, :, :]
    Z = Z - Z.mean(-1, keepdims=True)
    return Z.reshape(-1, Z.shape[-1])


def resolve_collisions(vectors, free_positions, pos_table, tok_table, candidates, d_prime: int,
                       tol: float = CERTIFY_TOL, shortlist: int = 32):
    """Split embeddings that are exact mixtures of two (position, token) atoms.

    A bin hit by two tokens holds a weighted mean of their FFN inputs, which on
    the content dims lies in ``span{1, t_v1 + p_k1, t_v2 + p_k2}``. For each
    vector the best single atom is tried first, then pairs built from a
    shortlist of first atoms; a fit is accepted when the relative residual is at
    most ``tol``. Returns ``(residual, index, [(k, v), ...])`` sorted by residual.
    """
    free_positions = np.asarray(free_positions, dtype=np.int64)
    uniq = np.unique(np.asarray(candidates, dtype=np.int64))
    if free_positions.size == 0 or uniq.size == 0 or len(vectors) == 0:
        return []
    A = _atoms(free_positions, uniq, pos_table, tok_table, d_prime)
    An = np.linalg.norm(A, axis=1)
    An[An == 0] = 1.0
    Ah = A / An[:, None]
    nv = len(uniq)
    found = []
    for i, u in enumerate(np.atleast_2d(vectors)):
        u = _content(u, d_prime)
        u = u - u.mean()
        un = np.linalg.norm(u)
        if un == 0 or not np.all(np.isfinite(u)):
            continue
        proj = Ah @ u
        order = np.argsort(-np.abs(proj), kind="stable")
        r1 = np.sqrt(max(un * un - proj[order[0]] ** 2, 0.0)) / un
        if r1 <= tol:
            a = order[0]
            found.append((r1, i, [(int(free_positions[a // nv]), int(uniq[a % nv]))]))
            continue
        # residual after removing atom a, then the best atom b orthogonalized against a:
        # <b_perp, r> = proj_b - proj_a c_ab and |b_perp|^2 = 1 - c_ab^2 with c_ab = <b, a>
        short = order[:shortlist]
        C = Ah @ Ah[short].T
        nrm2 = 1.0 - C * C
        gain = np.divide(proj[:, None] - C * proj[short][None, :], np.sqrt(np.maximum(nrm2, 0.0)),
                         out=np.zeros_like(C), where=nrm2 > 1e-12)
        gain[(np.arange(len(A)) // nv)[:, None] == (short // nv)[None, :]] = 0.0
        g2 = gain * gain
        b_idx = np.argmax(g2, axis=0)
        res2 = un * un - proj[short] ** 2 - g2[b_idx, np.arange(len(short))]
        j = int(np.argmin(res2))
        res = np.sqrt(max(res2[j], 0.0)) / un
        if res <= tol:
            pair = (short[j], b_idx[j])
            found.append((res, i, [(int(free_positions[x // nv]), int(uniq[x % nv])) for x in pair]))
    found.sort(key=lambda f: (f[0], f[1]))
    return found


# ---------------------------------------------------------------- full readout

def affine_fit(u, z):
    """Least-squares ``u ~ a z + c``; returns ``(a, c, relative residual)``."""
    zc = z - z.mean()
    zz = zc @ zc
    un = np.linalg.norm(u)
    if zz == 0 or un == 0:
        return 0.0, 0.0, np.inf
    a = (u - u.mean()) @ zc / zz
    c = u.mean() - a * z.mean()
    return a, c, np.linalg.norm(u - a * z - c) / un


def mixture_coefficients(u, atoms_z):
    """Least-squares ``u ~ sum_i a_i z_i + c`` on content dims; returns ``(a, c)``."""
    X = np.column_stack([np.ones(len(u))] + list(atoms_z))
    coef, *_ = np.linalg.lstsq(X, u, rcond=None)
    return coef[1:], coef[0]


def sequence_fingerprints(tokens, exact, sources, vecs, pos_table, tok_table, dp) -> dict:
    """Raw (pre layer norm) identity slice of every sequence with an exactly explained slot.

    For such a slot the content fit gives the layer-norm scale ``a`` and
    shift ``c``, and the identity dims satisfy ``u[:d'] = a f + c``.
    """
    out = {}
    for n in range(tokens.shape[0]):
        est = []
        for k in np.flatnonzero(exact[n]):
            u = vecs[sources[n, k]]
            a, c, _ = affine_fit(_content(u, dp), _content(pos_table[k] + tok_table[tokens[n, k]], dp))
            if a > 0:
                est.append((u[:dp] - c) / a)
        if est:
            out[n] = np.median(est, axis=0)
    return out


def distinct_first_tokens(update: GradientUpdate, d_prime: int, name: str = "blocks.0.attn.wv",
                          gap: float = 1e-6, floor: float = 1e-12) -> int | None:
    """Number of distinct first tokens in the batch, when the update reveals it.

    Every position of the locked block reads its value from position 0, so
    the value-weight gradient is a sum of one outer product per distinct
    first token. Its rank saturates at ``d'``; below that, and only with a
    clean spectral gap, the rank is the count. Returns None otherwise.
    """
    if name not in update.tensors:
        return None
    sv = np.linalg.svd(update[name], compute_uv=False)
    if sv.size == 0 or sv[0] == 0 or not np.all(np.isfinite(sv)):
        return None
    rel = sv / sv[0]
    r = int((rel > gap).sum())
    if r >= d_prime or (r < rel.size and rel[r:].max() > floor):
        return None
    return r


def exact_positions(vectors, pos_table, tok_table, vocab, d_prime: int) -> np.ndarray:
    """Position of every embedding that is an exact single (position, token) image, else -1."""
    vectors = np.atleast_2d(np.asarray(vectors, dtype=np.float64))
    vocab = np.asarray(vocab, dtype=np.int64)
    n, S = len(vectors), len(pos_table)
    best = np.full(n, -np.inf)
    best_k = np.zeros(n, dtype=np.int64)
    best_v = np.zeros(n, dtype=np.int64)
    for k in range(S):
        corr = slot_token_correlation(vectors, np.full(n, k), pos_table, tok_table, vocab, d_prime)
        j = np.argmax(corr, axis=1)
        c = corr[np.arange(n), j]
        better = c > best
        best[better], best_k[better], best_v[better] = c[better], k, vocab[j[better]]
    ok = certify(vectors, best_k, best_v, pos_table, tok_table, d_prime)
    return np.where(ok, best_k, -1)


def unambiguous_slots(exact, sources, vecs, dp: int, clean=None, distinct: int | None = None,
                      tol: float = FINGERPRINT_TOL) -> np.ndarray:
    """Slots whose sequence membership is as certain as their token.

    Certification checks token and position only. Each sequence is anchored
    by its explained first slot, whose identity dims come from that first
    token alone, so a fingerprint names a first token rather than a
    sequence. ``clean`` (``(index, position)`` of exactly explained
    embeddings, defaulting to the explained slots) groups by fingerprint; two
    different vectors at one position of a group prove two sequences behind
    it. Groups count as single sequences only once the proven duplicates
    cover every sequence not accounted for by a distinct first token
    (``distinct`` if known, else the number of groups). A sequence keeps its
    flags when its group is single and no explained slot of another sequence
    shares its fingerprint.
    """
    if exact.shape[0] == 1:
        return exact.copy()
    out = np.zeros_like(exact)
    cells = np.argwhere(exact)
    if len(cells) == 0:
        return out
    if clean is None:
        clean = (sources[exact], cells[:, 1])
    c_idx, c_pos = (np.asarray(a, dtype=np.int64) for a in clean)
    radius = tol * np.sqrt(dp)
    zc = _standardize(vecs[c_idx][:, :dp])
    groups = _groups(zc, radius)
    mult = []
    for g in groups:
        m = 1
        for k in np.unique(c_pos[g]):
            at = [c_idx[i] for i in g if c_pos[i] == k]
            scale = max(np.linalg.norm(vecs[at], axis=1).max(), 1e-300)
            m = max(m, len(_groups(vecs[at] / scale, 1e-6)))
        mult.append(m)
    deficit = exact.shape[0] - (distinct if distinct is not None else len(groups))
    if sum(m - 1 for m in mult) < deficit:
        return out
    single = [zc[g[0]] for g, m in zip(groups, mult) if m == 1]
    z = _standardize(vecs[sources[exact]][:, :dp])
    for n in np.flatnonzero(exact[:, 0]):
        anchor = z[np.flatnonzero((cells[:, 0] == n) & (cells[:, 1] == 0))[0]]
        if not any(np.linalg.norm(anchor - s) <= radius for s in single):
            continue
        near = np.linalg.norm(z - anchor, axis=1) <= radius
        if (near & (cells[:, 0] != n)).any():
            continue
        mine = near & (cells[:, 0] == n)
        out[n, cells[mine, 1]] = True
    return out


def _apply_resolution(tokens, exact, sources, labels, vecs, pos_table, tok_table, candidates, dp,
                      unlimited=False):
    """Overwrite unexplained slots with the parts of split mixtures.

    Mixtures may combine tokens of different sequences, so candidates come
    from every cluster; each part is routed to the sequence whose fingerprint
    best explains the mixture's identity dims.
    """
    used = Counter(tokens[exact].tolist())
    if unlimited:
        remaining = np.unique(candidates).tolist()
    else:
        remaining = [v for v, c in (Counter(candidates.tolist()) - used).items() if c > 0]
    free = ~exact
    if not remaining or not free.any():
        return
    fps = sequence_fingerprints(tokens, exact, sources, vecs, pos_table, tok_table, dp)
    explaining = set(sources[exact].tolist())
    pending = np.array([h for h in range(len(vecs)) if h not in explaining and labels[h] >= 0], dtype=np.int64)
    if pending.size == 0:
        return
    free_pos = np.flatnonzero(free.any(0))
    found = resolve_collisions(vecs[pending], free_pos, pos_table, tok_table, remaining, dp)
    for _, i, parts in found:
        u = vecs[pending[i]]
        zs = [_content(pos_table[k] + tok_table[v], dp) for k, v in parts]
        a, c = mixture_coefficients(_content(u, dp), zs)
        options = []
        for k, _ in parts:
            ns = [n for n in np.flatnonzero(free[:, k]) if n in fps]
            if not ns and free[labels[pending[i]], k]:
                ns = [int(labels[pending[i]])]
            options.append(ns)
        best, best_err = None, np.inf
        for combo in itertools.product(*options):
            if len(set(zip(combo, (k for k, _ in parts)))) < len(parts):
                continue
            pred = c + sum(ai * fps.get(n, np.zeros(dp)) for ai, n in zip(a, combo))
            err = np.linalg.norm(u[:dp] - pred)
            if err < best_err:
                best, best_err = combo, err
        if best is None:
            continue
        for n, (k, v) in zip(best, parts):
            if free[n, k]:
                tokens[n, k] = v
                free[n, k] = False


def full_vocabulary(config) -> np.ndarray:
    """Every id that can appear as an input token."""
    return np.array([v for v in range(config.vocab_size) if v not in (PAD_ID, MASK_ID, EOS_ID)], dtype=np.int64)


def run_attack(update: GradientUpdate, crafted: ModelParams, cfg: MaliciousConfig, n_seqs: int, seq_len: int,
               *, seed: int = 0, denoise_sparsity: int | None = None, candidates=None,
               cutoff: float = 1.5, resolve: bool = True, unlimited: bool = False) -> RecoveryResult:
    """Bag of words, extraction, clustering, positions, tokens, certification.

    With ``resolve`` the slots not exactly explained afterwards are revisited
    by :func:`resolve_collisions`; resolved slots are never certified.
    ``unlimited`` treats ``candidates`` as a set without multiplicities; it is
    switched on automatically when the bag-of-words readout fails.
    """
    model = crafted.config
    cfg = cfg.resolved(model)
    if n_seqs < 1 or seq_len < 1:
        raise ValueError("n_seqs and seq_len must be >= 1")
    if seq_len > model.max_positions:
        raise ValueError(f"seq_len {seq_len} exceeds max_positions {model.max_positions}")
    if update.global_norm() == 0:
        raise ValueError("update is identically zero")
    dp = cfg.d_prime

    if candidates is None:
        try:
            candidates = recover_bag_of_words(update, crafted, seq_len, n_seqs, cutoff)
        except ValueError as exc:
            log.warning("bag-of-words readout failed (%s); matching against the full vocabulary", exc)
            candidates, unlimited = full_vocabulary(model), True
    candidates = np.asarray(candidates, dtype=np.int64)

    layout = bin_layout(cfg, model)
    breached = extract_breached_embeddings(update, crafted, layout, denoise_sparsity)
    pos_table = crafted["pos_emb"][:seq_len]
    tok_table = crafted["tok_emb"]

    tokens = np.zeros((n_seqs, seq_len), dtype=np.int64)
    certified = np.zeros((n_seqs, seq_len), dtype=bool)
    fill_ins = np.full(n_seqs, seq_len, dtype=np.int64)
    sources = np.full((n_seqs, seq_len), -1, dtype=np.int64)
    if not breached:
        log.warning("no breached embeddings; every slot is a fill-in")
        uniq, counts = np.unique(candidates, return_counts=True)
        tokens[:] = uniq[np.argmax(counts)]
        return RecoveryResult(tokens, certified, np.arange(n_seqs), fill_ins, 0, candidates, sources)

    labels = cluster_sequences(breached, n_seqs, seq_len, dp, Rng(seed)).labels
    vecs = np.array([e.vector for e in breached])
    coll = np.array([e.collision_flag for e in breached])

    slot_vecs = np.zeros((n_seqs, seq_len, model.d_model))
    for n in range(n_seqs):
        members = np.flatnonzero(labels == n)
        src, matched = assign_positions(vecs[members], pos_table, dp)
        fill_ins[n] = int((~matched).sum())
        ok = src >= 0
        sources[n, ok] = members[src[ok]]
        slot_vecs[n, ok] = vecs[members[src[ok]]]

    flat_vecs = slot_vecs.reshape(-1, model.d_model)
    flat_pos = np.tile(np.arange(seq_len), n_seqs)
    flat_tokens = assign_tokens(flat_vecs, flat_pos, pos_table, tok_table, candidates, dp, unlimited)
    tokens = flat_tokens.reshape(n_seqs, seq_len)
    src_flat = sources.reshape(-1)
    slot_coll = np.where(src_flat >= 0, coll[np.maximum(src_flat, 0)], True)
    certified = certify(flat_vecs, flat_pos, flat_tokens, pos_table, tok_table, dp,
                        collision=slot_coll).reshape(n_seqs, seq_len)
    exact = certify(flat_vecs, flat_pos, flat_tokens, pos_table, tok_table, dp).reshape(n_seqs, seq_len)
    if n_seqs > 1:
        held = np.flatnonzero(labels >= 0)
        pos = exact_positions(vecs[held], pos_table, tok_table, full_vocabulary(model), dp)
        clean = (held[pos >= 0], pos[pos >= 0])
        certified &= unambiguous_slots(exact, sources, vecs, dp, clean, distinct_first_tokens(update, dp))
    if resolve:
        _apply_resolution(tokens, exact, sources, labels, vecs, pos_table, tok_table, candidates, dp, unlimited)
    return RecoveryResult(tokens, certified, np.arange(n_seqs), fill_ins, len(breached), candidates, sources)
