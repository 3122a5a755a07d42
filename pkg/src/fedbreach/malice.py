"""Server-side crafting of malicious transformer parameters.

The crafted model keeps token information unmixed, turns every FFN first
layer into a bank of threshold measurements of one shared vector ``m``, and
uses the first attention block to stamp each position with a fingerprint of
its sequence's first token.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, replace

import numpy as np

from .corpus import MeasurementStats
from .model import ModelConfig, ModelParams, forward_features
from .numkernel import Rng, gaussian_vector, inverse_normal_cdf

IDENTITY_GAIN = 1.0


@dataclass(frozen=True)
class MaliciousConfig:
    measurement_seed: int = 0
    d_prime: int | None = None
    gamma: float = 1e8
    epsilon: float = 1e-6
    stats: MeasurementStats | None = None
    bin_count: int | None = None
    gelu_boost: float = 100.0
    mlm_last_attention_weight: float = 10.0
    inspection_noise_std: float = 0.0

    def resolved(self, model: ModelConfig) -> "MaliciousConfig":
        """Fill model-dependent defaults and check consistency with ``model``."""
        d_prime = self.d_prime if self.d_prime is not None else default_d_prime(model.d_model)
        M = model.n_layers * model.ffn_width
        if self.bin_count is not None and self.bin_count != M:
            raise ValueError(f"bin_count={self.bin_count} but the model has {M} FFN rows")
        if not 0 < d_prime < model.d_model:
            raise ValueError(f"d_prime={d_prime} must lie in (0, d_model={model.d_model})")
        if 2 * d_prime >= model.d_model:
            raise ValueError(f"d_prime={d_prime} too large: the fingerprint copies d_prime content dims")
        if not self.gamma > 0 or not self.epsilon > 0:
            raise ValueError("gamma and epsilon must be positive")
        if self.inspection_noise_std < 0:
            raise ValueError("inspection_noise_std must be >= 0")
        return replace(self, d_prime=d_prime, bin_count=M)

    def to_meta(self) -> dict:
        out = {f"malice.{k}": v for k, v in asdict(self).items() if k != "stats"}
        if self.stats is not None:
            out["malice.stats.mean"] = repr(self.stats.mean)
            out["malice.stats.std"] = repr(self.stats.std)
            out["malice.stats.sample_count"] = self.stats.sample_count
        return out

    @classmethod
    def from_meta(cls, meta: dict) -> "MaliciousConfig":
        def opt_int(key):
            v = meta.get(key, "None")
            return None if v == "None" else int(v)

        stats = None
        if "malice.stats.mean" in meta:
            stats = MeasurementStats(float(meta["malice.stats.mean"]), float(meta["malice.stats.std"]),
                                     int(meta["malice.stats.sample_count"]))
        return cls(
            measurement_seed=int(meta["malice.measurement_seed"]),
            d_prime=opt_int("malice.d_prime"),
            gamma=float(meta["malice.gamma"]),
            epsilon=float(meta["malice.epsilon"]),
            stats=stats,
            bin_count=opt_int("malice.bin_count"),
            gelu_boost=float(meta["malice.gelu_boost"]),
            mlm_last_attention_weight=float(meta["malice.mlm_last_attention_weight"]),
            inspection_noise_std=float(meta["malice.inspection_noise_std"]),
        )


def default_d_prime(d_model: int) -> int:
    return 6 if d_model <= 128 else 32


@dataclass(frozen=True)
class BinLayout:
    """Global bin ``l`` lives in block ``l // width`` at row ``l % width``.

    ``boundaries[l]`` is the FFN bias of that row; row ``l`` fires when
    ``<m, u> > -boundaries[l]``.
    """

    boundaries: np.ndarray
    width: int

    @property
    def bin_count(self) -> int:
        return len(self.boundaries)

    @property
    def n_blocks(self) -> int:
        return self.bin_count // self.width

    def block_biases(self, block: int) -> np.ndarray:
        return self.boundaries[block * self.width:(block + 1) * self.width]

    def locate(self, measurement: float) -> int:
        """Highest bin whose row fires for ``measurement``; -1 if none does."""
        return int(np.searchsorted(-self.boundaries, measurement, side="left")) - 1


def compute_bias_bins(stats: MeasurementStats, bin_count: int, width: int | None = None) -> BinLayout:
    if bin_count < 2:
        raise ValueError("need at least 2 bins")
    if stats.std <= 0:
        raise ValueError("measurement std must be positive")
    width = bin_count if width is None else width
    if bin_count % width:
        raise ValueError(f"bin_count={bin_count} is not a multiple of width={width}")
    q = np.array([inverse_normal_cdf((l + 1) / (bin_count + 1)) for l in range(bin_count)])
    return BinLayout(-(stats.mean + stats.std * q), width)


def measurement_vector(cfg: MaliciousConfig, model: ModelConfig) -> np.ndarray:
    """Shared FFN row; zero on the fingerprint dims and on the carrier dim."""
    cfg = cfg.resolved(model)
    m = gaussian_vector(Rng(cfg.measurement_seed), model.d_model)
    m[:cfg.d_prime] = 0.0
    m[-1] = 0.0
    if model.activation == "gelu":
        m *= cfg.gelu_boost
    return m


def _block(b, name):
    return f"blocks.{b}.{name}"


def craft_front_end(params: ModelParams, cfg: MaliciousConfig) -> ModelParams:
    """Every modification except the bias bins (FFN biases left at zero).

    The first block's FFN input does not depend on the biases, so this model
    is what the server forwards public or random text through to calibrate.
    """
    model = params.config
    cfg = cfg.resolved(model)
    d, dp, H, dh = model.d_model, cfg.d_prime, model.n_heads, model.head_dim
    p = params.copy()
    T = p.tensors

    for name in ("tok_emb", "pos_emb"):
        T[name][:, :dp] = 0.0
        T[name][:, -1] = 0.0
    for b in range(model.n_layers):
        for ln in ("ln1", "ln2"):
            T[_block(b, ln + ".g")] = np.ones(d)
            T[_block(b, ln + ".b")] = np.zeros(d)

    # block 0 attention: every query looks at position 0 and copies a slice of it into dims [0, dp)
    p0 = T["pos_emb"][0].copy()
    wq, bq, wk, bk = np.zeros((d, d)), np.zeros(d), np.zeros((d, d)), np.zeros(d)
    if H == 1:
        wk = np.eye(d)
        bq = cfg.gamma * p0
    else:
        for h in range(H):
            wk[h * dh] = p0
            bq[h * dh] = cfg.gamma
    # the copy reads a layer-normed slice (unit scale); rescale it to IDENTITY_GAIN times the
    # per-dim content scale so the identity dims stand out without swamping the next layer norm
    content = (T["tok_emb"][:, dp:-1].std() ** 2 + T["pos_emb"][:, dp:-1].std() ** 2) ** 0.5
    wv = np.zeros((d, d))
    wv[np.arange(dp), dp + np.arange(dp)] = IDENTITY_GAIN * content
    wo = np.zeros((d, d))
    wo[np.arange(dp), np.arange(dp)] = 1.0
    for nm, val in (("wq", wq), ("bq", bq), ("wk", wk), ("bk", bk), ("wv", wv), ("bv", np.zeros(d)),
                    ("wo", wo), ("bo", np.zeros(d))):
        T[_block(0, "attn." + nm)] = val

    for b in range(1, model.n_layers):
        T[_block(b, "attn.wo")] = np.zeros((d, d))
        T[_block(b, "attn.bo")] = np.zeros(d)
    if model.task == "masked":
        if model.n_layers < 2:
            raise ValueError("masked-task crafting needs at least 2 blocks")
        last = model.n_layers - 1
        w = cfg.mlm_last_attention_weight
        for nm in ("wq", "bq", "wk", "bk", "bv", "bo"):
            T[_block(last, "attn." + nm)] = np.zeros_like(T[_block(last, "attn." + nm)])
        wv = np.zeros((d, d))
        wv[-1, -1] = w
        wo = np.zeros((d, d))
        wo[-1, -1] = 1.0
        T[_block(last, "attn.wv")] = wv
        T[_block(last, "attn.wo")] = wo

    m = measurement_vector(cfg, model)
    noise_rng = Rng(cfg.measurement_seed).spawn(1)
    k = model.ffn_width
    for b in range(model.n_layers):
        w1 = np.tile(m, (k, 1))
        if cfg.inspection_noise_std > 0:
            w1 = w1 + noise_rng.normal(size=w1.shape, scale=cfg.inspection_noise_std)
        T[_block(b, "ffn.w1")] = w1
        T[_block(b, "ffn.b1")] = np.zeros(k)
        w2 = np.zeros((d, k))
        w2[-1, :] = cfg.epsilon
        T[_block(b, "ffn.w2")] = w2
        T[_block(b, "ffn.b2")] = np.zeros(d)
    return p


def craft_malicious_params(params: ModelParams, cfg: MaliciousConfig) -> ModelParams:
    if cfg.stats is None:
        raise ValueError("MaliciousConfig.stats is required to place the bias bins")
    cfg = cfg.resolved(params.config)
    p = craft_front_end(params, cfg)
    layout = bin_layout(cfg, params.config)
    for b in range(params.config.n_layers):
        p.tensors[_block(b, "ffn.b1")] = layout.block_biases(b).copy()
    return p


def bin_layout(cfg: MaliciousConfig, model: ModelConfig) -> BinLayout:
    cfg = cfg.resolved(model)
    return compute_bias_bins(cfg.stats, cfg.bin_count, model.ffn_width)


def sequence_identity_check(crafted: ModelParams, batch, cfg: MaliciousConfig, mask=None) -> np.ndarray:
    """First-``d'`` slice of block-0 attention output, shape ``(B, S, d')``."""
    cfg = cfg.resolved(crafted.config)
    feats = forward_features(crafted, batch, mask)
    return feats["attn_outputs"][0][..., :cfg.d_prime]


def numerical_rank(matrix, rtol: float = 1e-10) -> int:
    s = np.linalg.svd(np.asarray(matrix, dtype=np.float64), compute_uv=False)
    if s.size == 0 or s[0] == 0:
        return 0
    return int((s > rtol * s[0]).sum())


def diagnostics(crafted: ModelParams, cfg: MaliciousConfig) -> dict:
    """Numbers a parameter inspector (or the attacker) would look at."""
    cfg = cfg.resolved(crafted.config)
    layout = bin_layout(cfg, crafted.config)
    return {
        "d_prime": cfg.d_prime,
        "bin_count": layout.bin_count,
        "stats_mean": cfg.stats.mean,
        "stats_std": cfg.stats.std,
        "boundary_first": float(layout.boundaries[0]),
        "boundary_last": float(layout.boundaries[-1]),
        "ffn1_rank": [numerical_rank(crafted[_block(b, "ffn.w1")]) for b in range(crafted.config.n_layers)],
        "ffn1_rows": crafted.config.ffn_width,
    }
