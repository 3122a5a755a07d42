"""Small pre-norm transformer language model with hand-written gradients.

Layout per block: ``x + attn(ln1(x))`` then ``h + ffn(ln2(h))``; learned
positional embeddings; a final layer norm before the decoder. Linear layers
store weights as ``(out, in)`` and compute ``x @ W.T + b``.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields

import numpy as np
from scipy.special import erf

from . import archive
from .numkernel import Rng
from .special import EOS_ID, MASK_ID

LN_EPS = 1e-5
INIT_STD = 0.02
ACTIVATIONS = ("relu", "gelu")
TASKS = ("causal", "masked")
_SQRT_HALF = 1.0 / math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    d_model: int = 64
    n_layers: int = 3
    n_heads: int = 1
    ffn_width: int = 256
    max_positions: int = 256
    activation: str = "relu"
    task: str = "causal"
    tied_embedding: bool = False
    decoder_bias: bool = True
    dropout_rate: float = 0.0

    def __post_init__(self):
        if self.vocab_size < 2:
            raise ValueError("vocab_size must be at least 2")
        if self.d_model < 1 or self.n_layers < 1 or self.n_heads < 1:
            raise ValueError("d_model, n_layers and n_heads must be positive")
        if self.d_model % self.n_heads:
            raise ValueError(f"d_model={self.d_model} is not divisible by n_heads={self.n_heads}")
        if self.ffn_width < 1 or self.max_positions < 1:
            raise ValueError("ffn_width and max_positions must be positive")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"activation must be one of {ACTIVATIONS}")
        if self.task not in TASKS:
            raise ValueError(f"task must be one of {TASKS}")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError("dropout_rate must lie in [0, 1)")

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads

    def to_meta(self) -> dict:
        return {f"model.{k}": v for k, v in asdict(self).items()}

    @classmethod
    def from_meta(cls, meta: dict) -> "ModelConfig":
        kwargs = {}
        for f in fields(cls):
            raw = meta[f"model.{f.name}"]
            if f.type in ("int", int):
                kwargs[f.name] = int(raw)
            elif f.type in ("float", float):
                kwargs[f.name] = float(raw)
            elif f.type in ("bool", bool):
                kwargs[f.name] = raw == "True"
            else:
                kwargs[f.name] = raw
        return cls(**kwargs)


def param_shapes(cfg: ModelConfig) -> dict:
    d, k, V = cfg.d_model, cfg.ffn_width, cfg.vocab_size
    shapes = {"tok_emb": (V, d), "pos_emb": (cfg.max_positions, d)}
    for b in range(cfg.n_layers):
        p = f"blocks.{b}."
        shapes.update({
            p + "ln1.g": (d,), p + "ln1.b": (d,),
            p + "attn.wq": (d, d), p + "attn.bq": (d,),
            p + "attn.wk": (d, d), p + "attn.bk": (d,),
            p + "attn.wv": (d, d), p + "attn.bv": (d,),
            p + "attn.wo": (d, d), p + "attn.bo": (d,),
            p + "ln2.g": (d,), p + "ln2.b": (d,),
            p + "ffn.w1": (k, d), p + "ffn.b1": (k,),
            p + "ffn.w2": (d, k), p + "ffn.b2": (d,),
        })
    shapes["lnf.g"] = (d,)
    shapes["lnf.b"] = (d,)
    if not cfg.tied_embedding:
        shapes["dec.w"] = (V, d)
    if cfg.decoder_bias:
        shapes["dec.b"] = (V,)
    return shapes


@dataclass
class ModelParams:
    config: ModelConfig
    tensors: dict

    def __post_init__(self):
        shapes = param_shapes(self.config)
        if set(shapes) != set(self.tensors):
            missing = set(shapes) ^ set(self.tensors)
            raise ValueError(f"tensor set does not match config: {sorted(missing)}")
        for name, shape in shapes.items():
            arr = self.tensors[name]
            if arr.shape != shape:
                raise ValueError(f"{name}: expected shape {shape}, got {arr.shape}")

    def __getitem__(self, name: str) -> np.ndarray:
        return self.tensors[name]

    def __setitem__(self, name: str, value) -> None:
        arr = np.asarray(value, dtype=np.float64)
        if arr.shape != self.tensors[name].shape:
            raise ValueError(f"{name}: expected shape {self.tensors[name].shape}, got {arr.shape}")
        self.tensors[name] = arr

    def copy(self) -> "ModelParams":
        return ModelParams(self.config, {k: v.copy() for k, v in self.tensors.items()})

    def decoder_weight(self) -> np.ndarray:
        return self.tensors["tok_emb"] if self.config.tied_embedding else self.tensors["dec.w"]

    def save(self, path, extra_meta: dict | None = None):
        meta = {"kind": "params", **self.config.to_meta(), **(extra_meta or {})}
        return archive.save_archive(path, self.tensors, meta)

    @classmethod
    def load(cls, path) -> tuple["ModelParams", dict]:
        tensors, meta = archive.load_archive(path)
        if meta.get("kind") != "params":
            raise ValueError(f"{path} does not hold model parameters")
        cfg = ModelConfig.from_meta(meta)
        ordered = {name: tensors[name] for name in param_shapes(cfg)}
        return cls(cfg, ordered), meta


@dataclass
class GradientUpdate:
    """Per-tensor gradients, keyed like :class:`ModelParams`."""

    tensors: dict
    token_count: int

    def __getitem__(self, name: str) -> np.ndarray:
        return self.tensors[name]

    def copy(self) -> "GradientUpdate":
        return GradientUpdate({k: v.copy() for k, v in self.tensors.items()}, self.token_count)

    def global_norm(self) -> float:
        return math.sqrt(sum(float(np.sum(v * v)) for v in self.tensors.values()))

    def scaled(self, factor: float) -> "GradientUpdate":
        return GradientUpdate({k: v * factor for k, v in self.tensors.items()}, self.token_count)

    def save(self, path):
        return archive.save_archive(path, self.tensors, {"kind": "update", "token_count": self.token_count})

    @classmethod
    def load(cls, path) -> "GradientUpdate":
        tensors, meta = archive.load_archive(path)
        if meta.get("kind") != "update":
            raise ValueError(f"{path} does not hold a gradient update")
        return cls(tensors, int(meta["token_count"]))


def init_model(config: ModelConfig, rng: Rng) -> ModelParams:
    tensors = {}
    for name, shape in param_shapes(config).items():
        if name.endswith(".g") and ".ln" in name or name == "lnf.g":
            tensors[name] = np.ones(shape)
        elif name.endswith(".b") and (".ln" in name or name == "lnf.b"):
            tensors[name] = np.zeros(shape)
        else:
            tensors[name] = rng.normal(size=shape, scale=INIT_STD)
    return ModelParams(config, tensors)


# ---------------------------------------------------------------- inputs

def prepare_batch(config: ModelConfig, batch, mask=None):
    """Turn raw sequences into ``(inputs, targets)``; targets use -1 for no loss.

    Causal: position ``k`` predicts token ``k+1`` and the final position
    predicts ``[EOS]``. Masked: ``mask`` marks positions replaced by ``[MASK]``
    whose original token becomes the target.
    """
    tokens = np.asarray(batch)
    if tokens.ndim == 1:
        tokens = tokens[None, :]
    if tokens.ndim != 2 or tokens.shape[1] < 1:
        raise ValueError(f"batch must be (sequences, length), got shape {tokens.shape}")
    if not np.issubdtype(tokens.dtype, np.integer):
        raise ValueError("token ids must be integers")
    tokens = tokens.astype(np.int64)
    if tokens.min() < 0 or tokens.max() >= config.vocab_size:
        raise ValueError(f"token id outside [0, {config.vocab_size})")
    if tokens.shape[1] > config.max_positions:
        raise ValueError(f"sequence length {tokens.shape[1]} exceeds max_positions={config.max_positions}")
    if config.task == "causal":
        targets = np.empty_like(tokens)
        targets[:, :-1] = tokens[:, 1:]
        targets[:, -1] = EOS_ID
        return tokens, targets
    if mask is None:
        raise ValueError("masked task needs mask positions")
    mask = np.asarray(mask, dtype=bool).reshape(tokens.shape)
    if not mask.any():
        raise ValueError("mask selects no positions; loss would be empty")
    inputs = np.where(mask, MASK_ID, tokens)
    targets = np.where(mask, tokens, -1)
    return inputs, targets


# ---------------------------------------------------------------- pieces

def _layer_norm(x, g, b):
    mu = x.mean(-1, keepdims=True)
    xc = x - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(-1, keepdims=True) + LN_EPS)
    xhat = xc * inv
    return xhat * g + b, (xhat, inv)


def _layer_norm_back(dy, g, cache):
    xhat, inv = cache
    dxhat = dy * g
    dg = (dy * xhat).reshape(-1, xhat.shape[-1]).sum(0)
    db = dy.reshape(-1, dy.shape[-1]).sum(0)
    dx = inv * (dxhat - dxhat.mean(-1, keepdims=True) - xhat * (dxhat * xhat).mean(-1, keepdims=True))
    return dx, dg, db


def _act(y, kind):
    if kind == "relu":
        return np.maximum(y, 0.0)
    return 0.5 * y * (1.0 + erf(y * _SQRT_HALF))


def _act_grad(y, kind):
    if kind == "relu":
        return (y > 0).astype(np.float64)
    return 0.5 * (1.0 + erf(y * _SQRT_HALF)) + y * _INV_SQRT_2PI * np.exp(-0.5 * y * y)


def _softmax(s):
    s = s - s.max(-1, keepdims=True)
    e = np.exp(s)
    return e / e.sum(-1, keepdims=True)


def _split(x, H):
    B, S, d = x.shape
    return x.reshape(B, S, H, d // H).transpose(0, 2, 1, 3)


def _merge(x):
    B, H, S, dh = x.shape
    return x.transpose(0, 2, 1, 3).reshape(B, S, H * dh)


def _dropout_mask(rng, shape, rate):
    keep = rng.uniform(size=shape) >= rate
    return keep / (1.0 - rate)


# ---------------------------------------------------------------- forward / backward

def _forward(params: ModelParams, inputs, targets, dropout_rng=None, keep_cache=True):
    cfg = params.config
    T = params.tensors
    B, S = inputs.shape
    H = cfg.n_heads
    rate = cfg.dropout_rate if dropout_rng is not None else 0.0
    x = T["tok_emb"][inputs] + T["pos_emb"][:S][None]
    causal = cfg.task == "causal"
    neg = np.triu(np.full((S, S), -np.inf), 1) if causal else None
    caches, ffn_inputs, attn_weights, attn_outputs = [], [], [], []
    for b in range(cfg.n_layers):
        p = f"blocks.{b}."
        a_in, ln1c = _layer_norm(x, T[p + "ln1.g"], T[p + "ln1.b"])
        q = a_in @ T[p + "attn.wq"].T + T[p + "attn.bq"]
        k = a_in @ T[p + "attn.wk"].T + T[p + "attn.bk"]
        v = a_in @ T[p + "attn.wv"].T + T[p + "attn.bv"]
        qh, kh, vh = _split(q, H), _split(k, H), _split(v, H)
        scale = 1.0 / math.sqrt(cfg.head_dim)
        scores = (qh @ kh.transpose(0, 1, 3, 2)) * scale
        if causal:
            scores = scores + neg
        A = _softmax(scores)
        amask = _dropout_mask(dropout_rng, A.shape, rate) if rate > 0 else None
        Ad = A * amask if amask is not None else A
        o = _merge(Ad @ vh)
        attn = o @ T[p + "attn.wo"].T + T[p + "attn.bo"]
        h = x + attn
        f_in, ln2c = _layer_norm(h, T[p + "ln2.g"], T[p + "ln2.b"])
        y = f_in @ T[p + "ffn.w1"].T + T[p + "ffn.b1"]
        act = _act(y, cfg.activation)
        f_out = act @ T[p + "ffn.w2"].T + T[p + "ffn.b2"]
        fmask = _dropout_mask(dropout_rng, f_out.shape, rate) if rate > 0 else None
        if fmask is not None:
            f_out = f_out * fmask
        x = h + f_out
        ffn_inputs.append(f_in)
        attn_weights.append(A)
        attn_outputs.append(attn)
        if keep_cache:
            caches.append(dict(ln1c=ln1c, a_in=a_in, qh=qh, kh=kh, vh=vh, A=A, amask=amask, Ad=Ad,
                               o=o, ln2c=ln2c, f_in=f_in, y=y, act=act, fmask=fmask, scale=scale))
    hf, lnfc = _layer_norm(x, T["lnf.g"], T["lnf.b"])
    logits = hf @ params.decoder_weight().T
    if cfg.decoder_bias:
        logits = logits + T["dec.b"]
    sel = targets >= 0
    count = int(sel.sum())
    if count == 0:
        raise ValueError("no loss-bearing tokens in batch")
    z = logits - logits.max(-1, keepdims=True)
    logz = np.log(np.exp(z).sum(-1, keepdims=True))
    logp = z - logz
    tgt = np.where(sel, targets, 0)
    picked = np.take_along_axis(logp, tgt[..., None], -1)[..., 0]
    loss = -float(picked[sel].sum()) / count
    state = dict(inputs=inputs, targets=targets, sel=sel, count=count, logp=logp, hf=hf, lnfc=lnfc,
                 caches=caches, ffn_inputs=ffn_inputs, attn_weights=attn_weights, attn_outputs=attn_outputs)
    return loss, state


def _backward(params: ModelParams, st) -> dict:
    cfg = params.config
    T = params.tensors
    G = {name: np.zeros_like(arr) for name, arr in T.items()}
    inputs, targets, sel, count = st["inputs"], st["targets"], st["sel"], st["count"]
    B, S = inputs.shape
    H = cfg.n_heads
    dlogits = np.exp(st["logp"])
    tgt = np.where(sel, targets, 0)
    np.put_along_axis(dlogits, tgt[..., None], np.take_along_axis(dlogits, tgt[..., None], -1) - 1.0, -1)
    dlogits *= (sel / count)[..., None]
    Wd = params.decoder_weight()
    d_dec_w = dlogits.reshape(-1, dlogits.shape[-1]).T @ st["hf"].reshape(-1, cfg.d_model)
    if cfg.tied_embedding:
        G["tok_emb"] += d_dec_w
    else:
        G["dec.w"] += d_dec_w
    if cfg.decoder_bias:
        G["dec.b"] += dlogits.sum((0, 1))
    dhf = dlogits @ Wd
    dx, G["lnf.g"], G["lnf.b"] = _layer_norm_back(dhf, T["lnf.g"], st["lnfc"])
    for b in reversed(range(cfg.n_layers)):
        p = f"blocks.{b}."
        c = st["caches"][b]
        # feed-forward branch
        df_out = dx if c["fmask"] is None else dx * c["fmask"]
        G[p + "ffn.b2"] = df_out.sum((0, 1))
        G[p + "ffn.w2"] = df_out.reshape(-1, cfg.d_model).T @ c["act"].reshape(-1, cfg.ffn_width)
        dact = df_out @ T[p + "ffn.w2"]
        dy = dact * _act_grad(c["y"], cfg.activation)
        G[p + "ffn.b1"] = dy.sum((0, 1))
        G[p + "ffn.w1"] = dy.reshape(-1, cfg.ffn_width).T @ c["f_in"].reshape(-1, cfg.d_model)
        df_in = dy @ T[p + "ffn.w1"]
        dh_ln, G[p + "ln2.g"], G[p + "ln2.b"] = _layer_norm_back(df_in, T[p + "ln2.g"], c["ln2c"])
        dh = dx + dh_ln
        # attention branch
        G[p + "attn.bo"] = dh.sum((0, 1))
        G[p + "attn.wo"] = dh.reshape(-1, cfg.d_model).T @ c["o"].reshape(-1, cfg.d_model)
        do = _split(dh @ T[p + "attn.wo"], H)
        dAd = do @ c["vh"].transpose(0, 1, 3, 2)
        dvh = c["Ad"].transpose(0, 1, 3, 2) @ do
        dA = dAd * c["amask"] if c["amask"] is not None else dAd
        A = c["A"]
        dscores = A * (dA - (dA * A).sum(-1, keepdims=True)) * c["scale"]
        dqh = dscores @ c["kh"]
        dkh = dscores.transpose(0, 1, 3, 2) @ c["qh"]
        a_in = c["a_in"].reshape(-1, cfg.d_model)
        da_in = np.zeros_like(c["a_in"])
        for nm, dproj in (("q", dqh), ("k", dkh), ("v", dvh)):
            dm = _merge(dproj)
            G[p + f"attn.b{nm}"] = dm.sum((0, 1))
            G[p + f"attn.w{nm}"] = dm.reshape(-1, cfg.d_model).T @ a_in
            da_in += dm @ T[p + f"attn.w{nm}"]
        dx_ln, G[p + "ln1.g"], G[p + "ln1.b"] = _layer_norm_back(da_in, T[p + "ln1.g"], c["ln1c"])
        dx = dh + dx_ln
    np.add.at(G["tok_emb"], inputs.reshape(-1), dx.reshape(-1, cfg.d_model))
    G["pos_emb"][:S] += dx.sum(0)
    return G


def forward_loss(params: ModelParams, batch, mask=None) -> float:
    """Mean cross-entropy over loss-bearing tokens (no dropout)."""
    inputs, targets = prepare_batch(params.config, batch, mask)
    loss, _ = _forward(params, inputs, targets, keep_cache=False)
    return loss


def gradient(params: ModelParams, batch, mask=None, dropout_rng: Rng | None = None) -> GradientUpdate:
    """Exact gradient of the batch-mean loss.

    With ``dropout_rng`` and a positive ``dropout_rate`` the gradient is that of
    the loss under the sampled dropout masks on attention weights and on the
    feed-forward residual branch.
    """
    inputs, targets = prepare_batch(params.config, batch, mask)
    _, st = _forward(params, inputs, targets, dropout_rng=dropout_rng)
    return GradientUpdate(_backward(params, st), st["count"])


def forward_features(params: ModelParams, batch, mask=None) -> dict:
    """Intermediate activations: per-block FFN inputs, attention weights and outputs."""
    inputs, targets = prepare_batch(params.config, batch, mask)
    if not (targets >= 0).any():
        targets = targets.copy()
        targets[..., 0] = 0
    loss, st = _forward(params, inputs, targets, keep_cache=False)
    return {"loss": loss, "inputs": inputs, "ffn_inputs": st["ffn_inputs"],
            "attn_weights": st["attn_weights"], "attn_outputs": st["attn_outputs"]}
