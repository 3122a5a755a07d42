"""fedSGD round simulation: per-user gradients, user-side defenses, server-side averaging."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from .model import GradientUpdate, ModelParams, gradient
from .numkernel import Rng

NOISE_DISTS = ("laplace", "gaussian")


@dataclass(frozen=True)
class DefenseConfig:
    """User-side protection applied to each update before it leaves the device.

    ``noise_scale`` is the Laplace scale ``b`` or the Gaussian std.
    """

    clip_norm: float | None = None
    noise_scale: float = 0.0
    noise_dist: str = "laplace"

    def __post_init__(self):
        if self.clip_norm is not None and not self.clip_norm > 0:
            raise ValueError(f"clip_norm must be > 0, got {self.clip_norm}")
        if not self.noise_scale >= 0:
            raise ValueError(f"noise_scale must be >= 0, got {self.noise_scale}")
        if self.noise_dist not in NOISE_DISTS:
            raise ValueError(f"noise_dist must be one of {NOISE_DISTS}")

    @property
    def active(self) -> bool:
        return self.clip_norm is not None or self.noise_scale > 0

    def label(self) -> str:
        if not self.active:
            return "none"
        parts = []
        if self.clip_norm is not None:
            parts.append(f"clip={self.clip_norm:g}")
        if self.noise_scale > 0:
            parts.append(f"{self.noise_dist}={self.noise_scale:g}")
        return ",".join(parts)


@dataclass(frozen=True)
class ProtocolConfig:
    users_per_round: int = 1
    batch_size: int = 1
    seq_len: int = 32
    defense: DefenseConfig = field(default_factory=DefenseConfig)
    dropout_enabled: bool = False

    def __post_init__(self):
        if min(self.users_per_round, self.batch_size, self.seq_len) < 1:
            raise ValueError("users_per_round, batch_size and seq_len must be >= 1")

    def as_dict(self) -> dict:
        return asdict(self)


def user_update(params: ModelParams, batch, mask=None, dropout_rng: Rng | None = None) -> GradientUpdate:
    """One user's fedSGD message: the loss gradient averaged over its whole local batch."""
    batch = np.asarray(batch)
    if batch.size == 0:
        raise ValueError("user batch is empty")
    if dropout_rng is not None and params.config.dropout_rate == 0:
        dropout_rng = None
    return gradient(params, batch, mask, dropout_rng=dropout_rng)


def aggregate(updates) -> GradientUpdate:
    """Plain per-tensor mean; ``token_count`` is summed over users."""
    updates = list(updates)
    if not updates:
        raise ValueError("nothing to aggregate")
    names = list(updates[0].tensors)
    for u in updates[1:]:
        if list(u.tensors) != names:
            raise ValueError("updates disagree on tensor names")
        for k in names:
            if u[k].shape != updates[0][k].shape:
                raise ValueError(f"{k}: shape mismatch between updates")
    n = len(updates)
    out = {}
    for k in names:
        acc = np.zeros_like(updates[0][k])
        for u in updates:
            acc += u[k]
        out[k] = acc / n
    return GradientUpdate(out, sum(u.token_count for u in updates))


def clip_global_norm(update: GradientUpdate, clip_norm: float) -> GradientUpdate:
    norm = update.global_norm()
    if norm <= clip_norm:
        return update.copy()
    return update.scaled(clip_norm / norm)


def apply_defense(update: GradientUpdate, defense: DefenseConfig, rng: Rng) -> GradientUpdate:
    """Clip to ``clip_norm`` (global norm), then add i.i.d. noise to every entry."""
    out = clip_global_norm(update, defense.clip_norm) if defense.clip_norm is not None else update.copy()
    if defense.noise_scale > 0:
        for k in out.tensors:
            shape = out[k].shape
            if defense.noise_dist == "laplace":
                out.tensors[k] = out[k] + rng.laplace(defense.noise_scale, size=shape)
            else:
                out.tensors[k] = out[k] + rng.normal(size=shape, scale=defense.noise_scale)
    return out


def simulate_round(params: ModelParams, user_batches, protocol: ProtocolConfig, rng: Rng,
                   masks=None) -> GradientUpdate:
    """Every user computes (and defends) its update independently; the server averages.

    User ``i`` draws dropout from ``rng.spawn(2 i)`` and defense noise from
    ``rng.spawn(2 i + 1)``, so results do not depend on evaluation order.
    """
    updates = []
    for i, batch in enumerate(user_batches):
        drop = rng.spawn(2 * i) if protocol.dropout_enabled else None
        up = user_update(params, batch, None if masks is None else masks[i], dropout_rng=drop)
        if protocol.defense.active:
            up = apply_defense(up, protocol.defense, rng.spawn(2 * i + 1))
        updates.append(up)
    return aggregate(updates)
