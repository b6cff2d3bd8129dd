"""Multi-head latent attention with a compressed incremental cache."""

from __future__ import annotations

from dataclasses import dataclass, field, fields

import numpy as np

from . import autodiff as ad
from .layers import linear
from .autodiff import Tensor


@dataclass(frozen=True)
class MLAConfig:
    d: int
    n_h: int
    d_h: int
    d_c: int
    d_cq: int
    d_hR: int
    latent_norm: bool = True
    rope_base: float = 10000.0
    eps: float = 1e-6

    def __post_init__(self):
        dims = (self.d, self.n_h, self.d_h, self.d_c, self.d_cq, self.d_hR)
        if min(dims) < 1:
            raise ValueError("all MLA dims must be positive")
        if self.d_hR % 2:
            raise ValueError("d_hR must be even for the rotary embedding")

    @classmethod
    def full_scale(cls) -> MLAConfig:
        return cls(d=7168, n_h=128, d_h=128, d_c=512, d_cq=1536, d_hR=64)

    @property
    def cache_per_token(self) -> int:
        return self.d_c + self.d_hR

    @property
    def cache_ratio(self) -> float:
        """Cached scalars per token relative to standard multi-head attention."""
        return self.cache_per_token / (2 * self.n_h * self.d_h)


@dataclass
class MLAWeights:
    cfg: MLAConfig
    W_DKV: Tensor
    W_UK: Tensor
    W_KR: Tensor
    W_UV: Tensor
    W_DQ: Tensor
    W_UQ: Tensor
    W_QR: Tensor
    W_O: Tensor
    kv_norm: Tensor
    q_norm: Tensor

    @classmethod
    def init(cls, cfg: MLAConfig, rng: np.random.Generator, std: float = 0.006) -> MLAWeights:
        hd, hr = cfg.n_h * cfg.d_h, cfg.n_h * cfg.d_hR
        shapes = dict(
            W_DKV=(cfg.d_c, cfg.d),
            W_UK=(hd, cfg.d_c),
            W_KR=(cfg.d_hR, cfg.d),
            W_UV=(hd, cfg.d_c),
            W_DQ=(cfg.d_cq, cfg.d),
            W_UQ=(hd, cfg.d_cq),
            W_QR=(hr, cfg.d_cq),
            W_O=(cfg.d, hd),
        )
        mats = {k: Tensor(rng.normal(0.0, std, s), requires_grad=True) for k, s in shapes.items()}
        return cls(
            cfg,
            kv_norm=Tensor(np.ones(cfg.d_c), requires_grad=True),
            q_norm=Tensor(np.ones(cfg.d_cq), requires_grad=True),
            **mats,
        )

    def parameters(self) -> list[Tensor]:
        return [getattr(self, f.name) for f in fields(self) if f.name != "cfg"]


def _proj(x, w: Tensor) -> Tensor:
    return linear(x, w)


def _norm(c, gain: Tensor, cfg: MLAConfig) -> Tensor:
    return ad.rmsnorm(c, gain, cfg.eps) if cfg.latent_norm else ad.tensor(c)


def _expand_latent(c_kv, w: MLAWeights):
    """Per-head content keys and values from (possibly stacked) latents."""
    cfg = w.cfg
    cn = _norm(c_kv, w.kv_norm, cfg)
    lead = cn.shape[:-1]
    k_c = _proj(cn, w.W_UK).reshape(lead + (cfg.n_h, cfg.d_h))
    v = _proj(cn, w.W_UV).reshape(lead + (cfg.n_h, cfg.d_h))
    return k_c, v


def kv_compress(h_t, w: MLAWeights, position):
    """Latent, shared rotary key, full per-head keys and values for ``h_t``.

    ``h_t`` may carry leading axes; ``position`` must broadcast to them.
    """
    cfg = w.cfg
    h_t = ad.tensor(h_t)
    if h_t.shape[-1] != cfg.d:
        raise ValueError(f"hidden size {h_t.shape[-1]} != {cfg.d}")
    c_kv = _proj(h_t, w.W_DKV)
    k_r = ad.rope_apply(_proj(h_t, w.W_KR), position, cfg.rope_base)
    k_c, v = _expand_latent(c_kv, w)
    k_r_heads = ad.mul(ad.reshape(k_r, k_r.shape[:-1] + (1, cfg.d_hR)), np.ones((cfg.n_h, 1)))
    keys = ad.concat([k_c, k_r_heads], axis=-1)
    return c_kv, k_r, keys, v


def q_compress(h_t, w: MLAWeights, position) -> Tensor:
    cfg = w.cfg
    h_t = ad.tensor(h_t)
    if h_t.shape[-1] != cfg.d:
        raise ValueError(f"hidden size {h_t.shape[-1]} != {cfg.d}")
    c_q = _norm(_proj(h_t, w.W_DQ), w.q_norm, cfg)
    lead = c_q.shape[:-1]
    q_c = _proj(c_q, w.W_UQ).reshape(lead + (cfg.n_h, cfg.d_h))
    q_r = _proj(c_q, w.W_QR).reshape(lead + (cfg.n_h, cfg.d_hR))
    pos = np.asarray(position)
    q_r = ad.rope_apply(q_r, pos[..., None] if pos.ndim else pos, cfg.rope_base)
    return ad.concat([q_c, q_r], axis=-1)


def attend(queries, keys, values, w: MLAWeights) -> Tensor:
    """Output for one query position over keys/values of positions ``1..t``.

    queries: (n_h, d_h + d_hR); keys: (t, n_h, d_h + d_hR); values: (t, n_h, d_h).
    """
    cfg = w.cfg
    keys, values = ad.tensor(keys), ad.tensor(values)
    if keys.shape[0] == 0:
        raise ValueError("attend needs at least one past position")
    if keys.shape[1] != cfg.n_h or ad.tensor(queries).shape[0] != cfg.n_h:
        raise ValueError("head count mismatch")
    scores = ad.tsum(ad.mul(keys, queries), axis=-1) * (1.0 / np.sqrt(cfg.d_h + cfg.d_hR))
    p = ad.softmax(scores, axis=0)
    o = ad.tsum(ad.mul(ad.reshape(p, p.shape + (1,)), values), axis=0)
    return _proj(ad.reshape(o, (cfg.n_h * cfg.d_h,)), w.W_O)


@dataclass(frozen=True)
class MLACache:
    """Append-only cache of latents and shared rotary keys, one entry per position."""

    c_kv: tuple = field(default=())
    k_rope: tuple = field(default=())

    def __len__(self) -> int:
        return len(self.c_kv)

    def append(self, c_kv: np.ndarray, k_rope: np.ndarray) -> MLACache:
        c, k = np.array(c_kv), np.array(k_rope)
        c.flags.writeable = False
        k.flags.writeable = False
        return MLACache(self.c_kv + (c,), self.k_rope + (k,))

    @property
    def scalars(self) -> int:
        return sum(c.size + k.size for c, k in zip(self.c_kv, self.k_rope))


def decode_step(h_t, w: MLAWeights, cache: MLACache, position: int | None = None):
    """Attend from a new position using only cached latents; returns ``(u_t, cache)``."""
    t = len(cache)
    if position is not None and position != t:
        raise ValueError(f"cache position gap: cache holds {t} positions, got position {position}")
    with ad.no_grad():
        c_kv, k_r, _, _ = kv_compress(h_t, w, t)
        cache = cache.append(c_kv.data, k_r.data)
        k_c, v = _expand_latent(np.stack(cache.c_kv), w)
        k_r_all = np.broadcast_to(np.stack(cache.k_rope)[:, None, :], (t + 1, w.cfg.n_h, w.cfg.d_hR))
        keys = ad.concat([k_c, Tensor(k_r_all)], axis=-1)
        u = attend(q_compress(h_t, w, t), keys, v, w)
    return u, cache


def mla_forward(h, w: MLAWeights) -> Tensor:
    """Causal attention over a whole sequence; ``h`` is (T, d) or (B, T, d)."""
    cfg = w.cfg
    h = ad.tensor(h)
    T = h.shape[-2]
    pos = np.arange(T)
    k_r = ad.rope_apply(_proj(h, w.W_KR), pos, cfg.rope_base)
    c_kv = _proj(h, w.W_DKV)
    k_c, v = _expand_latent(c_kv, w)
    q = q_compress(h, w, pos)
    q_c, q_r = q[..., : cfg.d_h], q[..., cfg.d_h :]
    # (..., n_h, T, d) layout for batched products
    lead = len(h.shape) - 2
    perm = tuple(range(lead)) + (lead + 1, lead, lead + 2)
    q_c, k_c, v, q_r = (x.transpose(perm) for x in (q_c, k_c, v, q_r))
    k_r = ad.reshape(k_r, k_r.shape[:-2] + (1,) + k_r.shape[-2:])
    scores = ad.matmul(q_c, k_c.swapaxes(-1, -2)) + ad.matmul(q_r, k_r.swapaxes(-1, -2))
    mask = np.triu(np.full((T, T), -np.inf), 1)
    p = ad.softmax(scores * (1.0 / np.sqrt(cfg.d_h + cfg.d_hR)) + mask, axis=-1)
    o = ad.matmul(p, v).transpose(perm)
    return _proj(ad.reshape(o, o.shape[:-2] + (cfg.n_h * cfg.d_h,)), w.W_O)
