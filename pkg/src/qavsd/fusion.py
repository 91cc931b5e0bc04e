"""Audio-visual fusion: synchronization-weighted attention and three baselines.

All fusion modules take the speaker-wise audio stream ``e_ia`` and the visual
stream ``e_v``, both [..., N, T, D], and return ``(e_av, w)`` where ``w`` is the
[..., N, T] sync weight (``None`` for strategies that do not compute one).
"""

from __future__ import annotations

import numpy as np

from . import numerics as nx
from .encoders import LayerNorm, Linear, ModelConfig
from .errors import ConfigError, ContractError


def sync_distance(e_ia, e_v, window: int) -> nx.Tensor:
    """Windowed mean L2 distance between the two streams, [..., N, T].

    Near sequence edges the window is clipped and the divisor is the number of
    frames actually averaged.
    """
    if e_ia.shape[-1] != e_v.shape[-1]:
        raise ConfigError(f"sync_distance: feature dims differ ({e_ia.shape[-1]} vs {e_v.shape[-1]})")
    if window < 0:
        raise ConfigError("window must be >= 0")
    d = nx.l2_distance(e_ia, e_v)
    return nx.window_mean(d, window, axis=-1)


def sync_weight(dist, m: float = 1.0) -> nx.Tensor:
    """``m / (m + dist)``: 1 at zero distance, decreasing toward 0."""
    if m <= 0:
        raise ConfigError(f"M must be positive, got {m}")
    return nx.div(m, nx.add(dist, m))


def multi_head_attention(q, k, v, heads: int, return_probs: bool = False):
    """Scaled dot-product attention over the time axis, [..., T, D] inputs."""
    d = q.shape[-1]
    dh = d // heads

    def split(x):
        x = nx.reshape(x, x.shape[:-1] + (heads, dh))
        return nx.swapaxes(x, -2, -3)  # [..., h, T, dh]

    out, probs = nx.attention(split(q), split(k), split(v), return_probs=True)
    out = nx.swapaxes(out, -2, -3)
    out = nx.reshape(out, out.shape[:-2] + (d,))
    return (out, probs) if return_probs else out


class AttentionStream:
    """Q/K/V/O projections plus the FFN, residual and layer-norm tail of one stream."""

    def __init__(self, params, name: str, d: int, ffn_mult: int, rng):
        self.q = Linear(params, f"{name}.q", d, d, rng)
        self.k = Linear(params, f"{name}.k", d, d, rng)
        self.v = Linear(params, f"{name}.v", d, d, rng)
        self.o = Linear(params, f"{name}.o", d, d, rng)
        self.ln1 = LayerNorm(params, f"{name}.ln1", d)
        self.ff1 = Linear(params, f"{name}.ff1", d, ffn_mult * d, rng)
        self.ff2 = Linear(params, f"{name}.ff2", ffn_mult * d, d, rng)
        self.ln2 = LayerNorm(params, f"{name}.ln2", d)

    def tail(self, x, attended):
        h = self.ln1(x + self.o(attended))
        return self.ln2(h + self.ff2(nx.relu(self.ff1(h))))


class QALayer:
    """One quality-aware block: each stream's query is a W-weighted mix of both modalities' queries."""

    def __init__(self, params, name: str, cfg: ModelConfig, rng):
        self.heads = cfg.heads
        self.a = AttentionStream(params, f"{name}.a", cfg.d_ia, cfg.ffn_mult, rng)
        self.v = AttentionStream(params, f"{name}.v", cfg.d_v, cfg.ffn_mult, rng)
        self.last_probs = None

    def _attend(self, e_ia, e_v, q_audio, q_vis):
        fa, pa = multi_head_attention(q_audio, self.a.k(e_ia), self.a.v(e_ia), self.heads, True)
        fv, pv = multi_head_attention(q_vis, self.v.k(e_v), self.v.v(e_v), self.heads, True)
        self.last_probs = (pa, pv)
        return self.a.tail(e_ia, fa), self.v.tail(e_v, fv)

    def __call__(self, e_ia, e_v, w):
        wd = w.data if isinstance(w, nx.Tensor) else np.asarray(w)
        if wd.min(initial=0.0) < 0.0 or wd.max(initial=0.0) > 1.0:
            raise ContractError("sync weights must lie in [0, 1]")
        wq = nx.expand_dims(nx.as_tensor(w), -1)
        qa, qv = self.a.q(e_ia), self.v.q(e_v)
        q_audio = wq * qv + (1.0 - wq) * qa
        q_vis = wq * qa + (1.0 - wq) * qv
        return self._attend(e_ia, e_v, q_audio, q_vis)

    def cross(self, e_ia, e_v):
        """Plain cross-modal attention: the audio stream is queried by the visual stream and vice versa."""
        return self._attend(e_ia, e_v, self.v.q(e_v), self.a.q(e_ia))

    def self_attend(self, e_ia, e_v):
        return self._attend(e_ia, e_v, self.a.q(e_ia), self.v.q(e_v))


def qa_attention_layer(layer: QALayer, e_ia, e_v, w):
    return layer(e_ia, e_v, w)


class QAFusion:
    def __init__(self, params, cfg: ModelConfig, rng, name: str = "fusion"):
        self.cfg = cfg
        self.layers = [QALayer(params, f"{name}.qa{i}", cfg, rng) for i in range(cfg.qa_layers)]

    def weights(self, e_ia, e_v) -> nx.Tensor:
        return sync_weight(sync_distance(e_ia, e_v, self.cfg.sync_window), self.cfg.sync_m)

    def __call__(self, e_ia, e_v):
        w = self.weights(e_ia, e_v)
        a, v = e_ia, e_v
        for layer in self.layers:
            a, v = layer(a, v, w)
        return a * v, w


class ConcatFusion:
    def __init__(self, params, cfg: ModelConfig, rng, name: str = "fusion"):
        d_in = cfg.d_ia + cfg.d_v
        w = nx.normal_init(rng, (d_in, cfg.d_ia), 1.0 / np.sqrt(d_in))
        self.wa = params.add(f"{name}.cat.wa", w[:cfg.d_ia])
        self.wv = params.add(f"{name}.cat.wv", w[cfg.d_ia:])
        self.b = params.add(f"{name}.cat.b", np.zeros(cfg.d_ia))

    def __call__(self, e_ia, e_v):
        return nx.matmul(e_ia, self.wa) + nx.matmul(e_v, self.wv) + self.b, None


class FactorizedFusion:
    """Audio split into k subspace vectors, each gated by sigmoid of a low-dim visual projection."""

    def __init__(self, params, cfg: ModelConfig, rng, name: str = "fusion"):
        self.k = cfg.factor_k
        self.sub = cfg.d_ia // cfg.factor_k
        self.audio = Linear(params, f"{name}.fac.audio", cfg.d_ia, self.k * self.sub, rng)
        self.gate = Linear(params, f"{name}.fac.gate", cfg.d_v, self.sub, rng)
        self.out = Linear(params, f"{name}.fac.out", self.k * self.sub, cfg.d_ia, rng)

    def __call__(self, e_ia, e_v):
        a = self.audio(e_ia)
        a = nx.reshape(a, a.shape[:-1] + (self.k, self.sub))
        g = nx.expand_dims(nx.sigmoid(self.gate(e_v)), -2)
        z = a * g
        return self.out(nx.reshape(z, z.shape[:-2] + (self.k * self.sub,))), None


class CrossAttentionFusion:
    def __init__(self, params, cfg: ModelConfig, rng, name: str = "fusion"):
        self.layers = [QALayer(params, f"{name}.qa{i}", cfg, rng) for i in range(cfg.qa_layers)]
        self.proj = Linear(params, f"{name}.xproj", cfg.d_ia + cfg.d_v, cfg.d_ia, rng)

    def __call__(self, e_ia, e_v):
        a, v = e_ia, e_v
        for layer in self.layers:
            a, v = layer.cross(a, v)
        return self.proj(nx.concat_axis([a, v], axis=-1)), None


def build_fusion(params, cfg: ModelConfig, rng):
    cls = {"qa": QAFusion, "concat": ConcatFusion, "factorized": FactorizedFusion,
           "cross": CrossAttentionFusion}[cfg.fusion]
    return cls(params, cfg, rng)
