"""Speaker information exchange and the assembled diarization network.

Every speaker's fused stream queries the average of the other speakers'
streams; all layers share parameters across speakers, so the same weights
serve any speaker count.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numerics as nx
from .encoders import (AudioEncoder, Linear, ModelConfig, SpeakerAudioFusion, SpeakerEmbedder,
                       VisualEncoder, VVADHead, align_streams)
from .fusion import AttentionStream, build_fusion, multi_head_attention

SPEAKER_AXIS = -3  # streams are [..., N, T, D]


def combiner(e_av) -> nx.Tensor:
    """Mean of the *other* speakers' streams for every speaker; a lone speaker sees itself."""
    e_av = nx.as_tensor(e_av)
    n = e_av.shape[SPEAKER_AXIS]
    if n == 1:
        return e_av
    total = nx.sum_axis(e_av, axis=SPEAKER_AXIS, keepdims=True)
    return (total - e_av) * (1.0 / (n - 1))


class CrossSpeakerLayer:
    def __init__(self, params, name: str, cfg: ModelConfig, rng):
        self.heads = cfg.heads
        self.s = AttentionStream(params, name, cfg.d_ia, cfg.ffn_mult, rng)
        self.last_probs = None

    def __call__(self, e_av):
        h = combiner(e_av)
        att, self.last_probs = multi_head_attention(self.s.q(e_av), self.s.k(h), self.s.v(h),
                                                    self.heads, True)
        return self.s.tail(e_av, att)


class OutputHead:
    def __init__(self, params, cfg: ModelConfig, rng, name: str = "head"):
        self.fc = Linear(params, f"{name}.fc", cfg.d_ia, 1, rng)

    def logits(self, e_av) -> nx.Tensor:
        y = self.fc(e_av)
        return nx.reshape(y, y.shape[:-1])

    def __call__(self, e_av) -> nx.Tensor:
        return nx.sigmoid(self.logits(e_av))


@dataclass
class ForwardResult:
    logits: nx.Tensor  # [..., N, T]
    e_ia: nx.Tensor
    e_v: nx.Tensor
    e_av: nx.Tensor
    w: nx.Tensor | None

    @property
    def posterior(self) -> np.ndarray:
        return nx._sigmoid(self.logits.data)


# parameter groups by training role
ENCODER_PREFIXES = ("vis.", "aud.", "spk.", "fuse.")
BACKEND_PREFIXES = ("fusion.", "xs.", "head.")
VVAD_PREFIXES = ("vvad.",)


class AVSDModel:
    """Encoders -> fusion -> cross-speaker layers -> shared output head."""

    def __init__(self, cfg: ModelConfig, seed: int = 0, params: nx.ParamSet | None = None):
        self.cfg = cfg
        rng = nx.seeded_rng(seed)
        build = nx.ParamSet()
        self.visual = VisualEncoder(build, cfg, rng)
        self.audio = AudioEncoder(build, cfg, rng)
        self.speaker = SpeakerEmbedder(build, cfg, rng)
        self.fuse = SpeakerAudioFusion(build, cfg, rng)
        self.vvad = VVADHead(build, cfg, rng)
        self.fusion = build_fusion(build, cfg, rng)
        self.xs = [CrossSpeakerLayer(build, f"xs.l{i}", cfg, rng) for i in range(cfg.xs_layers)]
        self.head = OutputHead(build, cfg, rng)
        self.params = build
        if params is not None:
            self.load_params(params)

    def load_params(self, params: nx.ParamSet) -> None:
        mine, theirs = set(self.params.names()), set(params.names())
        if mine != theirs:
            raise ValueError(f"parameter names differ: missing {sorted(mine - theirs)[:3]}, "
                             f"unexpected {sorted(theirs - mine)[:3]}")
        self.params.restore({n: p.data for n, p in params.items()})

    def save(self, path) -> None:
        self.params.save(path, self.cfg.to_meta())

    @classmethod
    def load(cls, path) -> "AVSDModel":
        params, meta = nx.ParamSet.load(path)
        return cls(ModelConfig.from_meta(meta), params=params)

    # -- pieces -----------------------------------------------------------

    def encode_visual(self, patches, miss_mask=None, num_frames: int | None = None) -> nx.Tensor:
        e_v = self.visual(patches, miss_mask)
        return e_v if num_frames is None else align_streams(e_v, num_frames)

    def embed_speakers_stacked(self, stacked) -> nx.Tensor:
        """``stacked`` [..., N, K, ctx*F] context-stacked frames -> [..., N, D_I]."""
        e = self.audio.encode_stacked(stacked)
        return self.speaker.from_pooled(nx.mean_axis(e, axis=-2))

    def backend(self, e_ia, e_v):
        e_av, w = self.fusion(e_ia, e_v)
        for layer in self.xs:
            e_av = layer(e_av)
        return self.head.logits(e_av), e_av, w

    def forward(self, fbank, patches, spk, miss_mask=None) -> ForwardResult:
        """``fbank`` [..., T, F]; ``patches`` [..., N, T_v, P]; ``spk`` [..., N, D_I]."""
        fbank = np.asarray(fbank, dtype=np.float64)
        t = fbank.shape[-2]
        e_a = self.audio(fbank)
        e_ia = self.fuse(e_a, nx.as_tensor(spk))
        e_v = self.encode_visual(patches, miss_mask, t)
        logits, e_av, w = self.backend(e_ia, e_v)
        return ForwardResult(logits, e_ia, e_v, e_av, w)

    __call__ = forward
