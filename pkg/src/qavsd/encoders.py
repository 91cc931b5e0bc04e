"""Toy audio / visual encoders, speaker embeddings and the visual VAD head."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numerics as nx
from .errors import AlignmentError, ConfigError, EnrollmentError, LengthError
from .frontend import MAX_ALIGN_SLACK, VIDEO_TO_AUDIO

MIN_ENROLL_FRAMES = 10
# Initial gain of the layer norms that produce E_IA and E_V. Unit gain puts the
# two streams ~sqrt(2D) apart, far beyond the contrastive margin, and the first
# updates then collapse every distance; a small gain starts them near the margin.
SYNC_STREAM_GAIN = 0.1
FUSION_STRATEGIES = ("qa", "concat", "factorized", "cross")


@dataclass
class ModelConfig:
    d_v: int = 64
    d_a: int = 64
    d_ia: int = 64
    d_i: int = 64
    heads: int = 4
    qa_layers: int = 3
    xs_layers: int = 4
    ffn_mult: int = 4
    visual_hidden: int = 128
    audio_hidden: int = 128
    n_bins: int = 40
    patch_size: int = 24
    context: int = 2
    temporal_half: int = 2
    sync_window: int = 12
    sync_m: float = 1.0
    factor_k: int = 4
    fusion: str = "qa"

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.d_ia != self.d_v:
            raise ConfigError(f"d_ia ({self.d_ia}) must equal d_v ({self.d_v})")
        for name in ("d_v", "d_ia"):
            if getattr(self, name) % self.heads:
                raise ConfigError(f"{name}={getattr(self, name)} not divisible by heads={self.heads}")
        if self.d_v % self.factor_k:
            raise ConfigError(f"d_v={self.d_v} not divisible by factor_k={self.factor_k}")
        if self.fusion not in FUSION_STRATEGIES:
            raise ConfigError(f"fusion must be one of {FUSION_STRATEGIES}, got {self.fusion!r}")
        if self.sync_m <= 0:
            raise ConfigError("sync_m must be positive")
        if self.qa_layers < 1 or not 0 <= self.xs_layers <= 8:
            raise ConfigError("qa_layers must be >= 1 and xs_layers in 0..8")

    @property
    def patch_pixels(self) -> int:
        return self.patch_size * self.patch_size

    def to_meta(self) -> dict[str, str]:
        return {f"model.{k}": str(v) for k, v in self.__dict__.items()}

    @classmethod
    def from_meta(cls, meta: dict[str, str]) -> "ModelConfig":
        kw = {}
        for k, default in cls().__dict__.items():
            raw = meta.get(f"model.{k}")
            if raw is not None:
                kw[k] = type(default)(raw) if not isinstance(default, str) else raw
        return cls(**kw)


class Linear:
    def __init__(self, params: nx.ParamSet, name: str, d_in: int, d_out: int, rng, bias: bool = True):
        self.w = params.add(f"{name}.w", nx.normal_init(rng, (d_in, d_out), 1.0 / np.sqrt(d_in)))
        self.b = params.add(f"{name}.b", np.zeros(d_out)) if bias else None

    def __call__(self, x):
        y = nx.matmul(x, self.w)
        return y if self.b is None else y + self.b


class LayerNorm:
    def __init__(self, params: nx.ParamSet, name: str, d: int, gain: float = 1.0):
        self.g = params.add(f"{name}.g", np.full(d, gain))
        self.b = params.add(f"{name}.b", np.zeros(d))

    def __call__(self, x):
        return nx.layer_norm(x) * self.g + self.b


def context_stack(frames: np.ndarray, context: int) -> np.ndarray:
    """[..., T, F] -> [..., T, (2c+1)F] with replication padding at the edges."""
    t = frames.shape[-2]
    cols = []
    for k in range(-context, context + 1):
        idx = np.clip(np.arange(t) + k, 0, t - 1)
        cols.append(np.take(frames, idx, axis=-2))
    return np.concatenate(cols, axis=-1)


class AudioEncoder:
    """FBANK frames with +-context stacking -> per-frame MLP -> layer norm."""

    def __init__(self, params, cfg: ModelConfig, rng, name: str = "aud"):
        self.cfg = cfg
        width = (2 * cfg.context + 1) * cfg.n_bins
        self.fc1 = Linear(params, f"{name}.fc1", width, cfg.audio_hidden, rng)
        self.fc2 = Linear(params, f"{name}.fc2", cfg.audio_hidden, cfg.d_a, rng)
        self.ln = LayerNorm(params, f"{name}.ln", cfg.d_a)

    def encode_stacked(self, stacked) -> nx.Tensor:
        return self.ln(self.fc2(nx.relu(self.fc1(stacked))))

    def __call__(self, fbank: np.ndarray) -> nx.Tensor:
        fbank = np.asarray(fbank, dtype=np.float64)
        if fbank.shape[-2] < 2 * self.cfg.context + 1:
            raise LengthError(f"audio_encode needs >= {2 * self.cfg.context + 1} frames, got {fbank.shape[-2]}")
        return self.encode_stacked(context_stack(fbank, self.cfg.context))


class VisualEncoder:
    """Per-frame MLP on lip patches, a residual +-k frame averaging layer, then 4x repetition."""

    def __init__(self, params, cfg: ModelConfig, rng, name: str = "vis"):
        self.cfg = cfg
        self.fc1 = Linear(params, f"{name}.fc1", cfg.patch_pixels, cfg.visual_hidden, rng)
        self.fc2 = Linear(params, f"{name}.fc2", cfg.visual_hidden, cfg.d_v, rng)
        self.ln = LayerNorm(params, f"{name}.ln", cfg.d_v, SYNC_STREAM_GAIN)
        self.mix = Linear(params, f"{name}.mix", cfg.d_v, cfg.d_v, rng)

    def frame_embeddings(self, patches) -> nx.Tensor:
        """[..., T_v, P] pixels (0..255) -> [..., T_v, D_V] at video rate."""
        x = np.asarray(patches, dtype=np.float64) / 255.0
        h = self.ln(self.fc2(nx.relu(self.fc1(x))))
        # residual temporal mixing keeps the per-frame mouth shape next to its context
        return h + self.mix(nx.window_mean(h, self.cfg.temporal_half, axis=-2))

    def __call__(self, patches, miss_mask=None) -> nx.Tensor:
        patches = np.asarray(patches)
        if miss_mask is not None:
            patches = np.where(np.asarray(miss_mask)[..., None], 0, patches)
        return nx.repeat(self.frame_embeddings(patches), VIDEO_TO_AUDIO, axis=-2)


def visual_encode(encoder: VisualEncoder, patches, miss_mask=None) -> nx.Tensor:
    return encoder(patches, miss_mask)


def audio_encode(encoder: AudioEncoder, fbank) -> nx.Tensor:
    return encoder(fbank)


def align_streams(e_v: nx.Tensor, num_frames: int) -> nx.Tensor:
    """Trim the repeated visual stream [..., 4T_v, D] to the audio length."""
    tv = e_v.shape[-2]
    if abs(tv - num_frames) > MAX_ALIGN_SLACK:
        raise AlignmentError(f"visual stream has {tv} frames, audio {num_frames}")
    if tv == num_frames:
        return e_v
    if tv < num_frames:
        raise AlignmentError(f"visual stream shorter ({tv}) than audio ({num_frames}); trim the audio")
    return e_v[..., :num_frames, :]


class SpeakerEmbedder:
    """Mean-pooled A-embedding -> affine -> unit norm."""

    def __init__(self, params, cfg: ModelConfig, rng, name: str = "spk"):
        self.proj = Linear(params, f"{name}.proj", cfg.d_a, cfg.d_i, rng)

    def from_pooled(self, pooled) -> nx.Tensor:
        return nx.l2_normalize(self.proj(pooled))

    def __call__(self, e_a: nx.Tensor, frames_per_speaker, names=None) -> nx.Tensor:
        """``e_a`` [T, D_A]; ``frames_per_speaker`` list of index arrays -> [N, D_I]."""
        pooled = []
        for n, idx in enumerate(frames_per_speaker):
            idx = np.asarray(idx, dtype=np.intp)
            if idx.size < MIN_ENROLL_FRAMES:
                who = names[n] if names is not None else f"#{n}"
                raise EnrollmentError(f"speaker {who} has {idx.size} attributed frames, "
                                      f"need >= {MIN_ENROLL_FRAMES}")
            pooled.append(nx.mean_axis(nx.take(e_a, idx, axis=-2), axis=-2))
        return self.from_pooled(nx.stack(pooled, axis=0))


def speaker_embed(embedder: SpeakerEmbedder, e_a, frames_per_speaker, names=None) -> nx.Tensor:
    return embedder(e_a, frames_per_speaker, names)


def fallback_embedding(d_i: int) -> np.ndarray:
    """Zero-information enrollment: the all-equal unit vector."""
    return np.full(d_i, 1.0 / np.sqrt(d_i))


class SpeakerAudioFusion:
    """concat(E_A(t), I^n) -> affine -> layer norm, one stream per speaker.

    The affine over the concatenation is computed as ``E_A W_a + I W_i + b``,
    which is the same map without materializing the concatenated tensor.
    """

    def __init__(self, params, cfg: ModelConfig, rng, name: str = "fuse"):
        self.cfg = cfg
        d_in = cfg.d_a + cfg.d_i
        w = nx.normal_init(rng, (d_in, cfg.d_ia), 1.0 / np.sqrt(d_in))
        self.wa = params.add(f"{name}.wa", w[:cfg.d_a])
        self.wi = params.add(f"{name}.wi", w[cfg.d_a:])
        self.b = params.add(f"{name}.b", np.zeros(cfg.d_ia))
        self.ln = LayerNorm(params, f"{name}.ln", cfg.d_ia, SYNC_STREAM_GAIN)

    def __call__(self, e_a, spk) -> nx.Tensor:
        """``e_a`` [..., T, D_A], ``spk`` [..., N, D_I] -> [..., N, T, D_IA]."""
        if e_a.shape[-1] != self.cfg.d_a or spk.shape[-1] != self.cfg.d_i:
            raise ConfigError(f"fuse_speaker_audio: got dims {e_a.shape[-1]}/{spk.shape[-1]}, "
                              f"expected {self.cfg.d_a}/{self.cfg.d_i}")
        a = nx.expand_dims(nx.matmul(e_a, self.wa), -3)
        s = nx.expand_dims(nx.matmul(spk, self.wi), -2)
        return self.ln(a + s + self.b)


def fuse_speaker_audio(fusion: SpeakerAudioFusion, e_a, spk) -> nx.Tensor:
    return fusion(e_a, spk)


class VVADHead:
    def __init__(self, params, cfg: ModelConfig, rng, name: str = "vvad"):
        self.fc = Linear(params, f"{name}.fc", cfg.d_v, 1, rng)

    def logits(self, e_v) -> nx.Tensor:
        y = self.fc(e_v)
        return nx.reshape(y, y.shape[:-1])

    def __call__(self, e_v) -> nx.Tensor:
        return nx.sigmoid(self.logits(e_v))
