"""Inference: enrollment, chunked forward passes, thresholding and post-processing."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numerics as nx
from .encoders import MIN_ENROLL_FRAMES, fallback_embedding
from .errors import ConfigError
from .exchange import AVSDModel
from .frontend import VIDEO_TO_AUDIO
from .segments import (FRAME_STEP, SegmentList, load_rttm, matrix_to_segments, rttm_read,  # noqa: F401
                       rttm_write, runs, save_rttm)
from .synthcorpus import Scene, frame_energy

ENERGY_PERCENTILE = 20.0


@dataclass
class PipelineConfig:
    threshold: float = 0.5
    min_gap: float = 0.3
    min_duration: float = 0.2
    enroll_iters: int = 2
    chunk_s: float = 4.0  # inference chunk length

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if not 0.0 < self.threshold < 1.0:
            raise ConfigError(f"threshold {self.threshold} outside (0, 1)")
        if self.min_gap < 0 or self.min_duration < 0:
            raise ConfigError("min_gap and min_duration must be >= 0")
        if self.enroll_iters < 1:
            raise ConfigError("enroll_iters must be >= 1")
        if self.chunk_s <= 0:
            raise ConfigError("chunk_s must be positive")

    @property
    def chunk_frames(self) -> int:
        return max(VIDEO_TO_AUDIO, int(round(self.chunk_s / FRAME_STEP)) // VIDEO_TO_AUDIO * VIDEO_TO_AUDIO)


@dataclass
class Enrollment:
    embeddings: np.ndarray  # [N, D_I], unit rows
    frames: list[np.ndarray]  # attributed frame indices per speaker
    fallback: np.ndarray  # [N] bool, True where the zero-information vector was used


# ---------------------------------------------------------------------------
# forward passes


def _visual_frames(scene: Scene) -> int:
    return min(scene.num_frames, VIDEO_TO_AUDIO * scene.num_video_frames)


def visual_posteriors(scene: Scene, model: AVSDModel) -> np.ndarray:
    """V-VAD posteriors [N, T] on the audio frame grid."""
    t = _visual_frames(scene)
    with nx.no_grad():
        e_v = model.encode_visual(scene.patches, scene.miss_mask, None)
        p = model.vvad(e_v).data[:, :t]
    return _pad_time(p, scene.num_frames)


def _pad_time(x: np.ndarray, t: int) -> np.ndarray:
    if x.shape[-1] >= t:
        return x[..., :t]
    pad = np.repeat(x[..., -1:], t - x.shape[-1], axis=-1)
    return np.concatenate([x, pad], axis=-1)


def embed_frames(scene: Scene, model: AVSDModel, frames: list[np.ndarray], previous: np.ndarray | None = None):
    """Embeddings from attributed frames; a speaker with too few frames keeps ``previous`` (or the fallback)."""
    d_i = model.cfg.d_i
    with nx.no_grad():
        e_a = model.audio(scene.audio)
        out = np.empty((len(frames), d_i))
        fell_back = np.zeros(len(frames), dtype=bool)
        for n, idx in enumerate(frames):
            if len(idx) >= MIN_ENROLL_FRAMES:
                pooled = nx.mean_axis(nx.take(e_a, np.asarray(idx, dtype=np.intp), axis=-2), axis=-2, keepdims=True)
                out[n] = model.speaker.from_pooled(pooled).data[0]
            elif previous is not None:
                out[n] = previous[n]
            else:
                out[n] = fallback_embedding(d_i)
                fell_back[n] = True
    return out, fell_back


def initial_enrollment(scene: Scene, model: AVSDModel, cfg: PipelineConfig | None = None) -> Enrollment:
    """Attribute frames where exactly one V-VAD posterior clears the threshold and the audio is not quiet.

    "Not quiet" means frame energy above the scene's 20th-percentile energy, a
    noise-floor estimate.
    """
    cfg = cfg or PipelineConfig()
    vv = visual_posteriors(scene, model) >= cfg.threshold
    energy = frame_energy(scene.audio)
    loud = energy > np.percentile(energy, ENERGY_PERCENTILE)
    single = (vv.sum(axis=0) == 1) & loud
    frames = [np.flatnonzero(single & vv[n]) for n in range(scene.n_speakers)]
    emb, fb = embed_frames(scene, model, frames)
    return Enrollment(emb, frames, fb)


def predict(model: AVSDModel, audio: np.ndarray, patches: np.ndarray, miss_mask: np.ndarray,
            spk: np.ndarray, chunk_frames: int) -> np.ndarray:
    """Posteriors [N, T] from non-overlapping chunks of at most ``chunk_frames`` frames.

    Full chunks run as one batch; a shorter tail chunk (aligned to a video frame
    boundary) runs on its own.
    """
    t = min(audio.shape[0], VIDEO_TO_AUDIO * patches.shape[1])
    n = patches.shape[0]
    out = np.empty((n, t))
    c = chunk_frames
    n_full = t // c
    with nx.no_grad():
        if n_full:
            a = audio[:n_full * c].reshape(n_full, c, -1)
            cv = c // VIDEO_TO_AUDIO
            p = patches[:, :n_full * cv].reshape(n, n_full, cv, -1).swapaxes(0, 1)
            m = miss_mask[:, :n_full * cv].reshape(n, n_full, cv).swapaxes(0, 1)
            s = np.broadcast_to(spk, (n_full,) + spk.shape)
            post = model.forward(a, p, s, m).posterior  # [B, N, c]
            out[:, :n_full * c] = post.swapaxes(0, 1).reshape(n, n_full * c)
        start = n_full * c
        if start < t:
            if t - start < 2 * model.cfg.context + 1:
                start = max(0, t - max(c, 2 * model.cfg.context + 1))
            start -= start % VIDEO_TO_AUDIO
            vs = start // VIDEO_TO_AUDIO
            length = t - start
            tv = -(-length // VIDEO_TO_AUDIO)
            post = model.forward(audio[start:t], patches[:, vs:vs + tv], spk, miss_mask[:, vs:vs + tv]).posterior
            out[:, start:t] = post
    return _pad_time(out, audio.shape[0])


def infer(scene: Scene, model: AVSDModel, enrollment, cfg: PipelineConfig | None = None) -> np.ndarray:
    """Speaker activity posteriors [N, T] for the given enrollment (array or Enrollment)."""
    cfg = cfg or PipelineConfig()
    spk = enrollment.embeddings if isinstance(enrollment, Enrollment) else np.asarray(enrollment)
    return predict(model, scene.audio, scene.patches, scene.miss_mask, spk, cfg.chunk_frames)


# ---------------------------------------------------------------------------
# post-processing


def binarize(posterior: np.ndarray, threshold: float = 0.5) -> np.ndarray:
    if not 0.0 < threshold < 1.0:
        raise ConfigError(f"threshold {threshold} outside (0, 1)")
    return (np.asarray(posterior) >= threshold).astype(np.uint8)


def _frames(seconds: float) -> int:
    return int(round(seconds / FRAME_STEP))


def merge_and_filter_matrix(binary: np.ndarray, min_gap: float, min_duration: float) -> np.ndarray:
    """Per speaker: fill silences shorter than ``min_gap``, then drop runs shorter than ``min_duration``."""
    gap, dur = _frames(min_gap), _frames(min_duration)
    out = np.zeros_like(np.asarray(binary, dtype=np.uint8))
    for n, row in enumerate(np.asarray(binary)):
        merged: list[list[int]] = []
        for a, b in runs(row):
            if merged and a - merged[-1][1] < gap:
                merged[-1][1] = b
            else:
                merged.append([a, b])
        for a, b in merged:
            if b - a >= dur:
                out[n, a:b] = 1
    return out


def merge_and_filter(binary: np.ndarray, min_gap: float, min_duration: float, uri: str = "scene",
                     speakers=None) -> SegmentList:
    speakers = speakers or [f"spk{n:02d}" for n in range(len(binary))]
    mat = merge_and_filter_matrix(binary, min_gap, min_duration)
    return matrix_to_segments(mat, uri, speakers).validate()


def postprocess(posterior: np.ndarray, cfg: PipelineConfig) -> np.ndarray:
    return merge_and_filter_matrix(binarize(posterior, cfg.threshold), cfg.min_gap, cfg.min_duration)


def single_speaker_frames(binary: np.ndarray) -> list[np.ndarray]:
    solo = binary.sum(axis=0) == 1
    return [np.flatnonzero(solo & (row == 1)) for row in binary]


@dataclass
class IterationTrace:
    enrollments: list[np.ndarray]
    posteriors: list[np.ndarray]
    binaries: list[np.ndarray]


def enroll_iterate(scene: Scene, model: AVSDModel, cfg: PipelineConfig | None = None,
                   enrollment: np.ndarray | None = None, trace: IterationTrace | None = None) -> SegmentList:
    """Enrollment -> inference -> binarize -> merge, ``enroll_iters`` times.

    After each pass the embeddings are re-estimated from the frames where the
    hypothesis has exactly one active speaker.
    """
    cfg = cfg or PipelineConfig()
    emb = initial_enrollment(scene, model, cfg).embeddings if enrollment is None else np.asarray(enrollment)
    binary = None
    for it in range(cfg.enroll_iters):
        if it > 0:
            emb, _ = embed_frames(scene, model, single_speaker_frames(binary), previous=emb)
        post = infer(scene, model, emb, cfg)
        binary = postprocess(post, cfg)
        if trace is not None:
            trace.enrollments.append(emb)
            trace.posteriors.append(post)
            trace.binaries.append(binary)
    return matrix_to_segments(binary, scene.uri, scene.speakers).validate()


def diarize(scene: Scene, model: AVSDModel, cfg: PipelineConfig | None = None) -> SegmentList:
    return enroll_iterate(scene, model, cfg)


def degraded(scenes, spec, seed):
    """Apply ``spec`` to every scene with a per-scene seed derived from ``seed``."""
    from .synthcorpus import corrupt

    if spec is None:
        return list(scenes)
    return [corrupt(s, spec, int(np.random.SeedSequence([int(seed), 29, i]).generate_state(1)[0]))
            for i, s in enumerate(scenes)]


def evaluate(scenes, model: AVSDModel, cfg: PipelineConfig | None = None, spec=None, seed: int = 0):
    """Pooled DER over ``scenes`` (optionally degraded by ``spec``); returns (total, {uri: report})."""
    from .scoring import DERReport, der

    per = {}
    total = DERReport()
    for scene in degraded(scenes, spec, seed):
        rep = der(scene.reference(), diarize(scene, model, cfg))
        per[scene.uri] = rep
        total = total + rep
    return total, per
