"""Synthetic audio-visual meeting scenes.

A scene is N speakers following independent on/off turn chains. Each speaker
has a syllable-rate articulation track shared by both modalities: it scales the
speaker's spectral signature in the audio features and drives the mouth
opening drawn into a small lip patch. Speakers mix additively in the energy
domain (overlapped frames are sums of the single-speaker renderings plus a
noise floor); the stored features are the log of those energies, like FBANK.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.signal import lfilter

from . import frontend
from .errors import ConfigError, GenerationError
from .segments import load_rttm, matrix_to_segments, save_rttm, segments_to_matrix

FRAME_RATE = 100
VIDEO_FPS = 25
N_BINS = frontend.N_MELS
NOISE_FLOOR = 0.02  # per-bin mean of the background floor
SPEECH_FLOOR_ENERGY = 1.5  # frame energy (sum over bins) separating noise from speech
SILENT_JITTER = 0.015
PIXEL_NOISE = 2.0
MIN_SOLO_S = 1.0
CORRUPTION_MODES = ("zeros", "random_values", "swap_lips")
RESOLUTION_FACTORS = (1, 2, 4, 8)

# Overlap / speaker-count statistics of public AV diarization corpora and their
# reported lip-miss rates, usable as generator presets.
PRESETS = {
    "ami": {"target_overlap": 0.136, "speakers": (3, 4, 5), "miss_rate": 0.1188},
    "avdiar": {"target_overlap": 0.105, "speakers": (1, 2, 3, 4), "miss_rate": 0.0},
    "voxconverse": {"target_overlap": 0.036, "speakers": (2, 4, 6, 8), "miss_rate": 0.0},
    "ava-avd": {"target_overlap": 0.044, "speakers": (2, 4, 6, 8), "miss_rate": 0.2033},
    "msdwild": {"target_overlap": 0.14, "speakers": (2, 3, 4), "miss_rate": 0.1278},
    "misp": {"target_overlap": 0.258, "speakers": (2, 3, 4, 5, 6), "miss_rate": 0.0811},
}


@dataclass
class DegradationSpec:
    miss_rate: float = 0.0
    resolution_factor: int = 1
    corruption_mode: str = "zeros"
    audio_noise_snr: float | None = None

    def __post_init__(self):
        if not 0.0 <= self.miss_rate <= 1.0:
            raise ConfigError(f"miss_rate {self.miss_rate} outside [0, 1]")
        if self.resolution_factor not in RESOLUTION_FACTORS:
            raise ConfigError(f"resolution_factor must be one of {RESOLUTION_FACTORS}")
        if self.corruption_mode not in CORRUPTION_MODES:
            raise ConfigError(f"corruption_mode must be one of {CORRUPTION_MODES}")


@dataclass
class Scene:
    uri: str
    audio: np.ndarray  # [T, 40] float64
    visual: np.ndarray  # [N, T_v, H, W] uint8
    miss_mask: np.ndarray  # [N, T_v] bool, True = lip unavailable
    prototypes: np.ndarray  # [N, 40]
    labels: np.ndarray  # [N, T] uint8
    speakers: list[str] = field(default_factory=list)

    @property
    def n_speakers(self) -> int:
        return self.labels.shape[0]

    @property
    def num_frames(self) -> int:
        return self.audio.shape[0]

    @property
    def num_video_frames(self) -> int:
        return self.visual.shape[1]

    @property
    def patches(self) -> np.ndarray:
        """[N, T_v, P] flattened view of the lip patches."""
        n, tv = self.visual.shape[:2]
        return self.visual.reshape(n, tv, -1)

    def overlap_ratio(self) -> float:
        return overlap_ratio(self.labels)

    def reference(self):
        return matrix_to_segments(self.labels, self.uri, self.speakers)


def overlap_ratio(labels: np.ndarray) -> float:
    count = np.asarray(labels).sum(axis=0)
    speech = int((count >= 1).sum())
    return 0.0 if speech == 0 else float((count >= 2).sum()) / speech


def scene_lengths(duration_s: float) -> tuple[int, int]:
    """(audio frames, video frames) for a scene of the given length."""
    samples = int(round(duration_s * frontend.SAMPLE_RATE))
    return frontend.num_frames(samples), int(round(duration_s * VIDEO_FPS))


def _child(seed, *keys) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([int(seed), *map(int, keys)])))


# ---------------------------------------------------------------------------
# dialog structure


def _chain(rng, num_frames: int, mean_on: float, mean_off: float, start_on: bool) -> np.ndarray:
    row = np.zeros(num_frames, dtype=np.uint8)
    t, on = 0, start_on
    while t < num_frames:
        mean = mean_on if on else mean_off
        length = max(1, int(np.ceil(rng.exponential(mean * FRAME_RATE))))
        if on:
            row[t:t + length] = 1
        t += length
        on = not on
    return row


def _turns(rng, n: int, num_frames: int, mean_turn: float) -> list[tuple[int, int, int]]:
    """Floor-holder sequence (speaker, start, end): exponential turns and short pauses.

    The first n turns visit every speaker once so nobody is left out.
    """
    turns = []
    t = int(rng.exponential(0.5 * FRAME_RATE))
    order = list(rng.permutation(n))
    prev = -1
    spoken = np.zeros(n)
    while t < num_frames:
        k = len(turns)
        if k < n:
            spk = int(order[k])
        else:
            # favour speakers who have held the floor least
            weight = 1.0 / (1.0 + spoken / FRAME_RATE)
            weight[prev] = 0.0
            spk = int(rng.choice(n, p=weight / weight.sum()))
        length = max(20, int(np.ceil(rng.exponential(mean_turn * FRAME_RATE))))
        end = min(t + length, num_frames)
        turns.append((spk, t, end))
        spoken[spk] += end - t
        prev = spk
        t += length + max(1, int(np.ceil(rng.exponential(0.4 * FRAME_RATE))))
    return turns


def _turn_dialog(rng, n: int, num_frames: int, mean_turn: float, target: float) -> np.ndarray | None:
    """Turn-taking plus interjections sized so the overlap ratio lands on ``target``.

    Interjections sit inside another speaker's turn, so they add overlap without
    adding speech time; turns are visited in random order, each contributing a
    random 30-90 % of its length until the overlap budget is spent.
    """
    labels = np.zeros((n, num_frames), dtype=np.uint8)
    turns = _turns(rng, n, num_frames, mean_turn)
    for spk, a, b in turns:
        labels[spk, a:b] = 1
    budget = int(round(target * int((labels.sum(axis=0) > 0).sum())))
    for i in rng.permutation(len(turns)):
        if budget <= 0:
            break
        spk, a, b = turns[i]
        span = min(budget, max(1, int(round((b - a) * rng.uniform(0.3, 0.9)))))
        start = a + int(rng.integers(0, b - a - span + 1))
        other = int(rng.integers(n - 1))
        other += other >= spk
        labels[other, start:start + span] = 1
        budget -= span
    return labels if budget <= 0 else None


def _solo_frames(labels: np.ndarray) -> np.ndarray:
    return ((labels == 1) & (labels.sum(axis=0) == 1)).sum(axis=1)


def gen_dialog(n_speakers: int, duration_s: float, target_overlap: float, seed,
               mean_turn: float = 2.0, tolerance: float = 0.05, max_tries: int = 100,
               min_solo_s: float = MIN_SOLO_S) -> np.ndarray:
    """Binary activity matrix [N, T] whose overlap ratio is within ``tolerance`` of the target."""
    if n_speakers < 1:
        raise ConfigError("n_speakers must be >= 1")
    if not 0.0 <= target_overlap <= 0.6:
        raise ConfigError(f"target_overlap {target_overlap} outside [0, 0.6]")
    num_frames, _ = scene_lengths(duration_s)
    rng = _child(seed, 101)
    min_solo = int(min_solo_s * FRAME_RATE)
    if n_speakers == 1 and target_overlap > tolerance:
        raise GenerationError("a single speaker cannot overlap")
    for _ in range(max_tries):
        if n_speakers == 1:
            labels = _chain(rng, num_frames, mean_turn, mean_turn * 0.6, bool(rng.random() < 0.6))[None]
        else:
            labels = _turn_dialog(rng, n_speakers, num_frames, mean_turn, target_overlap)
            if labels is None:
                continue
        ov = overlap_ratio(labels)
        if target_overlap == 0.0 and ov > 0:
            continue
        if abs(ov - target_overlap) <= tolerance and (_solo_frames(labels) >= min_solo).all():
            return labels
    raise GenerationError(f"could not reach overlap {target_overlap} with {n_speakers} speakers "
                          f"in {max_tries} draws")


# ---------------------------------------------------------------------------
# speakers and articulation


def speaker_pool(seed, size: int = 16, dim: int = N_BINS, max_cosine: float = 0.5) -> np.ndarray:
    """[size, dim] unit-norm nonnegative spectral signatures with bounded pairwise cosine."""
    rng = _child(seed, 202)
    bins = np.arange(dim)
    out: list[np.ndarray] = []
    for _ in range(400 * size):
        v = np.full(dim, 0.02)
        for _ in range(3):
            c = rng.uniform(0, dim - 1)
            w = rng.uniform(0.8, 1.8)
            v += rng.uniform(0.5, 1.0) * np.exp(-0.5 * ((bins - c) / w) ** 2)
        v /= np.linalg.norm(v)
        if all(float(v @ u) < max_cosine for u in out):
            out.append(v)
            if len(out) == size:
                return np.stack(out)
    raise GenerationError(f"could not draw {size} speakers with cosine < {max_cosine}")


def _ar1(rng, n: int, rho: float, burn: int = 200) -> np.ndarray:
    """Unit-variance AR(1) sequence, started from its stationary regime."""
    e = rng.standard_normal(n + burn) * np.sqrt(1.0 - rho * rho)
    return lfilter([1.0], [1.0, -rho], e)[burn:]


def articulation(labels: np.ndarray, seed) -> np.ndarray:
    """[N, 4*T_v'] syllable-like opening in [0, 1], on the audio frame grid.

    A raised cosine whose rate wanders around 3-5 Hz (log-normal AR(1) jitter,
    0.15 s correlation) under a slowly varying amplitude, so that windows
    a fraction of a second apart are nearly uncorrelated. The grid is long
    enough to cover both the audio frames and the repeated video frames.
    """
    n, t = labels.shape
    grid = int(np.ceil(t / 4.0)) * 4 + 4
    rng = _child(seed, 303)
    out = np.empty((n, grid))
    for i in range(n):
        f0 = rng.uniform(3.0, 5.0)
        rate = f0 * np.exp(0.4 * _ar1(rng, grid, np.exp(-1.0 / 15.0)))
        phase = rng.uniform(0, 2 * np.pi) + np.cumsum(2 * np.pi * rate / FRAME_RATE)
        amp = np.clip(0.7 + 0.25 * _ar1(rng, grid, np.exp(-1.0 / 20.0)), 0.2, 1.0)
        out[i] = amp * (0.5 - 0.5 * np.cos(phase))
    return out


def render_audio(labels: np.ndarray, prototypes: np.ndarray, seed) -> frontend.AudioFeatures:
    """Log of (sum of active speakers' signatures plus a noise floor)."""
    n, t = labels.shape
    rng = _child(seed, 404)
    art = articulation(labels, seed)[:, :t]
    gain = rng.uniform(0.8, 1.2, size=(n, 1))
    envelope = labels * gain * (0.3 + 0.7 * art)  # [N, T]
    speech = envelope.T @ prototypes  # [T, 40]
    noise = NOISE_FLOOR * (1.0 + 0.5 * np.abs(rng.standard_normal((t, prototypes.shape[1]))))
    return frontend.AudioFeatures(np.log(speech + noise))


def frame_energy(audio: np.ndarray) -> np.ndarray:
    """Per-frame energy (sum over bins) of log-energy features."""
    return np.exp(np.asarray(audio, dtype=np.float64)).sum(axis=-1)


def speech_energy(labels: np.ndarray, prototypes: np.ndarray, seed) -> np.ndarray:
    """Noise-free energy-domain rendering, used to check additivity."""
    n, t = labels.shape
    rng = _child(seed, 404)
    art = articulation(labels, seed)[:, :t]
    gain = rng.uniform(0.8, 1.2, size=(n, 1))
    return (labels * gain * (0.3 + 0.7 * art)).T @ prototypes


def mouth_openings(labels: np.ndarray, seed, num_video_frames: int) -> np.ndarray:
    """[N, T_v] opening per video frame: articulation while speaking, small jitter otherwise."""
    n, t = labels.shape
    art = articulation(labels, seed)
    padded = np.zeros((n, art.shape[1]))
    padded[:, :t] = labels
    padded[:, t:] = labels[:, -1:]
    grid = 4 * num_video_frames
    act = (padded[:, :grid] * art[:, :grid]).reshape(n, num_video_frames, 4).mean(axis=2)
    rng = _child(seed, 505)
    return np.clip(act + np.abs(rng.normal(0.0, SILENT_JITTER, act.shape)), 0.0, 1.0)


def draw_patches(openings: np.ndarray, seed, size: int = 24) -> np.ndarray:
    """Render mouth openings [N, T_v] into uint8 lip patches [N, T_v, size, size]."""
    n, tv = openings.shape
    rng = _child(seed, 606)
    skin = rng.uniform(130, 200, size=(n, 1, 1, 1))
    lip = rng.uniform(60, 110, size=(n, 1, 1, 1))
    c = (np.arange(size) - (size - 1) / 2.0) / size
    yy, xx = c[:, None], c[None, :]
    half_w = 0.30
    mouth_h = (0.02 + 0.22 * openings)[:, :, None, None]
    ring = (xx / (half_w + 0.07)) ** 2 + (yy / (mouth_h + 0.07)) ** 2 <= 1.0
    inner = (xx / half_w) ** 2 + (yy / mouth_h) ** 2 <= 1.0
    img = np.where(inner, 25.0, np.where(ring, lip, skin))
    img = img + rng.normal(0.0, PIXEL_NOISE, img.shape)
    return np.clip(np.round(img), 0, 255).astype(np.uint8)


def render_visual(labels: np.ndarray, seed, num_video_frames: int | None = None, size: int = 24):
    """Lip patches and an all-false miss mask."""
    if num_video_frames is None:
        num_video_frames = int(np.ceil(labels.shape[1] / 4.0))
    openings = mouth_openings(labels, seed, num_video_frames)
    patches = draw_patches(openings, seed, size)
    return patches, np.zeros(openings.shape, dtype=bool)


def make_scene(uri: str, n_speakers: int, duration_s: float, target_overlap: float, seed,
               pool: np.ndarray, patch_size: int = 24) -> Scene:
    rng = _child(seed, 707)
    ids = np.sort(rng.choice(len(pool), size=n_speakers, replace=False))
    protos = pool[ids] * (1.0 + 0.05 * rng.standard_normal((n_speakers, pool.shape[1])))
    protos = np.abs(protos)
    protos /= np.linalg.norm(protos, axis=1, keepdims=True)
    labels = gen_dialog(n_speakers, duration_s, target_overlap, seed)
    _, tv = scene_lengths(duration_s)
    audio = render_audio(labels, protos, seed)
    visual, mask = render_visual(labels, seed, tv, patch_size)
    return Scene(uri, audio.frames, visual, mask, protos, labels, [f"spk{int(i):02d}" for i in ids])


# ---------------------------------------------------------------------------
# degradation


def blur_patches(visual: np.ndarray, factor: int) -> np.ndarray:
    """Block-average downsample by ``factor`` then nearest-neighbour upsample."""
    if factor == 1:
        return visual
    *lead, h, w = visual.shape
    if h % factor or w % factor:
        raise ConfigError(f"patch {h}x{w} not divisible by resolution factor {factor}")
    blocks = visual.reshape(*lead, h // factor, factor, w // factor, factor).astype(np.float64)
    low = np.round(blocks.mean(axis=(-3, -1)))
    up = np.repeat(np.repeat(low, factor, axis=-2), factor, axis=-1)
    return up.astype(np.uint8)


def degrade_visual(visual: np.ndarray, mask: np.ndarray, miss_rate: float, mode: str,
                   resolution_factor: int, rng: np.random.Generator):
    """Array-level core of ``corrupt``: returns new (visual, mask)."""
    vis = blur_patches(visual, resolution_factor).copy()
    mask = mask.copy()
    n, tv = mask.shape
    k = int(round(miss_rate * n * tv))
    if k == 0:
        return vis, mask
    cells = rng.choice(n * tv, size=k, replace=False)
    spk, frm = np.unravel_index(np.sort(cells), (n, tv))
    if mode == "zeros":
        vis[spk, frm] = 0
        mask[spk, frm] = True
    elif mode == "random_values":
        vis[spk, frm] = rng.integers(0, 256, size=(k,) + vis.shape[2:], dtype=np.uint8)
    elif mode == "swap_lips":
        src = vis.copy()
        if n > 1:
            other = (spk + rng.integers(1, n, size=k)) % n
            vis[spk, frm] = src[other, frm]
        else:
            shift = rng.integers(1, max(tv, 2), size=k)
            vis[spk, frm] = src[spk, (frm + shift) % tv]
    else:
        raise ConfigError(f"unknown corruption mode {mode!r}")
    return vis, mask


def add_audio_noise(audio: np.ndarray, snr_db: float, rng: np.random.Generator) -> np.ndarray:
    """Mix white noise into log-energy features at ``snr_db`` below the mean bin energy."""
    energy = np.exp(audio)
    level = float(energy.mean()) / 10.0 ** (snr_db / 10.0)
    return np.log(energy + level * rng.exponential(1.0, size=audio.shape))


def corrupt(scene: Scene, spec: DegradationSpec, seed) -> Scene:
    rng = _child(seed, 808)
    if spec.miss_rate == 0 and spec.resolution_factor == 1 and spec.audio_noise_snr is None:
        return replace(scene, visual=scene.visual.copy(), miss_mask=scene.miss_mask.copy(),
                       audio=scene.audio.copy())
    vis, mask = degrade_visual(scene.visual, scene.miss_mask, spec.miss_rate, spec.corruption_mode,
                               spec.resolution_factor, rng)
    audio = scene.audio.copy()
    if spec.audio_noise_snr is not None:
        audio = add_audio_noise(audio, spec.audio_noise_snr, rng)
    return replace(scene, audio=audio, visual=vis, miss_mask=mask)


# ---------------------------------------------------------------------------
# corpus and serialization


@dataclass
class CorpusConfig:
    n_train: int = 200
    n_dev: int = 8
    n_eval: int = 16
    duration_s: float = 30.0
    speakers: tuple[int, ...] = (2, 3, 4)
    target_overlap: float = 0.2
    pool_size: int = 16
    patch_size: int = 24
    miss_rate: float = 0.0

    def split_sizes(self) -> dict[str, int]:
        return {"train": self.n_train, "dev": self.n_dev, "eval": self.n_eval}


SPLITS = ("train", "dev", "eval")


def generate_split(cfg: CorpusConfig, split: str, seed) -> list[Scene]:
    pool = speaker_pool(seed, cfg.pool_size)
    split_idx = SPLITS.index(split)
    scenes = []
    for i in range(cfg.split_sizes()[split]):
        scene_seed = int(np.random.SeedSequence([int(seed), 17, split_idx, i]).generate_state(1)[0])
        n = cfg.speakers[i % len(cfg.speakers)]
        scene = make_scene(f"{split}_{i:04d}", n, cfg.duration_s, cfg.target_overlap, scene_seed, pool,
                           cfg.patch_size)
        if cfg.miss_rate > 0:
            scene = corrupt(scene, DegradationSpec(miss_rate=cfg.miss_rate), scene_seed)
        scenes.append(scene)
    return scenes


VISUAL_MAGIC = b"QAVV"


def save_scene(scene: Scene, directory) -> None:
    """Write one scene directory.

    ``visual.bin``: magic b"QAVV", then little-endian u32 version (=1), N, T_v, H, W,
    then N*T_v*H*W uint8 pixels (row-major), then N*T_v uint8 miss flags.
    """
    os.makedirs(directory, exist_ok=True)
    np.savetxt(os.path.join(directory, "audio.csv"), scene.audio, delimiter=",", fmt="%.17g")
    n, tv, h, w = scene.visual.shape
    header = VISUAL_MAGIC + np.array([1, n, tv, h, w], dtype="<u4").tobytes()
    with open(os.path.join(directory, "visual.bin"), "wb") as fh:
        fh.write(header)
        fh.write(np.ascontiguousarray(scene.visual, dtype=np.uint8).tobytes())
        fh.write(scene.miss_mask.astype(np.uint8).tobytes())
    save_rttm(scene.reference(), os.path.join(directory, "labels.rttm"))
    meta = {
        "uri": scene.uri,
        "n_speakers": str(n),
        "num_frames": str(scene.num_frames),
        "num_video_frames": str(tv),
        "speakers": ",".join(scene.speakers),
        "overlap_ratio": f"{scene.overlap_ratio():.6f}",
    }
    for i, row in enumerate(scene.prototypes):
        meta[f"prototype.{i}"] = ",".join(f"{v:.17g}" for v in row)
    with open(os.path.join(directory, "meta.txt"), "w", encoding="utf-8") as fh:
        for k, v in meta.items():
            fh.write(f"{k} = {v}\n")


def read_meta(path) -> dict[str, str]:
    meta = {}
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            k, _, v = line.partition("=")
            meta[k.strip()] = v.strip()
    return meta


def load_scene(directory) -> Scene:
    meta = read_meta(os.path.join(directory, "meta.txt"))
    audio = np.loadtxt(os.path.join(directory, "audio.csv"), delimiter=",", ndmin=2)
    with open(os.path.join(directory, "visual.bin"), "rb") as fh:
        blob = fh.read()
    if blob[:4] != VISUAL_MAGIC:
        raise ValueError(f"{directory}: visual.bin has bad magic")
    _, n, tv, h, w = np.frombuffer(blob, dtype="<u4", count=5, offset=4)
    off = 24
    size = int(n * tv * h * w)
    visual = np.frombuffer(blob, dtype=np.uint8, count=size, offset=off).reshape(n, tv, h, w).copy()
    mask = np.frombuffer(blob, dtype=np.uint8, count=int(n * tv), offset=off + size).reshape(n, tv) > 0
    speakers = meta["speakers"].split(",")
    protos = np.array([[float(x) for x in meta[f"prototype.{i}"].split(",")] for i in range(int(n))])
    labels = segments_to_matrix(load_rttm(os.path.join(directory, "labels.rttm")), speakers,
                                audio.shape[0])
    return Scene(meta["uri"], audio, visual, mask, protos, labels, speakers)
