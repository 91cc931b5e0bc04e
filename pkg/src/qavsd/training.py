"""Losses, training-pair sampling and the three-stage optimization schedule.

Stage 1 trains the encoders with a contrastive loss on lip-sync pairs. Stage 2
freezes them and trains the fusion blocks, cross-speaker layers and head on
per-frame BCE. Stage 3 unfreezes everything and optimizes ``lam * J_C + J_AV``
at a smaller learning rate with visual corruption augmentation.
"""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass, field, replace

import numpy as np

from . import numerics as nx
from .encoders import MIN_ENROLL_FRAMES
from .errors import ConfigError, SamplingError, TrainingError
from .exchange import BACKEND_PREFIXES, ENCODER_PREFIXES, VVAD_PREFIXES, AVSDModel
from .frontend import VIDEO_TO_AUDIO
from .fusion import sync_distance, sync_weight
from .synthcorpus import CORRUPTION_MODES, FRAME_RATE, VIDEO_FPS, Scene, degrade_visual

LOG_FIELDS = ("stage", "epoch", "loss", "j_c", "j_av", "vvad", "val_loss", "w_genuine", "w_false")


@dataclass
class TrainConfig:
    margin: float = 1.0
    lam: float = 0.1  # weight of the contrastive term in stage 3
    lr1: float = 1e-3
    lr2: float = 1e-3
    lr3: float = 1e-4
    epochs1: int = 10
    epochs2: int = 5
    epochs3: int = 12
    batch: int = 8  # scenes per step
    steps_per_epoch: int = 25
    chunk_s: float = 1.0  # stage 2/3 training chunk length
    pairs_per_scene: int = 4
    pair_window_s: float = 1.0
    pair_min_active: float = 0.9  # fraction of a pair window the audio-side speaker must be talking
    shift_min_s: float = 0.5
    shift_max_s: float = 2.0
    corrupt_pairs: bool = True  # corrupted lips (zeros / random pixels) also count as false pairs
    enroll_frames: int = 64
    augment: bool = True
    augment_prob: float = 0.5
    val_pairs_per_scene: int = 8
    seed: int = 0

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.lam < 0:
            raise ConfigError("lambda must be >= 0")
        if self.margin <= 0:
            raise ConfigError("margin must be positive")
        if min(self.lr1, self.lr2, self.lr3) <= 0:
            raise ConfigError("learning rates must be positive")
        if self.lr3 > self.lr2:
            raise ConfigError(f"stage-3 lr ({self.lr3}) must not exceed stage-2 lr ({self.lr2})")
        if not 0 < self.shift_min_s <= self.shift_max_s:
            raise ConfigError("need 0 < shift_min_s <= shift_max_s")
        if min(self.batch, self.steps_per_epoch, self.pairs_per_scene, self.enroll_frames) < 1:
            raise ConfigError("batch, steps_per_epoch, pairs_per_scene and enroll_frames must be >= 1")
        if min(self.epochs1, self.epochs2, self.epochs3) < 0:
            raise ConfigError("epochs must be >= 0")
        if not 0.0 <= self.augment_prob <= 1.0:
            raise ConfigError("augment_prob outside [0, 1]")
        if self.chunk_frames < 4 * VIDEO_TO_AUDIO or self.window_frames < 4 * VIDEO_TO_AUDIO:
            raise ConfigError("chunk and pair windows must span at least 4 video frames")

    @staticmethod
    def _frames(seconds: float) -> int:
        return int(round(seconds * FRAME_RATE)) // VIDEO_TO_AUDIO * VIDEO_TO_AUDIO

    @property
    def chunk_frames(self) -> int:
        return self._frames(self.chunk_s)

    @property
    def window_frames(self) -> int:
        return self._frames(self.pair_window_s)


# ---------------------------------------------------------------------------
# losses


def contrastive_loss(dist, z, margin: float = 1.0) -> nx.Tensor:
    """Mean over frames of ``z L^2 + (1 - z) max(margin - L, 0)^2``.

    ``dist`` is the windowed sync distance [..., T]; ``z`` broadcasts against it
    (one label per pair is the usual case).
    """
    if margin <= 0:
        raise ConfigError("margin must be positive")
    dist = nx.as_tensor(dist)
    z = np.asarray(z, dtype=np.float64)
    hinge = nx.relu(nx.sub(margin, dist))
    per = nx.square(dist) * z + nx.square(hinge) * (1.0 - z)
    return nx.mean_axis(per)


def bce_loss(labels, posterior) -> nx.Tensor:
    """Mean binary cross entropy between 0/1 labels and posteriors in (0, 1)."""
    p = nx.as_tensor(posterior)
    y = np.asarray(labels, dtype=np.float64)
    per = nx.log(p) * y + nx.log(nx.sub(1.0, p)) * (1.0 - y)
    return nx.mul(nx.mean_axis(per), -1.0)


def joint_loss(j_c, j_av, lam: float = 0.1) -> nx.Tensor:
    return nx.add(nx.mul(j_c, lam), j_av)


# ---------------------------------------------------------------------------
# sampling


def enroll_stack(audio: np.ndarray, frames: np.ndarray, context: int) -> np.ndarray:
    """Context-stacked rows [K, (2c+1)F] for selected frames, edge-replicated."""
    t = audio.shape[0]
    cols = [audio[np.clip(frames + k, 0, t - 1)] for k in range(-context, context + 1)]
    return np.concatenate(cols, axis=-1)


def enrollment_frames(labels: np.ndarray, n: int, k: int, rng: np.random.Generator) -> np.ndarray:
    """``k`` frames of oracle solo speech for speaker ``n`` (all of its speech if solo is scarce)."""
    row = labels[n] == 1
    solo = np.flatnonzero(row & (labels.sum(axis=0) == 1))
    pool = solo if solo.size >= MIN_ENROLL_FRAMES else np.flatnonzero(row)
    if pool.size == 0:
        raise SamplingError(f"speaker {n} never speaks; cannot enroll")
    return np.sort(rng.choice(pool, size=k, replace=pool.size < k))


def oracle_enrollment(scene: Scene, k: int, context: int, rng: np.random.Generator) -> np.ndarray:
    """[N, K, (2c+1)F] stacked frames for every speaker of the scene."""
    return np.stack([enroll_stack(scene.audio, enrollment_frames(scene.labels, n, k, rng), context)
                     for n in range(scene.n_speakers)])


@dataclass
class ContrastiveBatch:
    audio: np.ndarray  # [P, W, F] audio window
    patches: np.ndarray  # [P, W/4, pixels] uint8 visual window
    enroll: np.ndarray  # [P, K, (2c+1)F] enrollment frames of the audio-side speaker
    z: np.ndarray  # [P] 1 = genuine
    kind: list[str] = field(default_factory=list)  # genuine / shift / swap / corrupt
    speaker: np.ndarray | None = None  # [P] audio-side speaker index
    start: np.ndarray | None = None  # [P] audio window start frame
    visual_start: np.ndarray | None = None  # [P] video frame of the visual window
    visual_speaker: np.ndarray | None = None  # [P]

    def __len__(self) -> int:
        return len(self.z)

    @staticmethod
    def concat(batches: list["ContrastiveBatch"]) -> "ContrastiveBatch":
        cat = lambda name: np.concatenate([getattr(b, name) for b in batches])  # noqa: E731
        return ContrastiveBatch(cat("audio"), cat("patches"), cat("enroll"), cat("z"),
                                sum((b.kind for b in batches), []), cat("speaker"), cat("start"),
                                cat("visual_start"), cat("visual_speaker"))


def _active_window(rng, row: np.ndarray, width: int, last_start: int, min_active: float,
                   tries: int = 256) -> int:
    act = np.flatnonzero(row)
    best, best_frac = None, -1.0
    for _ in range(tries):
        c = int(rng.choice(act))
        start = min(max(0, c - width // 2), last_start) // VIDEO_TO_AUDIO * VIDEO_TO_AUDIO
        frac = row[start:start + width].mean()
        if frac >= min_active:
            return start
        if frac > best_frac:
            best, best_frac = start, frac
    if best_frac >= 0.5:
        return best
    raise SamplingError("no window with enough speech for this speaker")


def sample_pairs(scene: Scene, seed, cfg: TrainConfig | None = None, n_pairs: int | None = None,
                 context: int = 2) -> ContrastiveBatch:
    """Alternating genuine / false lip-sync pairs from one scene.

    Genuine: speaker n's audio-side window with speaker n's lips, aligned; the
    window is centred on frames where n speaks, overlapped speech included.
    False: the same audio window paired with n's lips shifted by
    +-[shift_min_s, shift_max_s], with another speaker's lips, or (when
    ``corrupt_pairs``) with n's aligned lips blanked to zeros or random pixels.
    A corrupted visual stream is out of sync by definition, so the learned
    distance doubles as a quality score.
    """
    cfg = cfg or TrainConfig()
    n_pairs = cfg.pairs_per_scene if n_pairs is None else n_pairs
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([int(seed), 31])))
    w = cfg.window_frames
    wv = w // VIDEO_TO_AUDIO
    n_spk, tv = scene.n_speakers, scene.num_video_frames
    last_start = min(scene.num_frames - w, VIDEO_TO_AUDIO * (tv - wv))
    speech = scene.labels.sum(axis=1)
    eligible = np.flatnonzero(speech >= w)
    if last_start < 0 or eligible.size == 0:
        raise SamplingError(f"{scene.uri}: no speaker has {cfg.pair_window_s} s of speech")
    lo = int(np.ceil(cfg.shift_min_s * VIDEO_FPS - 1e-9))
    hi = int(np.floor(cfg.shift_max_s * VIDEO_FPS + 1e-9))
    patches = scene.patches
    out = {k: [] for k in ("audio", "patches", "enroll", "z", "kind", "speaker", "start", "vstart", "vspk")}
    for i in range(n_pairs):
        genuine = i % 2 == 0
        n = int(rng.choice(eligible))
        start = _active_window(rng, scene.labels[n], w, last_start, cfg.pair_min_active)
        vs, vspk, kind = start // VIDEO_TO_AUDIO, n, "genuine"
        corrupt = None
        if not genuine:
            kinds = ["shift"] + (["swap"] if n_spk > 1 else []) + (["corrupt"] if cfg.corrupt_pairs else [])
            kind = kinds[int(rng.integers(len(kinds)))]
            if kind == "swap":
                vspk = int((n + rng.integers(1, n_spk)) % n_spk)
            elif kind == "corrupt":
                corrupt = "zeros" if rng.random() < 0.5 else "random_values"
            else:
                for _ in range(64):
                    off = int(rng.integers(lo, hi + 1)) * (1 if rng.random() < 0.5 else -1)
                    if 0 <= vs + off <= tv - wv:
                        vs += off
                        break
                else:
                    raise SamplingError(f"{scene.uri}: scene too short for a shifted pair")
        out["audio"].append(scene.audio[start:start + w])
        lips = patches[vspk, vs:vs + wv]
        if corrupt == "zeros":
            lips = np.zeros_like(lips)
        elif corrupt == "random_values":
            lips = rng.integers(0, 256, size=lips.shape, dtype=np.uint8)
        out["patches"].append(lips)
        out["enroll"].append(enroll_stack(scene.audio, enrollment_frames(scene.labels, n, cfg.enroll_frames, rng),
                                          context))
        out["z"].append(1.0 if genuine else 0.0)
        out["kind"].append(kind)
        out["speaker"].append(n)
        out["start"].append(start)
        out["vstart"].append(vs)
        out["vspk"].append(vspk)
    return ContrastiveBatch(np.stack(out["audio"]), np.stack(out["patches"]), np.stack(out["enroll"]),
                            np.array(out["z"]), out["kind"], np.array(out["speaker"]), np.array(out["start"]),
                            np.array(out["vstart"]), np.array(out["vspk"]))


def contrastive_streams(model: AVSDModel, batch: ContrastiveBatch):
    """(E_IA, E_V) for a pair batch, both [P, 1, W, D]."""
    w = batch.audio.shape[1]
    e_a = model.audio(batch.audio)
    spk = model.embed_speakers_stacked(batch.enroll[:, None])
    e_ia = model.fuse(e_a, spk)
    e_v = model.encode_visual(batch.patches[:, None], None, w)
    return e_ia, e_v


def pair_distance(model: AVSDModel, batch: ContrastiveBatch) -> nx.Tensor:
    e_ia, e_v = contrastive_streams(model, batch)
    return sync_distance(e_ia, e_v, model.cfg.sync_window)


def contrastive_objective(model: AVSDModel, batch: ContrastiveBatch, margin: float) -> nx.Tensor:
    return contrastive_loss(pair_distance(model, batch), batch.z[:, None, None], margin)


@dataclass
class ChunkBatch:
    audio: np.ndarray  # [B, T, F]
    patches: np.ndarray  # [B, N, T/4, pixels] uint8
    mask: np.ndarray  # [B, N, T/4]
    labels: np.ndarray  # [B, N, T]
    enroll: np.ndarray  # [B, N, K, (2c+1)F]


def augment_visual(patches: np.ndarray, mask: np.ndarray, rng: np.random.Generator, prob: float = 0.5):
    """With probability ``prob``, corrupt a uniform-random fraction of frames with a random mode."""
    if rng.random() >= prob:
        return patches, mask
    mode = CORRUPTION_MODES[int(rng.integers(len(CORRUPTION_MODES)))]
    rate = float(rng.random())
    n, tv, pix = patches.shape
    vis, mask = degrade_visual(patches.reshape(n, tv, pix, 1), mask, rate, mode, 1, rng)
    return vis.reshape(n, tv, pix), mask


def sample_chunks(scenes: list[Scene], rng: np.random.Generator, cfg: TrainConfig, context: int = 2,
                  augment: bool = False) -> ChunkBatch:
    """One random chunk from each scene; all scenes must share the speaker count."""
    if len({s.n_speakers for s in scenes}) != 1:
        raise SamplingError("a chunk batch needs scenes with the same speaker count")
    t = cfg.chunk_frames
    tv = t // VIDEO_TO_AUDIO
    cols = {k: [] for k in ("audio", "patches", "mask", "labels", "enroll")}
    for s in scenes:
        last = min(s.num_frames - t, VIDEO_TO_AUDIO * (s.num_video_frames - tv))
        if last < 0:
            raise SamplingError(f"{s.uri} shorter than the training chunk")
        start = int(rng.integers(0, last // VIDEO_TO_AUDIO + 1)) * VIDEO_TO_AUDIO
        vs = start // VIDEO_TO_AUDIO
        patches = s.patches[:, vs:vs + tv]
        mask = s.miss_mask[:, vs:vs + tv]
        if augment:
            patches, mask = augment_visual(patches, mask, rng, cfg.augment_prob)
        cols["audio"].append(s.audio[start:start + t])
        cols["patches"].append(patches)
        cols["mask"].append(mask)
        cols["labels"].append(s.labels[:, start:start + t])
        cols["enroll"].append(oracle_enrollment(s, cfg.enroll_frames, context, rng))
    return ChunkBatch(*(np.stack(cols[k]) for k in ("audio", "patches", "mask", "labels", "enroll")))


def group_by_speakers(scenes: list[Scene]) -> dict[int, list[int]]:
    groups: dict[int, list[int]] = {}
    for i, s in enumerate(scenes):
        groups.setdefault(s.n_speakers, []).append(i)
    return dict(sorted(groups.items()))


def pick_batch(groups: dict[int, list[int]], batch: int, rng: np.random.Generator) -> list[int]:
    """Scene indices of one equal-speaker-count batch; groups are drawn by size."""
    keys = list(groups)
    sizes = np.array([len(groups[k]) for k in keys], dtype=np.float64)
    members = groups[keys[int(rng.choice(len(keys), p=sizes / sizes.sum()))]]
    return [members[i] for i in rng.choice(len(members), size=batch, replace=len(members) < batch)]


# ---------------------------------------------------------------------------
# objectives


def chunk_forward(model: AVSDModel, b: ChunkBatch):
    spk = model.embed_speakers_stacked(b.enroll)
    return model.forward(b.audio, b.patches, spk, b.mask)


def supervised_losses(model: AVSDModel, b: ChunkBatch):
    """(J_AV, V-VAD loss, forward result); the V-VAD head sees a detached visual stream."""
    res = chunk_forward(model, b)
    j_av = nx.bce_with_logits(res.logits, b.labels)
    vvad = nx.bce_with_logits(model.vvad.logits(nx.detach(res.e_v)), b.labels)
    return j_av, vvad, res


def _finite(*values: float) -> bool:
    return all(np.isfinite(v) for v in values)


# ---------------------------------------------------------------------------
# stages


class Trainer:
    """Runs the stages on one model, logging a CSV row per epoch and checkpointing per stage."""

    def __init__(self, model: AVSDModel, train: list[Scene], dev: list[Scene], cfg: TrainConfig,
                 out_dir: str | None = None, log_path: str | None = None, verbose: bool = False):
        self.model, self.train, self.dev, self.cfg = model, train, dev, cfg
        self.out_dir = out_dir
        self.log_path = log_path or (os.path.join(out_dir, "train_log.csv") if out_dir else None)
        self.verbose = verbose
        self.rows: list[dict] = []
        self._good = model.params.snapshot()
        self._val_pairs = None
        self._val_chunks = None
        if self.log_path:
            os.makedirs(os.path.dirname(os.path.abspath(self.log_path)), exist_ok=True)
            if os.path.exists(self.log_path):
                os.remove(self.log_path)

    # -- bookkeeping ------------------------------------------------------

    def _rng(self, stage: int, epoch: int) -> np.random.Generator:
        return np.random.Generator(np.random.PCG64(np.random.SeedSequence([self.cfg.seed, 7, stage, epoch])))

    def _log(self, row: dict) -> None:
        row = {k: row.get(k, "") for k in LOG_FIELDS}
        self.rows.append(row)
        if self.verbose:
            print(" ".join(f"{k}={v:.5g}" if isinstance(v, float) else f"{k}={v}" for k, v in row.items()),
                  flush=True)
        if self.log_path:
            new = not os.path.exists(self.log_path)
            with open(self.log_path, "a", newline="", encoding="utf-8") as fh:
                w = csv.DictWriter(fh, fieldnames=LOG_FIELDS, lineterminator="\n")
                if new:
                    w.writeheader()
                w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})

    def _checkpoint(self, name: str) -> str | None:
        self._good = self.model.params.snapshot()
        if not self.out_dir:
            return None
        os.makedirs(self.out_dir, exist_ok=True)
        path = os.path.join(self.out_dir, name)
        self.model.save(path)
        return path

    def _diverged(self, stage: int, epoch: int):
        self.model.params.restore(self._good)
        path = None
        if self.out_dir:
            path = os.path.join(self.out_dir, "last_good.ckpt")
            self.model.save(path)
        raise TrainingError(f"loss became non-finite in stage {stage}, epoch {epoch}", checkpoint=path)

    def _set_trainable(self, prefixes) -> None:
        ps = self.model.params
        ps.freeze()
        ps.unfreeze(prefixes)
        ps.reset_optimizer()

    # -- validation -------------------------------------------------------

    def validation_pairs(self) -> ContrastiveBatch:
        """Held-out genuine / shift / swap pairs; corrupted lips are left out so W measures sync alone."""
        if self._val_pairs is None:
            ctx = self.model.cfg.context
            cfg = replace(self.cfg, corrupt_pairs=False)
            self._val_pairs = ContrastiveBatch.concat([
                sample_pairs(s, 1000 + i, cfg, self.cfg.val_pairs_per_scene, ctx)
                for i, s in enumerate(self.dev)])
        return self._val_pairs

    def sync_metrics(self) -> dict:
        b = self.validation_pairs()
        with nx.no_grad():
            dist = pair_distance(self.model, b)
            loss = contrastive_loss(dist, b.z[:, None, None], self.cfg.margin)
            w = sync_weight(dist, self.model.cfg.sync_m).data.mean(axis=(1, 2))
        return {"val_loss": float(loss.data), "w_genuine": float(w[b.z == 1].mean()),
                "w_false": float(w[b.z == 0].mean())}

    def validation_chunks(self) -> list[ChunkBatch]:
        if self._val_chunks is None:
            rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([self.cfg.seed, 99])))
            ctx = self.model.cfg.context
            self._val_chunks = [sample_chunks([self.dev[i] for i in idx] * 4, rng, self.cfg, ctx)
                                for idx in group_by_speakers(self.dev).values()]
        return self._val_chunks

    def supervised_metrics(self) -> dict:
        total, count = 0.0, 0
        with nx.no_grad():
            for b in self.validation_chunks():
                j_av, _, _ = supervised_losses(self.model, b)
                total += float(j_av.data) * b.labels.size
                count += b.labels.size
        return {"val_loss": total / count}

    # -- loops ------------------------------------------------------------

    def _pair_batch(self, rng) -> ContrastiveBatch:
        idx = rng.choice(len(self.train), size=self.cfg.batch, replace=len(self.train) < self.cfg.batch)
        ctx = self.model.cfg.context
        return ContrastiveBatch.concat([sample_pairs(self.train[i], int(rng.integers(2**31)), self.cfg, None, ctx)
                                        for i in idx])

    def stage1(self) -> list[dict]:
        cfg, ps = self.cfg, self.model.params
        self._set_trainable(ENCODER_PREFIXES)
        rows = []
        for epoch in range(1, cfg.epochs1 + 1):
            rng = self._rng(1, epoch)
            losses = []
            for _ in range(cfg.steps_per_epoch):
                batch = self._pair_batch(rng)
                ps.zero_grad()
                loss = contrastive_objective(self.model, batch, cfg.margin)
                if not _finite(float(loss.data)):
                    self._diverged(1, epoch)
                loss.backward()
                nx.adam_step(ps, cfg.lr1)
                losses.append(float(loss.data))
            row = {"stage": 1, "epoch": epoch, "loss": float(np.mean(losses)), "j_c": float(np.mean(losses))}
            row.update(self.sync_metrics())
            self._log(row)
            self._good = ps.snapshot()
            rows.append(row)
        self._checkpoint("stage1.ckpt")
        return rows

    def _supervised_stage(self, stage: int, epochs: int, lr: float, prefixes, lam: float, augment: bool):
        cfg, ps = self.cfg, self.model.params
        self._set_trainable(prefixes)
        groups = group_by_speakers(self.train)
        ctx = self.model.cfg.context
        rows = []
        for epoch in range(1, epochs + 1):
            rng = self._rng(stage, epoch)
            acc = {"loss": [], "j_c": [], "j_av": [], "vvad": []}
            for _ in range(cfg.steps_per_epoch):
                idx = pick_batch(groups, cfg.batch, rng)
                b = sample_chunks([self.train[i] for i in idx], rng, cfg, ctx, augment)
                ps.zero_grad()
                j_av, vvad, _ = supervised_losses(self.model, b)
                total = nx.add(j_av, vvad)
                j_c = 0.0
                if lam > 0:
                    jc = contrastive_objective(self.model, self._pair_batch(rng), cfg.margin)
                    j_c = float(jc.data)
                    total = nx.add(total, nx.mul(jc, lam))
                if not _finite(float(total.data)):
                    self._diverged(stage, epoch)
                total.backward()
                nx.adam_step(ps, lr)
                acc["loss"].append(float(j_av.data) + lam * j_c)
                acc["j_c"].append(j_c)
                acc["j_av"].append(float(j_av.data))
                acc["vvad"].append(float(vvad.data))
            row = {"stage": stage, "epoch": epoch, **{k: float(np.mean(v)) for k, v in acc.items()}}
            row.update(self.supervised_metrics())
            if lam > 0:
                row.update({k: v for k, v in self.sync_metrics().items() if k != "val_loss"})
            self._log(row)
            self._good = ps.snapshot()
            rows.append(row)
        return rows

    def stage2(self) -> list[dict]:
        rows = self._supervised_stage(2, self.cfg.epochs2, self.cfg.lr2, BACKEND_PREFIXES + VVAD_PREFIXES,
                                      0.0, False)
        self._checkpoint("stage2.ckpt")
        return rows

    def stage3(self) -> list[dict]:
        cfg = self.cfg
        rows = self._supervised_stage(3, cfg.epochs3, cfg.lr3, ("",), cfg.lam, cfg.augment)
        self._checkpoint("final.ckpt")
        return rows

    def run(self, stages=(1, 2, 3)) -> list[dict]:
        for s in stages:
            {1: self.stage1, 2: self.stage2, 3: self.stage3}[s]()
        return self.rows


def train_stage1(model, train, dev, cfg, out_dir=None, **kw):
    return Trainer(model, train, dev, cfg, out_dir, **kw).stage1()


def train_stage2(model, train, dev, cfg, out_dir=None, **kw):
    return Trainer(model, train, dev, cfg, out_dir, **kw).stage2()


def train_stage3(model, train, dev, cfg, out_dir=None, **kw):
    return Trainer(model, train, dev, cfg, out_dir, **kw).stage3()
