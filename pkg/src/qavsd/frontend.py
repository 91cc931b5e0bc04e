"""Audio frontend: PCM16 WAV reading, 40-bin log mel filterbanks, A/V frame alignment.

FBANK conventions (the usual Kaldi-like defaults, fixed so golden tests are exact):
25 ms frames every 10 ms at 16 kHz, per-frame pre-emphasis 0.97, Hamming window,
512-point FFT power spectrum, 40 triangular mel filters spanning 0-8000 Hz on the
HTK mel scale, natural log with an energy floor of 1e-10. No dither.
"""

from __future__ import annotations

import wave
from dataclasses import dataclass

import numpy as np

from .errors import AlignmentError, LengthError, RateError, WavError

SAMPLE_RATE = 16000
FRAME_LENGTH = 400  # 25 ms
FRAME_SHIFT = 160  # 10 ms
N_FFT = 512
N_MELS = 40
PREEMPH = 0.97
LOG_FLOOR = 1e-10
MAX_ALIGN_SLACK = 8
VIDEO_TO_AUDIO = 4  # 25 fps video vs 100 Hz audio frames


@dataclass
class Waveform:
    samples: np.ndarray
    rate: int = SAMPLE_RATE


@dataclass
class AudioFeatures:
    frames: np.ndarray  # [T, 40]
    frame_shift: float = 0.010
    frame_length: float = 0.025

    @property
    def num_frames(self) -> int:
        return self.frames.shape[0]


def load_wav(path) -> Waveform:
    try:
        with wave.open(str(path), "rb") as fh:
            channels = fh.getnchannels()
            width = fh.getsampwidth()
            rate = fh.getframerate()
            comptype = fh.getcomptype()
            raw = fh.readframes(fh.getnframes())
    except (wave.Error, EOFError) as exc:
        raise WavError(f"{path}: malformed WAV header ({exc})") from exc
    if comptype != "NONE" or width != 2:
        raise WavError(f"{path}: only PCM16 is supported (sample width {width} bytes)")
    if channels != 1:
        raise WavError(f"{path}: expected mono audio, got {channels} channels")
    if rate != SAMPLE_RATE:
        raise RateError(f"{path}: sample rate {rate} Hz, expected {SAMPLE_RATE}")
    pcm = np.frombuffer(raw, dtype="<i2").astype(np.float64)
    return Waveform(pcm / 32768.0, rate)


def write_wav(path, w: Waveform) -> None:
    pcm = np.clip(np.round(w.samples * 32768.0), -32768, 32767).astype("<i2")
    with wave.open(str(path), "wb") as fh:
        fh.setnchannels(1)
        fh.setsampwidth(2)
        fh.setframerate(w.rate)
        fh.writeframes(pcm.tobytes())


def num_frames(num_samples: int) -> int:
    return (num_samples - FRAME_LENGTH) // FRAME_SHIFT + 1


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_centers(n_mels: int = N_MELS, low: float = 0.0, high: float = SAMPLE_RATE / 2) -> np.ndarray:
    """Center frequencies (Hz) of the triangular filters."""
    pts = np.linspace(hz_to_mel(low), hz_to_mel(high), n_mels + 2)
    return mel_to_hz(pts[1:-1])


def mel_filterbank(n_mels: int = N_MELS, n_fft: int = N_FFT, rate: int = SAMPLE_RATE,
                   low: float = 0.0, high: float | None = None) -> np.ndarray:
    """[n_mels, n_fft//2 + 1] triangular weights, triangles defined on the mel axis."""
    high = rate / 2 if high is None else high
    edges = np.linspace(hz_to_mel(low), hz_to_mel(high), n_mels + 2)
    bin_mel = hz_to_mel(np.arange(n_fft // 2 + 1) * rate / n_fft)
    left, center, right = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    up = (bin_mel - left) / (center - left)
    down = (right - bin_mel) / (right - center)
    return np.maximum(0.0, np.minimum(up, down))


_FBANK = mel_filterbank()
_WINDOW = np.hamming(FRAME_LENGTH)


def frame_signal(samples: np.ndarray) -> np.ndarray:
    n = num_frames(len(samples))
    idx = np.arange(FRAME_LENGTH)[None, :] + FRAME_SHIFT * np.arange(n)[:, None]
    return samples[idx]


def fbank(w: Waveform) -> AudioFeatures:
    x = np.asarray(w.samples, dtype=np.float64)
    if w.rate != SAMPLE_RATE:
        raise RateError(f"sample rate {w.rate} Hz, expected {SAMPLE_RATE}")
    if len(x) < FRAME_LENGTH:
        raise LengthError(f"need at least {FRAME_LENGTH} samples, got {len(x)}")
    frames = frame_signal(x)
    # per-frame pre-emphasis; the first sample is emphasized against itself
    prev = np.concatenate([frames[:, :1], frames[:, :-1]], axis=1)
    frames = (frames - PREEMPH * prev) * _WINDOW
    power = np.abs(np.fft.rfft(frames, n=N_FFT, axis=1)) ** 2
    energies = power @ _FBANK.T
    return AudioFeatures(np.log(np.maximum(energies, LOG_FLOOR)))


def dump_csv(feats: AudioFeatures, path) -> None:
    np.savetxt(path, feats.frames, delimiter=",", fmt="%.17g")


def load_csv(path) -> AudioFeatures:
    arr = np.loadtxt(path, delimiter=",", ndmin=2)
    return AudioFeatures(arr)


def align_video(per_frame: np.ndarray, factor: int = VIDEO_TO_AUDIO, axis: int = 0) -> np.ndarray:
    """Repeat each video frame ``factor`` times along ``axis``."""
    if factor < 1:
        raise ValueError(f"factor must be >= 1, got {factor}")
    return np.repeat(per_frame, factor, axis=axis)


def trim_to_common_length(audio: AudioFeatures, visual: np.ndarray, axis: int = 0):
    """Truncate both streams to the shorter length (time on ``axis`` of ``visual``)."""
    ta, tv = audio.num_frames, visual.shape[axis]
    if ta == 0 or tv == 0:
        raise AlignmentError("empty stream")
    if abs(ta - tv) > MAX_ALIGN_SLACK:
        raise AlignmentError(f"audio has {ta} frames, visual {tv}: more than {MAX_ALIGN_SLACK} apart")
    t = min(ta, tv)
    vis = np.take(visual, np.arange(t), axis=axis)
    return AudioFeatures(audio.frames[:t], audio.frame_shift, audio.frame_length), vis
