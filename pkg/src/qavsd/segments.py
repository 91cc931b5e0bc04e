"""Speaker turn lists, frame-matrix conversion and RTTM I/O."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError, RTTMParseError

FRAME_STEP = 0.01


@dataclass(frozen=True, order=True)
class Segment:
    uri: str
    onset: float
    duration: float
    speaker: str

    @property
    def offset(self) -> float:
        return self.onset + self.duration


@dataclass
class SegmentList:
    segments: list[Segment] = field(default_factory=list)

    def __iter__(self):
        return iter(self.segments)

    def __len__(self):
        return len(self.segments)

    def __eq__(self, other):
        if not isinstance(other, SegmentList):
            return NotImplemented
        return self.segments == other.segments

    def speakers(self) -> list[str]:
        return sorted({s.speaker for s in self.segments})

    def uris(self) -> list[str]:
        return sorted({s.uri for s in self.segments})

    def by_speaker(self) -> dict[str, list[Segment]]:
        out: dict[str, list[Segment]] = {}
        for s in self.segments:
            out.setdefault(s.speaker, []).append(s)
        return out

    def for_uri(self, uri: str) -> "SegmentList":
        return SegmentList([s for s in self.segments if s.uri == uri])

    def total_speech(self) -> float:
        return sum(s.duration for s in self.segments)

    def sorted(self) -> "SegmentList":
        return SegmentList(sorted(self.segments, key=lambda s: (s.uri, s.speaker, s.onset, s.duration)))

    def validate(self) -> "SegmentList":
        """Assert the per-speaker disjoint/sorted invariant; return self."""
        for s in self.segments:
            if s.onset < 0 or s.duration <= 0:
                raise ContractError(f"bad segment {s}")
        groups: dict[tuple[str, str], list[Segment]] = {}
        for s in self.segments:
            groups.setdefault((s.uri, s.speaker), []).append(s)
        for segs in groups.values():
            for a, b in zip(segs, segs[1:]):
                if b.onset < a.offset - 1e-9:
                    raise ContractError(f"overlapping or unsorted turns {a} / {b}")
        return self


def runs(row: np.ndarray) -> list[tuple[int, int]]:
    """[start, end) index pairs of the nonzero runs of a 1-D array."""
    b = np.concatenate([[0], (np.asarray(row) > 0).astype(np.int8), [0]])
    d = np.diff(b)
    return list(zip(np.flatnonzero(d == 1).tolist(), np.flatnonzero(d == -1).tolist()))


def matrix_to_segments(binary: np.ndarray, uri: str, speakers, step: float = FRAME_STEP) -> SegmentList:
    segs = []
    for n, spk in enumerate(speakers):
        for a, b in runs(binary[n]):
            segs.append(Segment(uri, round(a * step, 6), round((b - a) * step, 6), spk))
    return SegmentList(segs).sorted().validate()


def segments_to_matrix(segs: SegmentList, speakers, num_frames: int, step: float = FRAME_STEP) -> np.ndarray:
    index = {s: i for i, s in enumerate(speakers)}
    out = np.zeros((len(speakers), num_frames), dtype=np.uint8)
    for s in segs:
        a = int(round(s.onset / step))
        b = int(round(s.offset / step))
        out[index[s.speaker], max(a, 0):min(b, num_frames)] = 1
    return out


def rttm_write(segs: SegmentList) -> str:
    lines = [f"SPEAKER {s.uri} 1 {s.onset:.3f} {s.duration:.3f} <NA> <NA> {s.speaker} <NA> <NA>\n"
             for s in segs]
    return "".join(lines)


def rttm_read(text: str) -> SegmentList:
    segs = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        fields = line.split()
        if not fields or fields[0].startswith("#"):
            continue
        if fields[0] != "SPEAKER":
            raise RTTMParseError(lineno, f"unsupported record type {fields[0]!r}")
        if len(fields) != 10:
            raise RTTMParseError(lineno, f"expected 10 fields, got {len(fields)}")
        try:
            onset, dur = float(fields[3]), float(fields[4])
        except ValueError:
            raise RTTMParseError(lineno, "onset/duration are not numbers") from None
        if onset < 0 or dur <= 0:
            raise RTTMParseError(lineno, f"invalid onset {onset} / duration {dur}")
        segs.append(Segment(fields[1], onset, dur, fields[7]))
    return SegmentList(segs)


def save_rttm(segs: SegmentList, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(rttm_write(segs))


def load_rttm(path) -> SegmentList:
    with open(path, encoding="utf-8") as fh:
        return rttm_read(fh.read())
