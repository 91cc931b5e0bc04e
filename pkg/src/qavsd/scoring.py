"""Diarization error rate: an exact interval engine and a brute-force frame oracle."""

from __future__ import annotations

import csv
import itertools
import math
import os
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linear_sum_assignment

from .errors import ConfigError
from .segments import SegmentList, load_rttm

ORACLE_MAX_SPEAKERS = 8


@dataclass
class DERReport:
    fa_s: float = 0.0
    miss_s: float = 0.0
    spkerr_s: float = 0.0
    total_ref_speech_s: float = 0.0
    mapping: dict[str, str] = field(default_factory=dict)  # hypothesis -> reference

    @property
    def errors_s(self) -> float:
        return self.fa_s + self.miss_s + self.spkerr_s

    @property
    def der(self) -> float:
        """Error ratio; +inf when there is no reference speech but some error."""
        if self.total_ref_speech_s > 0:
            return self.errors_s / self.total_ref_speech_s
        return math.inf if self.errors_s > 0 else 0.0

    @property
    def undefined(self) -> bool:
        return self.total_ref_speech_s == 0

    def __add__(self, other: "DERReport") -> "DERReport":
        return DERReport(self.fa_s + other.fa_s, self.miss_s + other.miss_s, self.spkerr_s + other.spkerr_s,
                         self.total_ref_speech_s + other.total_ref_speech_s, {**self.mapping, **other.mapping})

    def summary(self) -> str:
        return (f"DER={100 * self.der:.2f}% FA={self.fa_s:.3f}s MISS={self.miss_s:.3f}s "
                f"SPKERR={self.spkerr_s:.3f}s REF={self.total_ref_speech_s:.3f}s")


def _activity(segs: SegmentList, labels: list[str], points: np.ndarray) -> np.ndarray:
    """[len(labels), len(points)] indicator: is the speaker active at each time point?"""
    out = np.zeros((len(labels), len(points)), dtype=bool)
    row = {lab: i for i, lab in enumerate(labels)}
    for s in segs:
        out[row[s.speaker]] |= (points >= s.onset) & (points < s.offset)
    return out


def _boundaries(segs: SegmentList) -> np.ndarray:
    return np.array(sorted({s.onset for s in segs} | {s.offset for s in segs}), dtype=np.float64)


def _der_one(ref: SegmentList, hyp: SegmentList, collar: float) -> DERReport:
    ref_labels, hyp_labels = ref.speakers(), hyp.speakers()
    rb = _boundaries(ref)
    cuts = set(rb.tolist()) | set(_boundaries(hyp).tolist())
    if collar > 0:
        cuts |= set(np.maximum(rb - collar, 0.0).tolist()) | set((rb + collar).tolist())
    cuts = np.array(sorted(cuts))
    if len(cuts) < 2:
        return DERReport()
    mids = 0.5 * (cuts[:-1] + cuts[1:])
    dur = np.diff(cuts)
    if collar > 0 and len(rb):
        near = np.abs(mids[:, None] - rb[None, :]).min(axis=1) < collar
        dur = np.where(near, 0.0, dur)
    r = _activity(ref, ref_labels, mids)
    h = _activity(hyp, hyp_labels, mids)
    n_ref, n_hyp = r.sum(axis=0), h.sum(axis=0)
    miss = float((dur * np.maximum(n_ref - n_hyp, 0)).sum())
    fa = float((dur * np.maximum(n_hyp - n_ref, 0)).sum())
    overlap = (r[:, None, :] & h[None, :, :]) @ dur if len(dur) else np.zeros((len(ref_labels), len(hyp_labels)))
    mapping, correct = {}, 0.0
    if overlap.size:
        rows, cols = linear_sum_assignment(overlap, maximize=True)
        for i, j in zip(rows, cols):
            if overlap[i, j] > 0:
                mapping[hyp_labels[j]] = ref_labels[i]
                correct += float(overlap[i, j])
    spkerr = float((dur * np.minimum(n_ref, n_hyp)).sum()) - correct
    total = float((dur * n_ref).sum())
    return DERReport(fa, miss, max(spkerr, 0.0), total, mapping)


def der(ref: SegmentList, hyp: SegmentList, collar: float = 0.0) -> DERReport:
    """Time-weighted DER over every uri present in the reference or hypothesis.

    The timeline is cut at every segment boundary (and at collar edges);
    pieces within ``collar`` of a reference boundary are not scored. Each uri
    gets its own optimal one-to-one speaker mapping, found by linear
    assignment on the reference/hypothesis overlap durations.
    """
    if collar < 0:
        raise ConfigError("collar must be >= 0")
    total = DERReport()
    for uri in sorted(set(ref.uris()) | set(hyp.uris())):
        total = total + _der_one(ref.for_uri(uri), hyp.for_uri(uri), collar)
    return total


def der_frame_oracle(ref: SegmentList, hyp: SegmentList, step: float = 0.01, collar: float = 0.0) -> DERReport:
    """Brute-force DER: frame-centre sampling and exhaustive speaker mapping.

    Among mappings with the same error the first in lexicographic order of
    (reference label, hypothesis label) assignments wins.
    """
    total = DERReport()
    for uri in sorted(set(ref.uris()) | set(hyp.uris())):
        total = total + _oracle_one(ref.for_uri(uri), hyp.for_uri(uri), step, collar)
    return total


def _oracle_one(ref: SegmentList, hyp: SegmentList, step: float, collar: float) -> DERReport:
    ref_labels, hyp_labels = ref.speakers(), hyp.speakers()
    if max(len(ref_labels), len(hyp_labels)) > ORACLE_MAX_SPEAKERS:
        raise ConfigError(f"frame oracle refuses more than {ORACLE_MAX_SPEAKERS} speakers per side")
    end = max([s.offset for s in ref] + [s.offset for s in hyp] + [0.0])
    n_frames = int(math.ceil(end / step))
    centres = (np.arange(n_frames) + 0.5) * step
    rb = _boundaries(ref)
    scored = np.ones(n_frames, dtype=bool)
    if collar > 0 and len(rb):
        for b in rb:
            scored &= np.abs(centres - b) >= collar
    r = _activity(ref, ref_labels, centres) & scored
    h = _activity(hyp, hyp_labels, centres) & scored
    n_ref, n_hyp = r.sum(axis=0), h.sum(axis=0)
    m = max(len(ref_labels), len(hyp_labels))
    best, best_map = None, {}
    # hypothesis j -> reference perm[j]; indices >= len(ref_labels) mean "unmapped"
    for perm in itertools.permutations(range(m), len(hyp_labels)):
        correct = np.zeros(n_frames, dtype=np.int64)
        for j, i in enumerate(perm):
            if i < len(ref_labels):
                correct += r[i] & h[j]
        err = int((np.minimum(n_ref, n_hyp) - correct).sum())
        if best is None or err < best:
            best = err
            best_map = {hyp_labels[j]: ref_labels[i] for j, i in enumerate(perm)
                        if i < len(ref_labels) and (r[i] & h[j]).any()}
    miss = float(np.maximum(n_ref - n_hyp, 0).sum()) * step
    fa = float(np.maximum(n_hyp - n_ref, 0).sum()) * step
    return DERReport(fa, miss, float(best or 0) * step, float(n_ref.sum()) * step, best_map)


# ---------------------------------------------------------------------------
# directories of RTTM files


def rttm_dir_index(directory) -> dict[str, str]:
    return {os.path.splitext(f)[0]: os.path.join(directory, f)
            for f in sorted(os.listdir(directory)) if f.endswith(".rttm")}


def score_directories(ref_dir, hyp_dir, collar: float = 0.0, csv_path=None):
    """Per-scene and aggregate DER for matching ``<uri>.rttm`` files.

    Returns (aggregate report, {uri: report}). Unmatched ids raise ValueError.
    """
    refs, hyps = rttm_dir_index(ref_dir), rttm_dir_index(hyp_dir)
    if set(refs) != set(hyps):
        only_ref = sorted(set(refs) - set(hyps))
        only_hyp = sorted(set(hyps) - set(refs))
        raise ValueError(f"unmatched scene ids: reference only {only_ref}, hypothesis only {only_hyp}")
    per: dict[str, DERReport] = {}
    for uri in sorted(refs):
        per[uri] = der(load_rttm(refs[uri]), load_rttm(hyps[uri]), collar)
    agg = DERReport()
    for rep in per.values():
        agg = agg + rep
    if csv_path:
        write_report_csv(per, agg, csv_path)
    return agg, per


def write_report_csv(per: dict[str, DERReport], agg: DERReport, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["scene", "fa_s", "miss_s", "spkerr_s", "ref_s", "der"])
        for uri, rep in list(per.items()) + [("ALL", agg)]:
            w.writerow([uri, f"{rep.fa_s:.3f}", f"{rep.miss_s:.3f}", f"{rep.spkerr_s:.3f}",
                        f"{rep.total_ref_speech_s:.3f}", f"{rep.der:.6f}"])


# ---------------------------------------------------------------------------
# threshold selection on a development split


def tune_threshold(scenes, model, grid, cfg=None) -> tuple[float, dict[float, float]]:
    """Threshold from ``grid`` with the lowest pooled dev DER; ties go to the value closest to 0.5.

    Returns (threshold, {threshold: DER}).
    """
    from dataclasses import replace

    from .pipeline import PipelineConfig, enroll_iterate

    grid = [float(g) for g in grid]
    if not grid or any(not 0.0 < g < 1.0 for g in grid):
        raise ConfigError("threshold grid must be a nonempty subset of (0, 1)")
    base = cfg or PipelineConfig()
    scores: dict[float, float] = {}
    for theta in grid:
        pc = replace(base, threshold=theta)
        total = DERReport()
        for scene in scenes:
            total = total + der(scene.reference(), enroll_iterate(scene, model, pc))
        scores[theta] = total.der
    best = min(grid, key=lambda g: (scores[g], abs(g - 0.5), g))
    return best, scores
