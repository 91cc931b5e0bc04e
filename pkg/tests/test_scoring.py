import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from qavsd.errors import ConfigError
from qavsd.scoring import DERReport, der, der_frame_oracle, score_directories
from qavsd.segments import Segment, SegmentList, save_rttm


def segs(*rows, uri="u"):
    return SegmentList([Segment(uri, a, b - a, spk) for spk, a, b in rows]).sorted()


def random_turns(rng, n_spk, max_segs, length, prefix, grid=None):
    out = []
    budget = max_segs
    for k in range(n_spk):
        m = int(rng.integers(1, max(2, budget // (n_spk - k)) + 1))
        m = min(m, budget - (n_spk - k - 1))
        budget -= m
        cuts = np.sort(rng.uniform(0, length, 2 * m))
        if grid:
            cuts = np.unique(np.round(cuts / grid) * grid)
            if len(cuts) % 2:
                cuts = cuts[:-1]
        for a, b in cuts.reshape(-1, 2):
            if b - a > 1e-6:
                out.append((f"{prefix}{k}", float(a), float(b)))
    return segs(*out)


def boundary_count(*lists):
    return sum(2 * len(s) for s in lists)


# ---------------------------------------------------------------------------
# hand cases


def test_identical_is_zero():
    ref = segs(("a", 0.0, 3.0), ("b", 2.0, 5.5))
    assert der(ref, ref).der == 0.0


def test_empty_hypothesis_is_all_miss():
    r = der(segs(("a", 0.0, 10.0)), SegmentList())
    assert (r.miss_s, r.fa_s, r.spkerr_s, r.der) == (10.0, 0.0, 0.0, 1.0)


def test_composite_thirty_five_percent():
    ref = segs(("A", 0.0, 6.0), ("B", 6.0, 10.0))
    # 1 s FA after the reference ends, 2 s missed at the start, 0.5 s given to the wrong speaker
    hyp = segs(("x", 2.0, 5.5), ("y", 5.5, 6.0), ("y", 6.0, 11.0))
    r = der(ref, hyp)
    assert (r.fa_s, r.miss_s, r.spkerr_s, r.total_ref_speech_s) == (1.0, 2.0, 0.5, 10.0)
    assert r.der == 0.35


def test_no_reference_speech():
    assert der(SegmentList(), SegmentList()).der == 0.0
    assert math.isinf(der(SegmentList(), segs(("a", 0.0, 1.0))).der)


def test_overlap_counts_each_speaker():
    ref = segs(("a", 0.0, 2.0), ("b", 0.0, 2.0))
    r = der(ref, segs(("x", 0.0, 2.0)))
    assert r.miss_s == 2.0 and r.total_ref_speech_s == 4.0


def test_collar_excludes_boundary_neighbourhood():
    ref = segs(("a", 1.0, 3.0))
    hyp = segs(("x", 1.2, 2.9))
    assert der(ref, hyp, collar=0.25).errors_s == 0.0
    assert der(ref, hyp).errors_s == pytest.approx(0.3)
    with pytest.raises(ConfigError):
        der(ref, hyp, collar=-1)


def test_half_scene_collar_scores_nothing():
    ref = segs(("a", 0.0, 4.0), ("b", 4.0, 8.0))
    hyp = segs(("x", 0.0, 8.0))
    r = der(ref, hyp, collar=4.0)
    assert r.total_ref_speech_s == 0.0 and r.errors_s == 0.0


def test_per_uri_mapping_is_independent():
    ref = segs(("a", 0, 1), uri="u1").segments + segs(("a", 0, 1), uri="u2").segments
    hyp = segs(("x", 0, 1), uri="u1").segments + segs(("y", 0, 1), uri="u2").segments
    assert der(SegmentList(ref), SegmentList(hyp)).der == 0.0


def test_report_addition_and_summary():
    r = DERReport(1.0, 2.0, 0.5, 10.0) + DERReport(0.0, 1.0, 0.0, 5.0)
    assert r.der == pytest.approx(4.5 / 15.0)
    assert r.summary().startswith("DER=30.00%")


# ---------------------------------------------------------------------------
# interval engine against the frame oracle


def test_matches_oracle_on_random_cases():
    rng = np.random.default_rng(7)
    for case in range(100):
        n_ref, n_hyp = int(rng.integers(1, 5)), int(rng.integers(1, 5))
        ref = random_turns(rng, n_ref, 20, 10.0, "r")
        hyp = random_turns(rng, n_hyp, 20, 10.0, "h")
        exact, oracle = der(ref, hyp), der_frame_oracle(ref, hyp)
        # each boundary can move the frame-sampled timeline by at most one step
        slack = boundary_count(ref, hyp) * 0.01 + 1e-9
        assert abs(exact.errors_s - oracle.errors_s) <= slack, case
        ref_slack = boundary_count(ref) * 0.01 + 1e-9
        assert abs(exact.total_ref_speech_s - oracle.total_ref_speech_s) <= ref_slack
        r_e, r_o = exact.total_ref_speech_s, oracle.total_ref_speech_s
        ratio_bound = slack / r_o + exact.errors_s * ref_slack / (r_e * r_o)
        assert abs(exact.der - oracle.der) <= ratio_bound, case


def test_matches_oracle_exactly_on_grid():
    rng = np.random.default_rng(8)
    for _ in range(30):
        ref = random_turns(rng, 3, 12, 6.0, "r", grid=0.01)
        hyp = random_turns(rng, 3, 12, 6.0, "h", grid=0.01)
        a, b = der(ref, hyp), der_frame_oracle(ref, hyp)
        for f in ("fa_s", "miss_s", "spkerr_s", "total_ref_speech_s"):
            assert getattr(a, f) == pytest.approx(getattr(b, f), abs=1e-9)


def test_oracle_tie_break_is_first_lexicographic():
    ref = segs(("a", 0, 1), ("b", 2, 3))
    hyp = segs(("x", 5, 6), ("y", 7, 8))  # every mapping is equally bad
    assert der_frame_oracle(ref, hyp).mapping == {}
    ref2 = segs(("a", 0, 2), ("b", 0, 2))
    hyp2 = segs(("x", 0, 2), ("y", 0, 2))
    m1, m2 = der_frame_oracle(ref2, hyp2).mapping, der_frame_oracle(ref2, hyp2).mapping
    assert m1 == m2 == {"x": "a", "y": "b"}


def test_oracle_refuses_many_speakers():
    ref = segs(*[(f"s{i}", i, i + 1) for i in range(9)])
    with pytest.raises(ConfigError):
        der_frame_oracle(ref, ref)


# ---------------------------------------------------------------------------
# properties

turns = st.lists(st.tuples(st.sampled_from("abc"), st.floats(0, 9), st.floats(0.05, 1.0)), max_size=8)


def to_list(rows, uri="u"):
    by = {}
    for spk, a, d in rows:
        by.setdefault(spk, []).append((a, a + d))
    out = []
    for spk, iv in by.items():
        iv.sort()
        end = -1.0
        for a, b in iv:
            if a >= end:
                out.append((spk, a, b))
                end = b
    return segs(*out, uri=uri)


@given(turns)
@settings(max_examples=60, deadline=None)
def test_self_der_is_zero(rows):
    ref = to_list(rows)
    assert der(ref, ref).errors_s == pytest.approx(0.0, abs=1e-9)


@given(turns, turns)
@settings(max_examples=60, deadline=None)
def test_invariant_to_hypothesis_renaming(r, h):
    ref, hyp = to_list(r), to_list(h)
    renamed = SegmentList([Segment(s.uri, s.onset, s.duration, "z" + s.speaker[::-1]) for s in hyp]).sorted()
    assert der(ref, hyp).der == pytest.approx(der(ref, renamed).der, abs=1e-12)


@given(turns, turns, st.floats(0, 0.5))
@settings(max_examples=60, deadline=None)
def test_collar_never_increases_errors(r, h, c):
    ref, hyp = to_list(r), to_list(h)
    a, b = der(ref, hyp), der(ref, hyp, collar=c)
    for f in ("fa_s", "miss_s", "spkerr_s"):
        assert getattr(b, f) <= getattr(a, f) + 1e-9


# ---------------------------------------------------------------------------
# directories


def test_score_directories(tmp_path):
    ref_dir, hyp_dir = tmp_path / "ref", tmp_path / "hyp"
    ref_dir.mkdir()
    hyp_dir.mkdir()
    save_rttm(segs(("a", 0, 4), uri="s1"), ref_dir / "s1.rttm")
    save_rttm(segs(("a", 0, 6), uri="s2"), ref_dir / "s2.rttm")
    save_rttm(segs(("x", 0, 3), uri="s1"), hyp_dir / "s1.rttm")
    save_rttm(segs(("x", 0, 6), uri="s2"), hyp_dir / "s2.rttm")
    agg, per = score_directories(ref_dir, hyp_dir, csv_path=tmp_path / "r.csv")
    assert agg.miss_s == pytest.approx(per["s1"].miss_s + per["s2"].miss_s)
    assert agg.der == pytest.approx(1.0 / 10.0)
    rows = (tmp_path / "r.csv").read_text().splitlines()
    assert rows[0].startswith("scene,") and rows[-1].startswith("ALL,")
    save_rttm(segs(("x", 0, 1), uri="s3"), hyp_dir / "s3.rttm")
    with pytest.raises(ValueError, match="s3"):
        score_directories(ref_dir, hyp_dir)
