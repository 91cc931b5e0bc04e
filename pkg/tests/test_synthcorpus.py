import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from qavsd import synthcorpus as sc
from qavsd.errors import ConfigError, GenerationError


@pytest.fixture(scope="module")
def pool():
    return sc.speaker_pool(0)


@pytest.fixture(scope="module")
def scene(pool):
    return sc.make_scene("s0", 3, 12.0, 0.2, 5, pool)


def brute_overlap(labels):
    both = speech = 0
    for t in range(labels.shape[1]):
        k = int(labels[:, t].sum())
        speech += k >= 1
        both += k >= 2
    return both / speech if speech else 0.0


def test_zero_target_has_no_overlap():
    lab = sc.gen_dialog(3, 20.0, 0.0, 1)
    assert lab.sum(axis=0).max() <= 1


def test_single_speaker_overlap_zero():
    assert sc.overlap_ratio(sc.gen_dialog(1, 20.0, 0.0, 2)) == 0.0
    with pytest.raises(GenerationError):
        sc.gen_dialog(1, 20.0, 0.3, 2)


@pytest.mark.parametrize("seed", range(3))
def test_four_speakers_hit_quarter_overlap(seed):
    lab = sc.gen_dialog(4, 30.0, 0.25, seed)
    assert 0.20 <= brute_overlap(lab) <= 0.30


def test_overlap_ratio_matches_brute_force(scene):
    assert scene.overlap_ratio() == pytest.approx(brute_overlap(scene.labels), abs=0)


def test_gen_dialog_bad_inputs():
    with pytest.raises(ConfigError):
        sc.gen_dialog(0, 10.0, 0.1, 0)
    with pytest.raises(ConfigError):
        sc.gen_dialog(2, 10.0, 0.7, 0)


def test_speaker_pool_is_distinct(pool):
    assert np.allclose(np.linalg.norm(pool, axis=1), 1.0)
    cos = pool @ pool.T
    assert cos[~np.eye(len(pool), dtype=bool)].max() < 0.5


def test_silence_is_below_speech_floor(pool):
    lab = np.zeros((2, 300), dtype=np.uint8)
    e = sc.frame_energy(sc.render_audio(lab, pool[:2], 0).frames)
    assert e.max() < sc.SPEECH_FLOOR_ENERGY


def test_single_speaker_frames_classify_by_cosine(scene):
    solo = scene.labels.sum(axis=0) == 1
    energy = np.exp(scene.audio[solo])
    guess = np.argmax(energy @ scene.prototypes.T / np.linalg.norm(energy, axis=1, keepdims=True), axis=1)
    truth = np.argmax(scene.labels[:, solo], axis=0)
    assert np.mean(guess == truth) >= 0.95


def test_overlap_is_additive_in_energy(pool):
    lab = sc.gen_dialog(2, 10.0, 0.2, 3)
    a, b = lab.copy(), lab.copy()
    a[1] = 0
    b[0] = 0
    protos = pool[:2]
    both = sc.speech_energy(lab, protos, 3)
    np.testing.assert_allclose(both, sc.speech_energy(a, protos, 3) + sc.speech_energy(b, protos, 3), rtol=1e-12)
    noise = np.exp(sc.render_audio(lab, protos, 3).frames) - both
    assert noise.min() >= sc.NOISE_FLOOR * (1 - 1e-9)


def test_silent_lips_barely_move():
    lab = np.zeros((1, 400), dtype=np.uint8)
    vis, mask = sc.render_visual(lab, 0)
    assert not mask.any()
    op = sc.mouth_openings(lab, 0, vis.shape[1])
    assert op.var() < 1e-3
    assert vis.astype(float).std(axis=1).mean() < 3 * sc.PIXEL_NOISE


def test_speaking_lips_oscillate_in_syllable_band():
    lab = np.ones((1, 2000), dtype=np.uint8)
    op = sc.mouth_openings(lab, 4, 500)[0]
    spec = np.abs(np.fft.rfft(op - op.mean())) ** 2
    freqs = np.fft.rfftfreq(len(op), 1.0 / sc.VIDEO_FPS)
    assert 2.0 <= freqs[np.argmax(spec)] <= 6.0


def test_scene_shapes_and_alignment(scene):
    n, tv, h, w = scene.visual.shape
    assert (n, h, w) == (3, 24, 24)
    assert abs(4 * tv - scene.num_frames) <= 8
    assert scene.audio.shape == (scene.num_frames, 40)
    assert scene.labels.shape == (3, scene.num_frames)


def test_generation_is_bit_reproducible(pool):
    a = sc.make_scene("x", 2, 8.0, 0.2, 11, pool)
    b = sc.make_scene("x", 2, 8.0, 0.2, 11, pool)
    assert a.audio.tobytes() == b.audio.tobytes()
    assert a.visual.tobytes() == b.visual.tobytes()
    assert np.array_equal(a.labels, b.labels)


def test_corrupt_zeros_full():
    s = sc.make_scene("z", 2, 6.0, 0.1, 1, sc.speaker_pool(0))
    c = sc.corrupt(s, sc.DegradationSpec(miss_rate=1.0), 0)
    assert not c.visual.any() and c.miss_mask.all()
    again = sc.corrupt(c, sc.DegradationSpec(miss_rate=1.0), 9)
    assert np.array_equal(again.visual, c.visual) and np.array_equal(again.miss_mask, c.miss_mask)


def test_corrupt_identity_at_zero(scene):
    c = sc.corrupt(scene, sc.DegradationSpec(), 3)
    assert c.visual.tobytes() == scene.visual.tobytes()
    assert c.audio.tobytes() == scene.audio.tobytes()


@given(st.floats(0.0, 1.0), st.sampled_from(sc.CORRUPTION_MODES))
@settings(max_examples=25, deadline=None)
def test_corrupt_touches_requested_fraction(rate, mode):
    rng = np.random.default_rng(0)
    vis = rng.integers(1, 255, size=(3, 20, 4, 4), dtype=np.uint8)
    mask = np.zeros((3, 20), dtype=bool)
    out, m = sc.degrade_visual(vis, mask, rate, mode, 1, np.random.default_rng(1))
    k = int(round(rate * 60))
    if mode == "zeros":
        assert m.sum() == k
        assert not out[m].any()
    else:
        assert not m.any()
        assert (out != vis).any(axis=(2, 3)).sum() <= k


def test_swap_lips_uses_other_speakers():
    vis = np.stack([np.full((10, 2, 2), v, dtype=np.uint8) for v in (10, 20, 30)])
    out, _ = sc.degrade_visual(vis, np.zeros((3, 10), bool), 1.0, "swap_lips", 1, np.random.default_rng(0))
    for n in range(3):
        assert not (out[n] == vis[n]).all(axis=(1, 2)).any()


def test_resolution_blur_is_blockwise_constant(scene):
    c = sc.corrupt(scene, sc.DegradationSpec(resolution_factor=8), 0)
    blocks = c.visual.reshape(3, -1, 3, 8, 3, 8)
    assert (blocks == blocks[:, :, :, :1, :, :1]).all()


def test_degradation_spec_validation():
    with pytest.raises(ConfigError):
        sc.DegradationSpec(miss_rate=1.5)
    with pytest.raises(ConfigError):
        sc.DegradationSpec(resolution_factor=3)
    with pytest.raises(ConfigError):
        sc.DegradationSpec(corruption_mode="blur")


def test_audio_noise_lowers_snr(scene):
    c = sc.corrupt(scene, sc.DegradationSpec(audio_noise_snr=0.0), 0)
    assert (sc.frame_energy(c.audio) > sc.frame_energy(scene.audio)).all()


def test_scene_disk_roundtrip(scene, tmp_path):
    sc.save_scene(scene, tmp_path / "s")
    back = sc.load_scene(tmp_path / "s")
    assert back.audio.tobytes() == scene.audio.tobytes()
    assert back.visual.tobytes() == scene.visual.tobytes()
    assert np.array_equal(back.labels, scene.labels)
    assert back.prototypes.tobytes() == scene.prototypes.tobytes()
    assert back.speakers == scene.speakers


def test_split_sizes_and_distinct_seeds():
    cfg = sc.CorpusConfig(n_train=3, n_dev=2, n_eval=2, duration_s=12.0)
    tr = sc.generate_split(cfg, "train", 0)
    ev = sc.generate_split(cfg, "eval", 0)
    assert len(tr) == 3 and len(ev) == 2
    assert [s.n_speakers for s in tr] == [2, 3, 4]
    assert tr[0].audio.tobytes() != ev[0].audio.tobytes()
