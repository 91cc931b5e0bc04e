import csv
import math

import numpy as np
import pytest

from qavsd import numerics as nx
from qavsd import synthcorpus as sc
from qavsd.errors import ConfigError, SamplingError, TrainingError
from qavsd.exchange import BACKEND_PREFIXES, ENCODER_PREFIXES, AVSDModel
from qavsd.training import (LOG_FIELDS, TrainConfig, Trainer, augment_visual, bce_loss, contrastive_loss,
                            group_by_speakers, joint_loss, pick_batch, sample_chunks, sample_pairs,
                            supervised_losses)

from conftest import tiny_config


@pytest.fixture(scope="module")
def corpus():
    cfg = sc.CorpusConfig(n_train=4, n_dev=2, n_eval=0, duration_s=12.0, speakers=(2, 3))
    return sc.generate_split(cfg, "train", 0), sc.generate_split(cfg, "dev", 0)


def small_model(seed=0, **kw):
    return AVSDModel(tiny_config(n_bins=40, patch_size=24, **kw), seed=seed)


def quick(**kw):
    base = dict(epochs1=1, epochs2=1, epochs3=1, steps_per_epoch=2, batch=2, pairs_per_scene=2,
                val_pairs_per_scene=2, enroll_frames=16)
    base.update(kw)
    return TrainConfig(**base)


# ---------------------------------------------------------------------------
# loss closed forms


def test_bce_half_is_ln2():
    assert abs(float(bce_loss([1.0], [0.5]).data) - math.log(2.0)) <= 1e-12


def test_bce_matches_direct_sum(rng):
    y = rng.integers(0, 2, (3, 7))
    p = rng.uniform(0.01, 0.99, (3, 7))
    want = -sum(math.log(p[i, j]) if y[i, j] else math.log(1 - p[i, j]) for i in range(3) for j in range(7)) / 21
    assert float(bce_loss(y, p).data) == pytest.approx(want, rel=1e-13)


def test_bce_perfect_prediction_is_zero():
    assert float(bce_loss([1.0], [1.0 - 1e-15]).data) == pytest.approx(0.0, abs=1e-14)


def test_contrastive_zero_cases():
    assert float(contrastive_loss(np.zeros((2, 5)), np.ones((2, 1))).data) == 0.0
    assert float(contrastive_loss(np.full((2, 5), 1.0), np.zeros((2, 1))).data) == 0.0
    assert float(contrastive_loss(np.full((2, 5), 3.5), np.zeros((2, 1)), margin=1.0).data) == 0.0
    assert float(contrastive_loss(np.full((1, 1), 0.5), np.zeros((1, 1))).data) == 0.25
    with pytest.raises(ConfigError):
        contrastive_loss(np.zeros(2), np.ones(2), margin=0.0)


def test_joint_loss_weighting():
    assert float(joint_loss(1.0, 0.5, 0.1).data) == pytest.approx(0.6, abs=1e-15)
    assert float(joint_loss(1.0, 0.5, 0.0).data) == 0.5
    j_c, j_av = 0.7, 0.2
    assert float(joint_loss(j_c, j_av, 0.1).data) - float(joint_loss(j_c, j_av, 0.0).data) == pytest.approx(0.1 * j_c)


def test_joint_loss_gradient(rng):
    d = nx.Tensor(rng.uniform(0.1, 2.0, (2, 6)), requires_grad=True)
    p = nx.Tensor(rng.uniform(0.1, 0.9, (2, 6)), requires_grad=True)
    y = rng.integers(0, 2, (2, 6))
    z = np.array([[1.0], [0.0]])
    f = lambda: joint_loss(contrastive_loss(d, z), bce_loss(y, p), 0.1)  # noqa: E731
    assert nx.gradient_check(f, [d, p], step=1e-6) < 1e-4


def test_losses_nonnegative(rng):
    assert float(contrastive_loss(rng.uniform(0, 3, (4, 5)), rng.integers(0, 2, (4, 1))).data) >= 0
    assert float(bce_loss(rng.integers(0, 2, 9), rng.uniform(0.01, 0.99, 9)).data) >= 0


def test_config_validation():
    with pytest.raises(ConfigError):
        TrainConfig(lam=-0.1)
    with pytest.raises(ConfigError):
        TrainConfig(lr2=1e-4, lr3=1e-3)
    with pytest.raises(ConfigError):
        TrainConfig(shift_min_s=3.0, shift_max_s=2.0)


# ---------------------------------------------------------------------------
# sampling


def test_pairs_alternate_and_follow_rules(corpus):
    scene = corpus[0][1]
    cfg = quick()
    b = sample_pairs(scene, 3, cfg, n_pairs=12, context=1)
    assert b.z.tolist() == [1.0, 0.0] * 6
    w = cfg.window_frames
    for i in range(12):
        n, start = int(b.speaker[i]), int(b.start[i])
        assert start % 4 == 0
        assert np.array_equal(b.audio[i], scene.audio[start:start + w])
        if b.z[i] == 1:
            assert b.visual_speaker[i] == n and b.visual_start[i] * 4 == start
            assert scene.labels[n, start:start + w].mean() >= 0.5
        elif b.kind[i] == "shift":
            off = abs(int(b.visual_start[i]) - start // 4)
            assert 13 <= off <= 50
        elif b.kind[i] == "corrupt":
            assert b.visual_speaker[i] == n and b.visual_start[i] * 4 == start
            lips = scene.patches[n, b.visual_start[i]:b.visual_start[i] + w // 4]
            assert not np.array_equal(b.patches[i], lips)
            continue
        else:
            assert b.visual_speaker[i] != n
        assert np.array_equal(b.patches[i], scene.patches[b.visual_speaker[i], b.visual_start[i]:b.visual_start[i] + w // 4])


def test_pair_kinds_follow_config(corpus):
    scene = corpus[0][1]
    on = sample_pairs(scene, 4, quick(), n_pairs=60, context=1)
    off = sample_pairs(scene, 4, quick(corrupt_pairs=False), n_pairs=60, context=1)
    assert set(on.kind[1::2]) == {"shift", "swap", "corrupt"}
    assert set(off.kind[1::2]) == {"shift", "swap"}
    for i in np.flatnonzero(np.array(on.kind) == "corrupt"):
        p = on.patches[i]
        assert not p.any() or p.std() > 50  # blanked, or uniform random pixels


def test_pairs_deterministic(corpus):
    a = sample_pairs(corpus[0][0], 5, quick(), context=1)
    b = sample_pairs(corpus[0][0], 5, quick(), context=1)
    assert a.audio.tobytes() == b.audio.tobytes() and a.kind == b.kind


def test_pairs_need_speech():
    scene = sc.make_scene("q", 2, 12.0, 0.2, 0, sc.speaker_pool(0))
    scene.labels[:] = 0
    with pytest.raises(SamplingError):
        sample_pairs(scene, 0, quick())


def test_chunks_share_speaker_count(corpus):
    train = corpus[0]
    groups = group_by_speakers(train)
    assert sorted(groups) == [2, 3]
    rng = np.random.default_rng(0)
    for _ in range(5):
        idx = pick_batch(groups, 3, rng)
        assert len({train[i].n_speakers for i in idx}) == 1
        b = sample_chunks([train[i] for i in idx], rng, quick(), 1)
        assert b.labels.shape[0] == 3 and b.patches.shape[2] * 4 == b.audio.shape[1]
    with pytest.raises(SamplingError):
        sample_chunks(train[:2], rng, quick(), 1)


def test_augmentation_probability_and_modes(rng):
    patches = rng.integers(1, 255, (2, 50, 16), dtype=np.uint8)
    mask = np.zeros((2, 50), bool)
    touched = 0
    for _ in range(400):
        p, m = augment_visual(patches, mask, rng, 0.5)
        touched += not np.array_equal(p, patches)
        assert p.shape == patches.shape
    assert 150 < touched < 250
    p, m = augment_visual(patches, mask, rng, 0.0)
    assert p is patches


# ---------------------------------------------------------------------------
# stages


def test_stage2_freezes_encoders(corpus, tmp_path):
    model = small_model()
    before = model.params.snapshot()
    tr = Trainer(model, *corpus, quick(), str(tmp_path))
    tr.stage2()
    after = model.params.snapshot()
    for name in before:
        changed = not np.array_equal(before[name], after[name])
        if name.startswith(ENCODER_PREFIXES):
            assert not changed, name
        elif name.startswith(BACKEND_PREFIXES):
            assert changed, name
    assert (tmp_path / "stage2.ckpt").exists()


def test_stage1_touches_only_encoders(corpus):
    model = small_model()
    before = model.params.snapshot()
    Trainer(model, *corpus, quick()).stage1()
    after = model.params.snapshot()
    for name in before:
        assert (not np.array_equal(before[name], after[name])) == name.startswith(ENCODER_PREFIXES), name


def test_vvad_head_does_not_move_visual_encoder(corpus):
    model = small_model()
    b = sample_chunks(corpus[0][:1], np.random.default_rng(0), quick(), 1)
    _, vvad, _ = supervised_losses(model, b)
    model.params.zero_grad()
    vvad.backward()
    assert all(p.grad is None or not p.grad.any() for n, p in model.params.items() if n.startswith("vis."))
    assert model.params["vvad.fc.w"].grad is not None


def test_full_run_is_bit_reproducible(corpus, tmp_path):
    outs = []
    for k in range(2):
        d = tmp_path / f"r{k}"
        Trainer(small_model(), *corpus, quick(), str(d)).run()
        outs.append(d)
    for name in ("stage1.ckpt", "stage2.ckpt", "final.ckpt", "train_log.csv"):
        assert (outs[0] / name).read_bytes() == (outs[1] / name).read_bytes(), name
    rows = list(csv.DictReader(open(outs[0] / "train_log.csv")))
    assert [int(r["stage"]) for r in rows] == [1, 2, 3]
    assert list(rows[0]) == list(LOG_FIELDS)


def test_divergence_raises_with_last_good(corpus, tmp_path):
    model = small_model()
    tr = Trainer(model, *corpus, quick(epochs1=2), str(tmp_path))
    tr.stage1()
    good = model.params.snapshot()
    model.params["head.fc.b"].data[:] = np.nan
    with pytest.raises(TrainingError) as err:
        tr.stage2()
    assert err.value.checkpoint and (tmp_path / "last_good.ckpt").exists()
    restored = AVSDModel.load(err.value.checkpoint).params.snapshot()
    assert all(np.array_equal(restored[n], good[n]) for n in good)
