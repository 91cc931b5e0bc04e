import numpy as np
import pytest

from qavsd import numerics as nx
from qavsd.encoders import FUSION_STRATEGIES
from qavsd.exchange import AVSDModel, combiner
from qavsd.training import bce_loss, contrastive_loss, joint_loss

from conftest import tiny_config


@pytest.mark.parametrize("n", range(2, 9))
def test_combiner_equals_mean_of_others(n, rng):
    x = rng.standard_normal((n, 5, 3))
    got = combiner(nx.Tensor(x)).data
    for i in range(n):
        others = [x[j] for j in range(n) if j != i]
        want = sum(others) / len(others)
        assert np.array_equal(got[i], want) or np.max(np.abs(got[i] - want)) < 1e-14


def test_combiner_single_speaker_is_identity(rng):
    x = rng.standard_normal((1, 4, 3))
    assert np.array_equal(combiner(nx.Tensor(x)).data, x)


def inputs(cfg, rng, n=3, tv=4, batch=()):
    t = 4 * tv
    fb = rng.standard_normal(batch + (t, cfg.n_bins))
    patches = rng.integers(0, 256, batch + (n, tv, cfg.patch_pixels))
    spk = rng.standard_normal(batch + (n, cfg.d_i))
    spk /= np.linalg.norm(spk, axis=-1, keepdims=True)
    return fb, patches, spk


@pytest.mark.parametrize("fusion", FUSION_STRATEGIES)
def test_forward_is_speaker_permutation_equivariant(fusion, rng):
    cfg = tiny_config(fusion=fusion, xs_layers=2)
    model = AVSDModel(cfg, seed=1)
    fb, patches, spk = inputs(cfg, rng, n=4)
    mask = rng.random((4, 4)) < 0.3
    base = model(fb, patches, spk, mask).logits.data
    perm = np.array([2, 0, 3, 1])
    permuted = model(fb, patches[perm], spk[perm], mask[perm]).logits.data
    assert np.max(np.abs(permuted - base[perm])) <= 1e-12


@pytest.mark.parametrize("fusion", FUSION_STRATEGIES)
def test_parameter_count_independent_of_speaker_count(fusion, rng):
    cfg = tiny_config(fusion=fusion)
    model = AVSDModel(cfg)
    counts = set()
    for n in (2, 8):
        fb, patches, spk = inputs(cfg, rng, n=n)
        assert model(fb, patches, spk).logits.shape == (n, 16)
        counts.add(model.params.count())
    assert len(counts) == 1


def test_batched_forward_matches_unbatched(rng):
    cfg = tiny_config()
    model = AVSDModel(cfg)
    fb, patches, spk = inputs(cfg, rng, batch=(2,))
    both = model(fb, patches, spk).logits.data
    for b in range(2):
        one = model(fb[b], patches[b], spk[b]).logits.data
        np.testing.assert_allclose(both[b], one, rtol=1e-12, atol=1e-12)


def test_checkpoint_roundtrip(rng, tmp_path):
    cfg = tiny_config(fusion="factorized")
    model = AVSDModel(cfg, seed=4)
    path = tmp_path / "m.ckpt"
    model.save(path)
    back = AVSDModel.load(path)
    assert back.cfg == cfg
    fb, patches, spk = inputs(cfg, rng)
    assert np.array_equal(back(fb, patches, spk).logits.data, model(fb, patches, spk).logits.data)
    with open(path, "rb") as fh:
        assert fh.read() == back.params.to_bytes(cfg.to_meta())


@pytest.mark.parametrize("fusion", FUSION_STRATEGIES)
def test_full_model_gradient(fusion, rng):
    """Encoders through fusion, exchange, head and all three losses against finite differences."""
    cfg = tiny_config(fusion=fusion)
    model = AVSDModel(cfg, seed=2)
    fb, patches, spk = inputs(cfg, rng, n=2, tv=3)
    labels = rng.integers(0, 2, (2, 12))
    z = np.array([1.0, 0.0])[:, None, None]

    def loss():
        out = model(fb, patches, spk)
        post = nx.sigmoid(out.logits)
        dist = nx.l2_distance(out.e_ia, out.e_v)
        j_c = contrastive_loss(nx.reshape(dist, (2, 1, 12)), z, 1.0)
        return joint_loss(j_c, bce_loss(labels, post), 0.1)

    tensors = [p for _, p in model.params.items()]
    # probes whose stencil straddles a relu or hinge kink are dropped
    assert nx.gradient_check(loss, tensors, step=1e-6, sample=3, floor=1e-5, skip_kinks=True) < 1e-4
