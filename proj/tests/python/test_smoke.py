"""Smoke tests for the Python bindings.

These assume the C++ module has been built (see pyproject.toml for the
in-tree build recipe); they check the numpy boundary and a miniature
train / evaluate round trip, not numerical internals — those live in the
C++ test suite.
"""

import numpy as np
import pytest

import gaitforge as gf


def test_inspect_accounting():
    info = gf.inspect("deepgaitv2-2d", 64, [1, 4, 4, 1])
    assert info["params"] == 9325248
    assert info["depth"] == 22
    assert info["parts"] == 16
    assert info["flops_per_frame"] == pytest.approx(2.42e9, rel=0.15)
    name, shape = info["stages"][0]
    assert name == "conv0"
    assert shape == [30, 64, 64, 44]


def test_inspect_rejects_unknown_family():
    with pytest.raises(gf.GaitforgeError, match="unknown family"):
        gf.inspect("resnet-50")


def test_walker_deterministic_binary_masks():
    a = gf.synth_walker(frames=6, seed=3)
    b = gf.synth_walker(frames=6, seed=3)
    c = gf.synth_walker(frames=6, seed=4)
    assert a.shape == (6, 64, 44) and a.dtype == np.uint8
    assert np.array_equal(a, b)
    assert not np.array_equal(a, c)
    assert set(np.unique(a)) <= {0, 255}
    fg = (a > 0).mean()
    assert 0.05 < fg < 0.6


def test_normalize_is_translation_invariant():
    def blob(y, x):
        img = np.zeros((120, 160), np.uint8)
        img[y : y + 40, x : x + 14] = 255
        img[y + 5 : y + 12, x + 4 : x + 10] = 0  # give it some structure
        return img

    n1 = gf.normalize_silhouette(blob(10, 20))
    n2 = gf.normalize_silhouette(blob(55, 90))
    assert n1.shape == (64, 44)
    assert np.array_equal(n1, n2)


def test_dumb_patch_fraction_extremes():
    uniform = np.full((64, 44), 255, np.uint8)
    assert gf.dumb_patch_fraction(uniform, 4) == 1.0

    yy, xx = np.mgrid[0:64, 0:44]
    checker = (((yy // 2) + (xx // 2)) % 2 * 255).astype(np.uint8)
    assert gf.dumb_patch_fraction(checker, 4) == 0.0


def test_model_embed_and_roundtrip(tmp_path):
    m = gf.Model.build("deepgaitv2-p3d", 16, [1, 1, 1, 1], embed_dim=32,
                       num_classes=4, seed=9)
    frames = gf.synth_walker(frames=8, seed=3)
    e = m.embed(frames)
    assert e.shape == (16, 32) and e.dtype == np.float32
    assert np.isfinite(e).all()

    # Same seed, same architecture -> identical embeddings.
    e2 = gf.Model.build("deepgaitv2-p3d", 16, [1, 1, 1, 1], embed_dim=32,
                        num_classes=4, seed=9).embed(frames)
    assert np.array_equal(e, e2)

    path = str(tmp_path / "model.gfckpt")
    m.save(path)
    loaded = gf.Model.load(path)
    assert np.array_equal(loaded.embed(frames), e)
    assert loaded.info()["family"] == "deepgaitv2-p3d"


TINY_CONFIG = """
family = deepgaitv2-2d
base_channels = 8
block_counts = 1,1,1,1
embed_dim = 16
optimizer = adamw
lr = 1e-3
total_steps = 4
batch_q = 3
batch_k = 2
frames = 4
augment = false
log_every = 2
"""


def test_train_evaluate_ablate_pipeline(tmp_path):
    data_dir = str(tmp_path / "data")
    n = gf.synth_corpus(data_dir, subjects=4, views=1, seqs_per_view=2,
                        frames=6, seed=5)
    assert n == 8

    result = gf.train(TINY_CONFIG, data_dir, str(tmp_path / "run"), seed=11)
    assert result["steps"] == 4
    assert [c.rsplit("/", 1)[-1] for c in result["checkpoints"]] == [
        "init.gfckpt",
        "final.gfckpt",
    ]
    final = result["checkpoints"][-1]

    report = gf.evaluate(final, data_dir, data_dir)
    assert report["probes_evaluated"] == 8
    assert 0.0 <= report["rank1"] <= report["rank5"] <= 1.0
    assert 0.0 <= report["map"] <= 1.0

    ablation = gf.shuffle_ablation(final, data_dir, seed=7)
    assert ablation["delta"] == pytest.approx(
        ablation["accuracy"] - ablation["shuffled_accuracy"])
