import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from vmrn import relhead
from vmrn.autodiff import ops
from vmrn.autodiff.gradcheck import grad_check
from vmrn.autodiff.ops import InvalidInputError
from vmrn.autodiff.tensor import ShapeError, Tensor
from vmrn.geometry import BBox, union_box
from vmrn.op2l import accumulate_gradients, assemble_batch, crop_pool, enumerate_pairs, pool_pairs, project_box


def random_boxes(rng, n, size=64):
    xy = rng.uniform(0, size - 4, (n, 2))
    wh = rng.uniform(1, size, (n, 2))
    return [BBox(x, y, min(size, x + w), min(size, y + h)) for (x, y), (w, h) in zip(xy, wh)]


def test_pair_counts_exhaustive():
    rng = np.random.default_rng(0)
    for n in range(9):
        pairs = enumerate_pairs(random_boxes(rng, n))
        assert len(pairs) == n * (n - 1)
        got = [(p.i, p.j) for p in pairs]
        assert got == [(i, j) for i in range(n) for j in range(n) if i != j]


def test_pairs_carry_union_boxes():
    boxes = random_boxes(np.random.default_rng(1), 5)
    pairs = enumerate_pairs(boxes)
    assert len(pairs) == 20
    ids = {(p.i, p.j) for p in pairs}
    assert all((j, i) in ids for i, j in ids)
    for p in pairs:
        assert p.i != p.j
        assert p.subject == boxes[p.i] and p.object == boxes[p.j]
        assert p.union == union_box(p.subject, p.object)


def test_projection_hand_example():
    assert project_box(BBox(16, 16, 48, 48), 64, 8) == (2, 6, 2, 6)


def test_projection_keeps_one_cell():
    r0, r1, c0, c1 = project_box(BBox(17, 17, 18, 18), 64, 8)
    assert (r1 - r0, c1 - c0) == (1, 1)


def test_crop_window_then_pool():
    feats = np.random.default_rng(2).standard_normal((3, 8, 8))
    out = crop_pool(Tensor(feats), BBox(16, 16, 48, 48), 64, (2, 2)).data
    want = feats[:, 2:6, 2:6].reshape(3, 2, 2, 2, 2).max(axis=(2, 4))
    np.testing.assert_array_equal(out, want)


def test_crop_full_image_is_identity():
    feats = np.random.default_rng(3).standard_normal((4, 7, 7))
    np.testing.assert_array_equal(crop_pool(Tensor(feats), BBox(0, 0, 64, 64), 64, (7, 7)).data, feats)


def test_tiny_box_replicates_one_cell():
    feats = np.random.default_rng(4).standard_normal((2, 8, 8))
    out = crop_pool(Tensor(feats), BBox(41, 9, 43, 11), 64, (7, 7)).data
    np.testing.assert_array_equal(out, np.broadcast_to(feats[:, 1:2, 5:6], (2, 7, 7)))


def test_crop_box_outside_image_is_rejected():
    with pytest.raises(InvalidInputError):
        crop_pool(Tensor(np.zeros((1, 8, 8))), BBox(70, 70, 80, 80), 64)


def test_crop_clips_partly_outside_box():
    feats = np.random.default_rng(5).standard_normal((2, 8, 8))
    a = crop_pool(Tensor(feats), BBox(-10, -10, 30, 30), 64).data
    b = crop_pool(Tensor(feats), BBox(0, 0, 30, 30), 64).data
    np.testing.assert_array_equal(a, b)


def test_crop_shape_fixed_for_random_boxes():
    rng = np.random.default_rng(6)
    feats = Tensor(rng.standard_normal((5, 8, 8)))
    for box in random_boxes(rng, 1000):
        assert crop_pool(feats, box, 64).shape == (5, 7, 7)


@settings(max_examples=200, deadline=None)
@given(
    st.integers(1, 16),
    st.integers(1, 16),
    st.floats(0, 60),
    st.floats(0, 60),
    st.floats(0.01, 64),
    st.floats(0.01, 64),
)
def test_crop_shape_property(h, w, x, y, bw, bh):
    feats = Tensor(np.zeros((2, h, w)))
    assert crop_pool(feats, BBox(x, y, x + bw, y + bh), 64, (7, 7)).shape == (2, 7, 7)


def test_batch_shape():
    rng = np.random.default_rng(7)
    feats = Tensor(rng.standard_normal((32, 8, 8)))
    batch = assemble_batch(feats, enumerate_pairs(random_boxes(rng, 3)), 64)
    assert batch.features.shape == (6, 96, 7, 7)


def test_swapped_pair_swaps_blocks():
    rng = np.random.default_rng(8)
    feats = Tensor(rng.standard_normal((4, 8, 8)))
    pairs = enumerate_pairs(random_boxes(rng, 2))
    x = assemble_batch(feats, pairs, 64).features.data
    np.testing.assert_array_equal(x[0, :4], x[1, 4:8])
    np.testing.assert_array_equal(x[0, 4:8], x[1, :4])
    np.testing.assert_array_equal(x[0, 8:], x[1, 8:])


def test_identical_boxes_give_equal_blocks():
    feats = Tensor(np.random.default_rng(9).standard_normal((3, 8, 8)))
    box = BBox(10, 12, 40, 50)
    x = assemble_batch(feats, enumerate_pairs([box, box])[:1], 64).features.data[0]
    np.testing.assert_array_equal(x[:3], x[3:6])
    np.testing.assert_array_equal(x[:3], x[6:])


def test_batch_rows_follow_pair_order():
    rng = np.random.default_rng(10)
    feats = Tensor(rng.standard_normal((3, 8, 8)))
    pairs = enumerate_pairs(random_boxes(rng, 4))
    base = assemble_batch(feats, pairs, 64).features.data
    perm = rng.permutation(len(pairs))
    shuffled = assemble_batch(feats, [pairs[k] for k in perm], 64).features.data
    np.testing.assert_array_equal(shuffled, base[perm])


def test_batched_pooling_matches_per_image():
    rng = np.random.default_rng(11)
    feats = rng.standard_normal((2, 3, 8, 8))
    per_image = [enumerate_pairs(random_boxes(rng, 3)), enumerate_pairs(random_boxes(rng, 2))]
    block, prov = pool_pairs(Tensor(feats), per_image, 64)
    assert [n for n, _ in prov] == [0] * 6 + [1] * 2
    want = np.concatenate([assemble_batch(Tensor(feats[n]), per_image[n], 64).features.data for n in range(2)])
    np.testing.assert_array_equal(block.data, want)


def test_accumulate_counts_shared_box():
    # a single-cell box in k pairs: every pooled cell carries g, so that cell sums k * 49 * g
    feats = np.zeros((1, 8, 8))
    feats[0, 0, 0] = 1.0
    tiny = BBox(0, 0, 2, 2)
    others = [BBox(30, 30, 60, 60), BBox(20, 40, 50, 62), BBox(40, 2, 62, 20)]
    pairs = [p for p in enumerate_pairs([tiny] + others) if p.i == 0]
    grads = np.zeros((len(pairs), 3, 7, 7))
    grads[:, 0] = 0.5  # subject block only
    g = accumulate_gradients(feats, grads, pairs, 64)
    assert g[0, 0, 0] == pytest.approx(len(pairs) * 49 * 0.5)
    assert np.count_nonzero(g) == 1


def test_accumulate_zero_in_zero_out():
    rng = np.random.default_rng(12)
    feats = rng.standard_normal((2, 8, 8))
    pairs = enumerate_pairs(random_boxes(rng, 3))
    assert not accumulate_gradients(feats, np.zeros((6, 6, 7, 7)), pairs, 64).any()


def test_accumulate_rejects_wrong_shape():
    pairs = enumerate_pairs(random_boxes(np.random.default_rng(13), 2))
    with pytest.raises(ShapeError):
        accumulate_gradients(np.zeros((2, 8, 8)), np.zeros((2, 5, 7, 7)), pairs, 64)


def test_accumulate_is_linear():
    rng = np.random.default_rng(14)
    feats = rng.standard_normal((2, 8, 8))
    pairs = enumerate_pairs(random_boxes(rng, 3))
    g1, g2 = rng.standard_normal((2, 6, 6, 7, 7))
    a = accumulate_gradients(feats, g1, pairs, 64)
    b = accumulate_gradients(feats, g2, pairs, 64)
    np.testing.assert_allclose(accumulate_gradients(feats, g1 + 2 * g2, pairs, 64), a + 2 * b, atol=1e-12)


@pytest.mark.parametrize("seed", range(20))
def test_full_pairing_path_finite_differences(seed):
    # shared features -> crop/pool/concat -> relation head -> loss
    rng = np.random.default_rng(seed)
    c = 3
    head = {k: Tensor(v) for k, v in relhead.init_params(c, (7, 7), hidden=8, rng=rng, dtype=np.float64).items()}
    pairs = enumerate_pairs(random_boxes(rng, 2))
    labels = rng.integers(0, 3, len(pairs))

    def path(feats):
        block, _ = pool_pairs(ops.reshape(feats, (1, c, 8, 8)), [pairs], 64)
        return ops.softmax_cross_entropy(relhead.logits(head, block), labels)

    assert grad_check(path, [rng.standard_normal((c, 8, 8))], seed=seed) < 1e-4
