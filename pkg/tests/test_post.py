import itertools

import numpy as np
import pytest

from conftest import mask_of, windowed
from voxpipe.processing.post import binarize, connected_components, remove_small


def _blobs(sizes, shape=(4, 20, 30)):
    """x 方向に2ボクセルずつ空けて、指定サイズの直線成分を並べる"""
    m = np.zeros(shape, dtype=np.uint8)
    z = 0
    for size in sizes:
        flat = np.zeros(shape[1] * shape[2], dtype=np.uint8)
        flat[:size] = 1
        m[z] = flat.reshape(shape[1], shape[2])
        z += 2
    return mask_of(m)


def test_remove_small_drops_tiny_component():
    m = _blobs([96, 4])
    out = remove_small(m, 0.05)
    assert out.foreground == 96
    np.testing.assert_array_equal(out.data[0], m.data[0])


def test_remove_small_keeps_equal_components():
    m = _blobs([50, 50])
    assert remove_small(m, 0.05).foreground == 100


def test_remove_small_single_component_and_empty_are_unchanged():
    single = _blobs([7])
    assert remove_small(single, 0.5) is single
    empty = mask_of(np.zeros((2, 2, 2)))
    assert remove_small(empty).foreground == 0


def test_connectivity_controls_diagonal_neighbours():
    m = np.zeros((2, 2, 2), dtype=np.uint8)
    m[0, 0, 0] = m[1, 1, 1] = 1
    assert connected_components(mask_of(m), 26).count == 1
    assert connected_components(mask_of(m), 18).count == 2
    assert connected_components(mask_of(m), 6).count == 2
    with pytest.raises(ValueError):
        connected_components(mask_of(m), 8)


def test_cube_is_one_component():
    m = np.zeros((5, 5, 5), dtype=np.uint8)
    m[1:4, 1:4, 1:4] = 1
    cc = connected_components(mask_of(m), 6)
    assert cc.count == 1
    assert cc.sizes.tolist() == [27]
    assert set(np.unique(cc.labels)) == {0, 1}


def test_binarize_threshold_is_inclusive():
    p = windowed(np.array([[[0.49, 0.5, 0.51]]]))
    np.testing.assert_array_equal(binarize(p, 0.5).data[0, 0], [0, 1, 1])
    np.testing.assert_array_equal(binarize(p, 0.49).data[0, 0], [1, 1, 1])
    assert binarize(p).spacing == p.spacing


_OFFSETS = {
    26: [d for d in itertools.product((-1, 0, 1), repeat=3) if any(d)],
    6: [d for d in itertools.product((-1, 0, 1), repeat=3) if sum(map(abs, d)) == 1],
}


def _flood_fill_labels(data: np.ndarray, connectivity: int) -> np.ndarray:
    """スタックで素朴に塗りつぶす参照ラベリング"""
    labels = np.zeros(data.shape, dtype=np.int32)
    shape = data.shape
    n = 0
    for start in zip(*np.nonzero(data)):
        if labels[start]:
            continue
        n += 1
        labels[start] = n
        stack = [start]
        while stack:
            z, y, x = stack.pop()
            for dz, dy, dx in _OFFSETS[connectivity]:
                q = (z + dz, y + dy, x + dx)
                if 0 <= q[0] < shape[0] and 0 <= q[1] < shape[1] and 0 <= q[2] < shape[2] and data[q] and not labels[q]:
                    labels[q] = n
                    stack.append(q)
    return labels


def _same_partition(a: np.ndarray, b: np.ndarray) -> bool:
    fg = a > 0
    if not np.array_equal(fg, b > 0):
        return False
    pairs = set(zip(a[fg].tolist(), b[fg].tolist()))
    return len(pairs) == len({p[0] for p in pairs}) == len({p[1] for p in pairs})


def _random_masks(count, seed=0, shape=(32, 32, 32)):
    rng = np.random.default_rng(seed)
    for _ in range(count):
        yield mask_of(rng.random(shape) < rng.uniform(0.05, 0.3))


@pytest.mark.parametrize("connectivity,count", [(26, 50), (6, 10)])
def test_connected_components_agree_with_flood_fill(connectivity, count):
    for m in _random_masks(count, seed=connectivity):
        cc = connected_components(m, connectivity)
        ref = _flood_fill_labels(m.data, connectivity)
        assert cc.count == int(ref.max())
        assert _same_partition(cc.labels, ref)
        assert int(cc.sizes.sum()) == m.foreground


def test_remove_small_is_subset_and_idempotent():
    for m in _random_masks(10, seed=3, shape=(12, 16, 16)):
        once = remove_small(m, 0.05)
        assert np.all(once.data <= m.data)
        np.testing.assert_array_equal(remove_small(once, 0.05).data, once.data)


def test_binarize_is_idempotent():
    rng = np.random.default_rng(5)
    p = windowed(rng.random((6, 8, 8)))
    once = binarize(p)
    np.testing.assert_array_equal(binarize(once).data, once.data)
