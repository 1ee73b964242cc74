import gzip
import struct

import numpy as np
import pytest
from hypothesis import given, settings, strategies as hs

from driftpatch import streams as st


def write_pair(tmp_path, images, labels, stem="set"):
    ip, lp = tmp_path / f"{stem}-images", tmp_path / f"{stem}-labels"
    st.write_idx(images, labels, ip, lp)
    return ip, lp


# --- IDX ingestion ------------------------------------------------------------

def test_idx_normalization_endpoints(tmp_path):
    images = np.array([[[0, 255], [255, 0]], [[255, 255], [0, 0]]], np.uint8)
    data = st.load_idx(*write_pair(tmp_path, images, [3, 7]))
    assert data.images.dtype == np.float32
    assert set(np.unique(data.images)) == {0.0, 1.0}
    assert data.labels.tolist() == [3, 7]


def test_labels_file_with_image_magic(tmp_path):
    ip, lp = write_pair(tmp_path, np.zeros((2, 2, 2), np.uint8), [0, 1])
    lp.write_bytes(struct.pack(">2I", 0x00000803, 2) + bytes([0, 1]))
    with pytest.raises(st.WrongMagicError):
        st.load_idx(ip, lp)


def test_truncated_pixels(tmp_path):
    ip, lp = write_pair(tmp_path, np.zeros((3, 4, 4), np.uint8), [0, 1, 2])
    ip.write_bytes(ip.read_bytes()[:-5])
    with pytest.raises(st.TruncatedFileError):
        st.load_idx(ip, lp)


def test_truncated_header(tmp_path):
    path = tmp_path / "x"
    path.write_bytes(struct.pack(">I", 0x00000803) + b"\0\0")
    with pytest.raises(st.TruncatedFileError):
        st.read_idx_images(path)


def test_count_mismatch(tmp_path):
    ip, _ = write_pair(tmp_path, np.zeros((3, 2, 2), np.uint8), [0, 1, 2])
    _, lp = write_pair(tmp_path, np.zeros((2, 2, 2), np.uint8), [0, 1], stem="other")
    with pytest.raises(st.CountMismatchError):
        st.load_idx(ip, lp)


def test_gzip_and_mnist_names(tmp_path):
    rng = np.random.default_rng(0)
    for prefix, n in (("train", 5), ("t10k", 3)):
        ip, lp = write_pair(tmp_path, rng.integers(0, 256, (n, 4, 4)), rng.integers(0, 10, n), prefix)
        (tmp_path / f"{prefix}-images-idx3-ubyte.gz").write_bytes(gzip.compress(ip.read_bytes()))
        lp.rename(tmp_path / f"{prefix}-labels-idx1-ubyte")
    train, test = st.load_mnist(tmp_path)
    assert len(train) == 5 and len(test) == 3
    assert len(st.load_pool(tmp_path)) == 8


def test_missing_mnist_file(tmp_path):
    with pytest.raises(FileNotFoundError):
        st.load_mnist(tmp_path)


def test_real_mnist_counts(mnist_dir):
    train, test = st.load_mnist(mnist_dir)
    assert train.images.shape == (60000, 28, 28) and len(test) == 10000
    assert set(np.unique(train.labels)) == set(range(10))
    assert train.images.min() == 0.0 and train.images.max() == 1.0


# --- transforms -----------------------------------------------------------------

def test_flip_grid():
    a = np.array([[1, 2], [3, 4]])
    assert st.transform_flip(a).tolist() == [[4, 3], [2, 1]]


@settings(max_examples=50, deadline=None)
@given(hs.integers(1, 9), hs.integers(1, 9), hs.integers(0, 2**31 - 1))
def test_flip_involution(h, w, seed):
    x = np.random.default_rng(seed).random((3, h, w), dtype=np.float32)
    assert np.array_equal(st.transform_flip(st.transform_flip(x)), x)


def test_flip_keeps_symmetric_image():
    x = np.array([[1, 0, 2], [5, 7, 5], [2, 0, 1]], np.float32)
    assert np.array_equal(st.transform_flip(x), x)


def test_rotate_zero_is_identity():
    x = np.random.default_rng(0).random((2, 6, 6))
    assert np.array_equal(st.transform_rotate(x, 0.0), x)


@pytest.mark.parametrize("size", [4, 8, 28])
def test_rotate_180_equals_flip(size):
    x = np.random.default_rng(size).random((3, size, size))
    assert np.array_equal(st.transform_rotate(x, 180.0), st.transform_flip(x))


def test_rotate_90_moves_pixel():
    # counterclockwise quarter turn about the center of a 5x5 grid: (r, c) -> (4 - c, r)
    x = np.zeros((5, 5))
    x[1, 4] = 1.0
    out = st.transform_rotate(x, 90.0)
    assert out[0, 1] == 1.0 and out.sum() == 1.0


def test_rotate_per_image_angles():
    x = np.random.default_rng(1).random((2, 6, 6))
    out = st.transform_rotate(x, [0.0, 180.0])
    assert np.array_equal(out[0], x[0]) and np.array_equal(out[1], st.transform_flip(x[1]))


def test_rotation_schedule_examples():
    r = st.Rotate(35_000, 65_000, 180.0)
    assert st.rotation_schedule(r, 10) == 0.0
    assert st.rotation_schedule(r, 35_000) == 0.0
    assert st.rotation_schedule(r, 65_000) == 180.0
    assert st.rotation_schedule(r, 50_000) == 90.0
    assert st.rotation_schedule(r, 70_000) == 180.0


@settings(max_examples=50, deadline=None)
@given(hs.integers(0, 100), hs.integers(0, 100), hs.lists(hs.integers(0, 300), min_size=2, max_size=20))
def test_rotation_schedule_monotone(a, span, positions):
    r = st.Rotate(a, a + span, 180.0)
    vals = st.rotation_schedule(r, np.sort(positions))
    assert np.all(np.diff(vals) >= 0)


# --- chunk arithmetic -------------------------------------------------------------

@pytest.mark.parametrize("name,chunk,cps,size", [
    ("mnist_flip", 1000, [30], 1000),
    ("mnist_rotate", 500, [30], 500),
    ("mnist_appear", 354, [15], None),
    ("mnist_remap", 500, [31], 500),
    ("mnist_transfer", 500, [31], 500),
    ("mnist_flip_reoccur", 500, [30, 70], 500),
])
def test_preset_chunk_arithmetic(name, chunk, cps, size):
    spec = st.preset(name)
    sizes = st.chunk_sizes(spec.total - spec.init_count, spec.chunks)
    assert len(sizes) == 100 and sizes[0] == chunk
    if size:
        assert set(sizes) == {size}
    assert [st.chunk_of_instance(spec, c) for c in st.change_points_of(spec.drift)] == cps


@settings(max_examples=200, deadline=None)
@given(hs.integers(1, 5000), hs.integers(1, 200))
def test_chunk_sizes_conserve_and_balance(n, k):
    if k > n:
        return
    sizes = st.chunk_sizes(n, k)
    assert sum(sizes) == n and max(sizes) - min(sizes) <= 1
    assert sizes == sorted(sizes, reverse=True)


def test_phase_map_examples():
    pm = st.phase_map(100, 30)
    assert pm.adaptation_range == range(30, 95) and pm.finish_range == range(95, 100)
    edge = st.phase_map(100, 95)
    assert len(edge.adaptation_range) == 0 and edge.finish_range == range(95, 100)
    with pytest.raises(st.ScenarioError):
        st.phase_map(100, None)


@pytest.mark.parametrize("kwargs", [
    dict(drift=st.Flip(100), init_count=100, total=200, chunks=10),
    dict(drift=st.Flip(100), init_count=10, total=50, chunks=10),
    dict(drift=st.Flip(100), init_count=10, total=200, chunks=0),
    dict(drift=st.Reoccur(100, 80), init_count=10, total=200, chunks=10),
    dict(drift=st.Flip(100), init_count=10, total=15, chunks=10),
])
def test_invalid_specs(kwargs):
    with pytest.raises(st.ScenarioError):
        st.ScenarioSpec("bad", **kwargs)


def test_unknown_preset():
    with pytest.raises(st.ScenarioError):
        st.preset("mnist_spin")


def test_spec_dict_round_trip():
    for name in st.PRESETS:
        spec = st.preset(name, 4)
        assert st.ScenarioSpec.from_dict(spec.to_dict()) == spec


# --- scenario construction on a toy pool ------------------------------------------

def _spec(drift, init=60, total=400, chunks=20, seed=3):
    return st.ScenarioSpec("toy", drift, init, total, chunks, seed)


ALL_DRIFTS = [
    st.Flip(200),
    st.Rotate(150, 300, 180.0),
    st.Appear((0, 1, 2, 3, 4), 200),
    st.Remap(((0, 5), (1, 6), (2, 7), (3, 8), (4, 9)), 210),
    st.Transfer((0, 1, 2, 3, 4), (5, 6, 7, 8, 9), 210),
    st.Reoccur(160, 300),
]


@pytest.mark.parametrize("drift", ALL_DRIFTS, ids=lambda d: d.kind)
def test_conservation_and_determinism(toy_pool, drift):
    spec = _spec(drift)
    a, b = st.build_scenario(toy_pool, spec), st.build_scenario(toy_pool, spec)
    assert len(a.init_set) + sum(a.chunk_sizes) == spec.total
    assert np.array_equal(a.init_set.images, b.init_set.images)
    assert all(np.array_equal(x.images, y.images) and np.array_equal(x.labels, y.labels)
               for x, y in zip(a.chunks, b.chunks))
    assert a.change_points == sorted(a.change_points) and all(c < spec.chunks for c in a.change_points)
    assert all(img.min() >= 0 and img.max() <= 1 for img in (c.images for c in a.chunks))
    assert all((c.labels < a.num_classes).all() for c in a.chunks)


def test_different_seed_changes_stream(toy_pool):
    a = st.build_scenario(toy_pool, _spec(st.Flip(200), seed=1))
    b = st.build_scenario(toy_pool, _spec(st.Flip(200), seed=2))
    assert not np.array_equal(a.chunks[0].images, b.chunks[0].images)


def _upright_by_position(stream):
    flat = st.LabeledImages.concat([stream.init_set] + stream.chunks)
    return np.array([img[lab % 8].mean() > 0.9 for img, lab in zip(flat.images, flat.labels)])


def test_flip_scenario_flips_after_cp(toy_pool):
    upright = _upright_by_position(st.build_scenario(toy_pool, _spec(st.Flip(200))))
    assert upright[:200].all() and not upright[200:].any()


def test_reoccur_flips_only_between_cps(toy_pool):
    upright = _upright_by_position(st.build_scenario(toy_pool, _spec(st.Reoccur(160, 300))))
    assert upright[:160].all() and not upright[160:300].any() and upright[300:].all()


def test_appear_contract(toy_pool):
    stream = st.build_scenario(toy_pool, _spec(ALL_DRIFTS[2]))
    cp = stream.change_points[0]
    assert set(np.unique(stream.init_set.labels)) <= set(range(5))
    for t, chunk in enumerate(stream.chunks):
        if t < cp:
            assert set(np.unique(chunk.labels)) <= set(range(5))
    after = np.concatenate([c.labels for c in stream.chunks[cp + 1:]])
    assert set(np.unique(after)) - set(range(5))


def test_remap_contract(toy_pool):
    stream = st.build_scenario(toy_pool, _spec(ALL_DRIFTS[3]))
    assert stream.num_classes == 5
    for chunk in stream.chunks:
        assert set(np.unique(chunk.labels)) <= set(range(5))
    # post-drift images show digits 5..9 (bright row 5, 6, 7, 0, 1) under labels 0..4
    last = stream.chunks[-1]
    rows = [int(np.argmax(img.mean(axis=1))) for img in last.images]
    assert all(r == (l + 5) % 8 for r, l in zip(rows, last.labels))


def test_transfer_contract(toy_pool):
    spec = _spec(ALL_DRIFTS[4])
    stream = st.build_scenario(toy_pool, spec)
    labels = np.concatenate([stream.init_set.labels] + [c.labels for c in stream.chunks])
    cp = spec.drift.cp
    assert np.isin(labels[:cp], range(5)).all()
    assert np.isin(labels[cp:], range(5, 10)).all()


def test_rotate_grows_with_schedule(toy_pool):
    stream = st.build_scenario(toy_pool, _spec(st.Rotate(150, 300, 180.0)))
    pre = stream.chunks[0]
    assert all(i[l % 8].mean() > 0.9 for i, l in zip(pre.images, pre.labels))


def test_insufficient_fresh_instances(toy_pool):
    with pytest.raises(st.ScenarioError):
        st.build_scenario(toy_pool, _spec(st.Transfer((0,), (1,), 200)))


# --- stream cache --------------------------------------------------------------------

@pytest.mark.parametrize("drift", ALL_DRIFTS, ids=lambda d: d.kind)
def test_cache_round_trip(toy_pool, tmp_path, drift):
    stream = st.build_scenario(toy_pool, _spec(drift))
    st.save_stream(stream, tmp_path / "s.drft")
    back = st.load_stream(tmp_path / "s.drft")
    assert back.spec == stream.spec and back.change_points == stream.change_points
    assert back.num_classes == stream.num_classes
    assert back.instance_change_points == stream.instance_change_points
    for x, y in zip([stream.init_set] + stream.chunks, [back.init_set] + back.chunks):
        assert np.abs(x.images - y.images).max() <= 1 / 255
        assert np.array_equal(x.labels, y.labels)


def test_cache_bytes_identical_on_regeneration(toy_pool, tmp_path):
    for name in ("a", "b"):
        st.save_stream(st.build_scenario(toy_pool, _spec(st.Flip(200))), tmp_path / name)
    assert (tmp_path / "a").read_bytes() == (tmp_path / "b").read_bytes()


@pytest.mark.parametrize("mutate", [lambda b: b"XXXX" + b[4:], lambda b: b[:-1], lambda b: b[:30],
                                    lambda b: b[:4] + (7).to_bytes(4, "little") + b[8:]])
def test_cache_rejects_corruption(toy_pool, tmp_path, mutate):
    path = tmp_path / "s.drft"
    st.save_stream(st.build_scenario(toy_pool, _spec(st.Flip(200))), path)
    path.write_bytes(mutate(path.read_bytes()))
    with pytest.raises(st.StreamError):
        st.load_stream(path)
