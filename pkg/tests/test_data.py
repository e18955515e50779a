import numpy as np
import pytest
from PIL import Image

from vimkit.data import (
    DatasetError,
    Item,
    LabeledDataset,
    SplitSpec,
    batches,
    generate_synthetic,
    load_dataset,
    preprocess,
    read_image,
    read_split_manifest,
    resize_bilinear,
    save_dataset,
    split_counts,
    stratified_split,
    to_three_channel,
    write_split_manifest,
)
from vimkit.vim_model import VimConfig

TABLE_COUNTS = (463, 345, 272, 169, 152, 153)


def counted_dataset(counts):
    items = []
    for c, n in enumerate(counts):
        items.extend(Item(np.zeros((2, 2), np.uint8), c, f"k{c}/{i:04d}.png") for i in range(n))
    return LabeledDataset(items, [f"k{c}" for c in range(len(counts))])


def write_pngs(root, layout):
    for cls, n in layout.items():
        (root / cls).mkdir(parents=True)
        for i in range(n):
            Image.fromarray(np.full((6, 6), 10 * i, np.uint8)).save(root / cls / f"{i}.png")


# -- loading ---------------------------------------------------------------------


def test_load_dataset_sorted_labels(tmp_path):
    write_pngs(tmp_path, {"b": 2, "a": 3, "c": 1})
    ds = load_dataset(tmp_path)
    assert ds.class_names == ["a", "b", "c"]
    assert ds.class_counts() == [3, 2, 1]
    assert ds.items[0].sample_id == "a/0.png"


def test_load_single_image(tmp_path):
    write_pngs(tmp_path, {"only": 1})
    assert len(load_dataset(tmp_path)) == 1


def test_load_corrupt_file_names_it(tmp_path):
    write_pngs(tmp_path, {"a": 1})
    (tmp_path / "a" / "broken.png").write_bytes(b"not an image")
    with pytest.raises(DatasetError, match="broken.png"):
        load_dataset(tmp_path)


def test_load_empty_class_and_no_classes(tmp_path):
    with pytest.raises(DatasetError, match="no class"):
        load_dataset(tmp_path)
    (tmp_path / "empty").mkdir()
    with pytest.raises(DatasetError, match="no images"):
        load_dataset(tmp_path)


def test_sixteen_bit_images(tmp_path):
    arr = np.array([[0, 65535], [1000, 30000]], dtype=np.uint16)
    Image.fromarray(arr).save(tmp_path / "x.png")
    got = read_image(tmp_path / "x.png")
    np.testing.assert_array_equal(got, arr)
    out = preprocess(got, 2).data
    assert out.max() == pytest.approx(1.0) and out.min() == 0.0


def test_label_out_of_range():
    with pytest.raises(DatasetError):
        LabeledDataset([Item(np.zeros((2, 2)), 3, "x")], ["a", "b"])


# -- preprocessing ---------------------------------------------------------------


def test_to_three_channel(rng):
    out = to_three_channel(np.array([[0.25]])).data
    np.testing.assert_array_equal(out[:, 0, 0], [0.25, 0.25, 0.25])
    assert not to_three_channel(np.zeros((4, 4))).data.any()
    img = rng.normal(size=(5, 7)).astype(np.float32)
    out = to_three_channel(img).data
    assert out.shape == (3, 5, 7)
    for c in range(3):
        np.testing.assert_array_equal(out[c], img)


def test_to_three_channel_rejects_multichannel():
    with pytest.raises(ValueError):
        to_three_channel(np.zeros((3, 4, 4)))


def test_resize_identity_at_same_size(rng):
    img = rng.uniform(size=(8, 8))
    np.testing.assert_array_equal(resize_bilinear(img, 8), img)


def test_bilinear_checkerboard_corners_and_midpoints():
    src = np.array([[0.0, 1.0], [1.0, 0.0]])
    out = resize_bilinear(src, 4)
    assert out[0, 0] == 0.0 and out[0, 3] == 1.0 and out[3, 0] == 1.0 and out[3, 3] == 0.0
    # corner-aligned: output x=1 samples source x=1/3
    assert out[0, 1] == pytest.approx(1 / 3)
    assert out[1, 1] == pytest.approx((2 / 3) * (2 / 3) * 0 + 2 * (1 / 3) * (2 / 3) * 1 + (1 / 9) * 0)


def test_preprocess_scaling_and_determinism():
    cfg = VimConfig()
    img = np.full((40, 50), 255, np.uint8)
    out = preprocess(img, cfg).data
    assert out.shape == (3, 32, 32) and out.max() <= 1.0
    np.testing.assert_array_equal(preprocess(img, cfg).data, out)


def test_preprocess_rejects_zero_area():
    with pytest.raises(ValueError):
        preprocess(np.zeros((0, 5), np.uint8), 8)


# -- splitting -------------------------------------------------------------------


@pytest.mark.parametrize("n,expected", [(463, (371, 46, 46)), (100, (80, 10, 10)), (7, (7, 0, 0)), (1, (1, 0, 0))])
def test_split_counts_floor_rule(n, expected):
    assert split_counts(n, (0.8, 0.1, 0.1)) == expected


def test_small_class_warns(caplog):
    with caplog.at_level("WARNING"):
        tr, va, te = stratified_split(counted_dataset([7, 20]), SplitSpec())
    assert "empty" in caplog.text
    assert tr.class_counts() == [7, 16] and va.class_counts() == [0, 2]


def test_table_split_partition_exact():
    ds = counted_dataset(TABLE_COUNTS)
    tr, va, te = stratified_split(ds, SplitSpec(seed=11))
    assert tr.class_counts()[0] == 371 and va.class_counts()[0] == 46 and te.class_counts()[0] == 46
    ids = [it.sample_id for part in (tr, va, te) for it in part.items]
    assert len(ids) == len(set(ids)) == 1554
    assert set(ids) == {it.sample_id for it in ds.items}
    for k, part in enumerate((tr, va, te)):
        assert part.class_counts() == [split_counts(n, (0.8, 0.1, 0.1))[k] for n in TABLE_COUNTS]
    assert abs(len(va) - 154) <= 5 and abs(len(te) - 158) <= 5


def test_split_determinism_and_seed_dependence():
    ds = counted_dataset([50, 50])
    a = stratified_split(ds, SplitSpec(seed=3))
    b = stratified_split(ds, SplitSpec(seed=3))
    c = stratified_split(ds, SplitSpec(seed=4))
    ids = lambda s: [[it.sample_id for it in p.items] for p in s]  # noqa: E731
    assert ids(a) == ids(b)
    assert ids(a) != ids(c)


@pytest.mark.parametrize("ratios", [(0.8, 0.1, 0.2), (1.2, -0.1, -0.1), (0.5, 0.5)])
def test_split_spec_validation(ratios):
    with pytest.raises(ValueError):
        SplitSpec(ratios)


# -- batching --------------------------------------------------------------------


def test_batch_sizes_and_order():
    ds = counted_dataset([5, 5])
    sizes = [len(y) for _, y in batches(ds, 4, seed=0, epoch=0, image_size=4)]
    assert sizes == [4, 4, 2]
    run = lambda e: np.concatenate([y for _, y in batches(ds, 4, 1, e, 4)])  # noqa: E731
    np.testing.assert_array_equal(run(0), run(0))
    syn = generate_synthetic(per_class=2, image_size=4)
    orders = {np.concatenate([x for x, _ in batches(syn, 4, 1, e, 4)]).tobytes() for e in range(10)}
    assert len(orders) > 1
    assert sorted(run(0).tolist()) == [0] * 5 + [1] * 5


def test_batch_order_follows_items():
    ds = generate_synthetic(per_class=2, image_size=8)
    imgs, labels = ds.arrays(8)
    seen = [x for x, _ in batches(ds, 5, 2, 0, 8)]
    perm = np.random.default_rng([2, 0]).permutation(len(ds))
    np.testing.assert_array_equal(np.concatenate(seen), imgs[perm])


def test_batch_size_validation():
    with pytest.raises(ValueError):
        list(batches(counted_dataset([2, 2]), 0, 0, 0, 4))


# -- synthetic -------------------------------------------------------------------


def test_synthetic_counts_and_determinism():
    a = generate_synthetic(6, 50, 32, seed=5)
    b = generate_synthetic(6, 50, 32, seed=5)
    assert len(a) == 300 and a.class_counts() == [50] * 6
    assert all(np.array_equal(x.source, y.source) for x, y in zip(a.items, b.items))
    c = generate_synthetic(6, 50, 32, seed=6)
    assert not np.array_equal(a.items[0].source, c.items[0].source)


@pytest.mark.parametrize("variant", ["A", "B"])
def test_synthetic_class_means_distinct(variant):
    ds = generate_synthetic(6, 40, 32, seed=0, variant=variant)
    imgs, labels = ds.arrays(32)
    means = []
    for c in range(6):
        m = imgs[labels == c, 0].astype(np.float64).reshape(-1)
        means.append((m - m.mean()) / (np.linalg.norm(m - m.mean()) + 1e-12))
    for i in range(6):
        for j in range(i + 1, 6):
            assert np.linalg.norm(means[i] - means[j]) > 0.05


def test_synthetic_validation():
    with pytest.raises(ValueError):
        generate_synthetic(per_class=0)
    with pytest.raises(ValueError):
        generate_synthetic(num_classes=7)
    with pytest.raises(ValueError):
        generate_synthetic(variant="Z")


# -- manifests -------------------------------------------------------------------


def test_save_load_and_manifest_round_trip(tmp_path):
    ds = generate_synthetic(3, 10, 16, seed=1)
    assert save_dataset(ds, tmp_path / "data") == 30
    disk = load_dataset(tmp_path / "data")
    assert disk.class_names == ds.class_names
    np.testing.assert_array_equal(disk.arrays(16)[0], ds.arrays(16)[0])
    splits = stratified_split(disk, SplitSpec(seed=2))
    write_split_manifest(tmp_path / "split.tsv", splits, disk.class_names, root=tmp_path / "data")
    text = (tmp_path / "split.tsv").read_text()
    assert text.startswith("#root\t")
    assert "0_hstripes/00000.png\t0\t" in text
    back = read_split_manifest(tmp_path / "split.tsv")
    for name, part in zip(("train", "val", "test"), splits):
        assert [it.sample_id for it in back[name].items] == sorted(it.sample_id for it in part.items)
        assert back[name].class_names == disk.class_names
    np.testing.assert_array_equal(back["val"].arrays(16)[0], splits[1].arrays(16)[0])


def test_manifest_malformed_row(tmp_path):
    p = tmp_path / "m.tsv"
    p.write_text("#classes\ta\nx.png\t0\tholdout\n")
    with pytest.raises(DatasetError, match=":2:"):
        read_split_manifest(p, root=tmp_path)
