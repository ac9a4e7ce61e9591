import numpy as np
import pytest
from PIL import Image

from unsam.data import (MANIFEST_HEADER, DomainSpec, generate_domain, generate_image, load_dataset,
                        make_registry, save_dataset)
from unsam.errors import FormatError, GenerationError, ValidationError
from unsam.metrics import connected_components

SMALL = DomainSpec("small", count_range=(2, 4), radius_range=(3, 5))


def test_deterministic_in_spec_and_seed():
    a, b = generate_domain(SMALL, 4, size=32, seed=9), generate_domain(SMALL, 4, size=32, seed=9)
    for s, t in zip(a, b):
        assert np.array_equal(s.image, t.image) and np.array_equal(s.instance_map, t.instance_map)
    c = generate_domain(SMALL, 4, size=32, seed=10)
    assert not np.array_equal(a[0].image, c[0].image)


def test_per_image_streams_are_prefix_stable():
    few, many = generate_domain(SMALL, 2, size=32, seed=3), generate_domain(SMALL, 5, size=32, seed=3)
    for s, t in zip(few, many):
        assert np.array_equal(s.image, t.image)


def test_fixed_count():
    spec = DomainSpec("three", count_range=(3, 3), radius_range=(3, 4))
    for s in generate_domain(spec, 5, size=48, seed=0):
        assert s.instance_map.max() == 3


def test_sample_invariants():
    for s in generate_domain(SMALL, 6, size=32, seed=1):
        s.validate(patch_size=8)
        labels = s.instance_map
        assert np.array_equal(s.semantic_mask, labels > 0)
        n = labels.max()
        assert SMALL.count_range[0] <= n <= SMALL.count_range[1]
        assert set(np.unique(labels)) == set(range(n + 1))        # contiguous 1..n
        for k in range(1, n + 1):
            assert connected_components(labels == k).max() == 1
        assert s.image.min() >= 0 and s.image.max() <= 1
        scaled = s.image.astype(np.float64) * 255
        assert np.abs(scaled - np.round(scaled)).max() < 1e-4     # 8-bit quantised


def test_non_overlapping_nuclei_keep_a_gap():
    spec = DomainSpec("gap", count_range=(5, 5), radius_range=(3, 4), min_gap=3)
    s = generate_domain(spec, 1, size=48, seed=2)[0]
    # with a clearance ring, no two instances touch even diagonally
    assert connected_components(s.instance_map > 0, 8).max() == 5


def test_generation_error_when_nuclei_cannot_fit():
    spec = DomainSpec("crowded", count_range=(30, 30), radius_range=(8, 8), max_retries=5)
    with pytest.raises(GenerationError):
        generate_image(spec, 32, np.random.default_rng(0))


@pytest.mark.parametrize("kwargs", [
    {"count_range": (0, 2)}, {"count_range": (3, 2)}, {"radius_range": (1, 3)},
    {"eccentricity_range": (0.0, 1.0)}, {"fg_color": (0.1, 0.2)},
])
def test_spec_invariants(kwargs):
    with pytest.raises(ValidationError):
        DomainSpec("bad", **kwargs)


def test_spec_from_dict():
    spec = DomainSpec.from_dict({"name": "x", "count_range": [2, 3]})
    assert spec.count_range == (2, 3)
    with pytest.raises(ValidationError):
        DomainSpec.from_dict({"name": "x", "colour": 1})


def test_save_load_round_trip(tmp_path):
    ds = generate_domain(SMALL, 3, size=32, seed=4)
    ds.splits = ["train", "test", "train"]
    save_dataset(ds, tmp_path / "d")
    back = load_dataset(tmp_path / "d")
    assert back.splits == ds.splits
    assert back.provenance["seed"] == 4
    for s, t in zip(ds, back):
        assert np.array_equal(s.image, t.image)
        assert np.array_equal(s.instance_map, t.instance_map)
        assert s.domain_id == t.domain_id and s.sample_id == t.sample_id


def test_manifest_errors(tmp_path):
    with pytest.raises(FormatError):
        load_dataset(tmp_path)
    ds = generate_domain(SMALL, 2, size=32, seed=4)
    save_dataset(ds, tmp_path / "d")
    (tmp_path / "d" / "labels" / f"{ds[1].sample_id}.png").unlink()
    with pytest.raises(FormatError):
        load_dataset(tmp_path / "d")
    (tmp_path / "e").mkdir()
    (tmp_path / "e" / "manifest.txt").write_text("id\timage\n")
    with pytest.raises(FormatError):
        load_dataset(tmp_path / "e")


def test_external_dataset_loads(tmp_path):
    root = tmp_path / "ext"
    (root / "img").mkdir(parents=True)
    rgb = np.zeros((16, 16, 3), np.uint8)
    rgb[4:8, 4:8] = 200
    labels = np.zeros((16, 16), np.uint16)
    labels[4:8, 4:8] = 1
    Image.fromarray(rgb).save(root / "img" / "x.png")
    Image.fromarray(labels).save(root / "img" / "x_label.png")
    (root / "manifest.txt").write_text(f"{MANIFEST_HEADER}\nx\timg/x.png\timg/x_label.png\t0\ttest\n")
    ds = load_dataset(root)
    assert len(ds) == 1 and ds.splits == ["test"]
    assert ds[0].image.shape == (3, 16, 16) and ds[0].instance_map.sum() == 16


def test_shape_mismatch_on_load(tmp_path):
    root = tmp_path / "bad"
    root.mkdir()
    Image.fromarray(np.zeros((16, 16, 3), np.uint8)).save(root / "a.png")
    Image.fromarray(np.zeros((8, 16), np.uint16)).save(root / "b.png")
    (root / "manifest.txt").write_text(f"{MANIFEST_HEADER}\nx\ta.png\tb.png\t0\ttrain\n")
    with pytest.raises(ValidationError):
        load_dataset(root)


def test_make_registry():
    specs = [DomainSpec(f"d{i}", count_range=(1, 2), radius_range=(3, 4)) for i in range(4)]
    reg, datasets = make_registry(specs, n_images=4, size=32, seed=1)
    assert reg.K == 4 and [k for k, _ in reg.domains] == [0, 1, 2, 3]
    for k, ds in enumerate(datasets):
        assert all(s.domain_id == k for s in ds)
        assert set(ds.splits) <= {"train", "test"} and ds.splits.count("test") == 1
        train_ids = {s.sample_id for s in ds.train}
        assert train_ids.isdisjoint({s.sample_id for s in ds.test})
    again = make_registry(specs, n_images=4, size=32, seed=1)[1]
    assert [d.splits for d in again] == [d.splits for d in datasets]
    reg1, _ = make_registry(specs[:1], n_images=2, size=32)
    assert reg1.K == 1
    with pytest.raises(ValidationError):
        make_registry([specs[0], specs[0]], n_images=2, size=32)
    with pytest.raises(ValidationError):
        make_registry([], n_images=2)


def test_domain_shift_in_colour():
    a = DomainSpec("a", count_range=(3, 4), radius_range=(4, 5), fg_color=(0.3, 0.1, 0.5))
    b = DomainSpec("b", count_range=(3, 4), radius_range=(4, 5), fg_color=(0.6, 0.4, 0.1))
    mean_fg = [np.mean([s.image[:, s.semantic_mask].mean(axis=1) for s in generate_domain(spec, 4, 32)],
                       axis=0) for spec in (a, b)]
    assert np.abs(mean_fg[0] - mean_fg[1]).max() > 0.2
