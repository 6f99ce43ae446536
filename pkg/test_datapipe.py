"""
Tests for tiling, splits, collocation, sampling, containers, loading and the on-disk pipeline
"""

import json

import numpy as np
import pytest

from conftest import acquisition_times
from highfm.datapipe import (
    Manifest,
    ManifestEntry,
    PatchSample,
    Prefetcher,
    Scene,
    SplitRules,
    SynthConfig,
    YearRange,
    assign_split,
    build_multi_timestep_set,
    collate,
    collocate_labels,
    decode_container,
    encode_container,
    filter_patch,
    fire_train_filter,
    fnv1a64,
    in_season,
    iterate_batches,
    keep_tiles,
    read_container,
    sample_multi_timestep,
    synth_generate,
    tile_scene,
    write_container,
)
from highfm.datapipe.pipeline import MANIFEST_NAME, assign_manifest_splits, collocate_dir, write_synthetic, write_tiles
from highfm.encodings import Timestamp
from highfm.errors import (
    CollocationError,
    ConfigError,
    ContractError,
    DigestMismatchError,
    MagicMismatchError,
    SampleUnavailableError,
    ShapeError,
    SplitError,
    TruncatedContainerError,
    VersionMismatchError,
)


def _scene(h=64, w=64, c=2, land=None, cloud=None, fire=None):
    data = np.arange(c * h * w, dtype=np.float32).reshape(c, h, w)
    labels = {"fire": fire} if fire is not None else {}
    return Scene(
        data=data,
        timestamp=Timestamp.from_calendar(2021, 180, 600),
        land_mask=np.ones((h, w), dtype=np.uint8) if land is None else land,
        scene_id="region000",
        cloud_mask=cloud,
        labels=labels,
    )


def _single(location, minute, day=180, label=None):
    return PatchSample(
        data=np.full((1, 2, 4, 4), float(minute), dtype=np.float32),
        timestamps=[Timestamp.from_calendar(2021, day, minute)],
        label=label,
        location=location,
    )


# ---------------------------------------------------------------------------
# Scenes and tiling
# ---------------------------------------------------------------------------


def test_tile_scene_offsets():
    scene = _scene()
    tiles = tile_scene(scene)
    assert [t.location for t in tiles] == [("region000", r, c) for r in (0, 1) for c in (0, 1)]
    np.testing.assert_array_equal(tiles[2].data[0], scene.data[:, 32:64, 0:32])
    assert tiles[0].timestamps == [scene.timestamp]


def test_tile_scene_skips_partial_strips():
    assert len(tile_scene(_scene(h=70, w=100))) == 2 * 3


def test_tile_scene_too_small():
    with pytest.raises(ShapeError):
        tile_scene(_scene(h=16, w=64), tile_size=32)


def test_tile_scene_attaches_task_label():
    fire = np.zeros((64, 64), dtype=np.uint8)
    fire[40, 5] = 1
    tiles = tile_scene(_scene(fire=fire), task="fire")
    assert tiles[2].label[8, 5] == 1
    assert sum(int(t.label.sum()) for t in tiles) == 1
    with pytest.raises(KeyError):
        tile_scene(_scene(), task="cloud")


def test_tiling_is_a_partition_of_full_tiles():
    gen = np.random.default_rng(7)
    for _ in range(300):
        tile = int(gen.choice([2, 4, 8]))
        h, w = (int(v) for v in gen.integers(tile, 5 * tile + tile // 2 + 1, size=2))
        scene = _scene(h=h, w=w, c=1)
        covered = np.zeros((h, w), dtype=int)
        for patch in tile_scene(scene, tile_size=tile):
            _, i, j = patch.location
            window = (slice(i * tile, (i + 1) * tile), slice(j * tile, (j + 1) * tile))
            covered[window] += 1
            np.testing.assert_array_equal(patch.data[0, 0], scene.data[0][window])
        rows, cols = (h // tile) * tile, (w // tile) * tile
        assert (covered[:rows, :cols] == 1).all()
        assert covered[rows:].sum() == 0 and covered[:, cols:].sum() == 0


def test_filter_drops_ocean_and_full_cloud():
    land = np.zeros((64, 64), dtype=np.uint8)
    land[:32, :32] = 1
    cloud = np.zeros((64, 64), dtype=np.uint8)
    cloud[:32, :32] = 1
    cloud[32:, 32:] = 1
    land[32:, 32:] = 1
    kept = keep_tiles(tile_scene(_scene(land=land, cloud=cloud)))
    assert [t.location[1:] for t in kept] == []
    kept = keep_tiles(tile_scene(_scene(land=land, cloud=cloud)), drop_full_cloud=False)
    assert [t.location[1:] for t in kept] == [(0, 0), (1, 1)]


def test_filter_patch_partial_cloud_passes():
    cloud = np.ones((4, 4))
    cloud[0, 0] = 0
    assert filter_patch(None, np.ones((4, 4)), cloud)
    assert not filter_patch(None, np.zeros((4, 4)), None)


def test_patch_sample_validation():
    with pytest.raises(ContractError):
        PatchSample(np.zeros((2, 1, 4, 4)), acquisition_times(2))
    with pytest.raises(ShapeError):
        PatchSample(np.zeros((1, 1, 4, 4)), acquisition_times(2))
    with pytest.raises(ShapeError):
        PatchSample(np.zeros((1, 1, 4, 4)), acquisition_times(1), label=np.zeros((3, 3)))
    with pytest.raises(ContractError):
        PatchSample(np.zeros((1, 1, 4, 4)), acquisition_times(1), label=np.full((4, 4), 2))
    spread = [acquisition_times(1, offset)[0] for offset in (0, 1800, 4000)]
    with pytest.raises(ContractError):
        PatchSample(np.zeros((3, 1, 4, 4)), spread)


def test_scene_mask_shape_checked():
    with pytest.raises(ShapeError):
        _scene(land=np.ones((32, 32), dtype=np.uint8))


# ---------------------------------------------------------------------------
# Splits
# ---------------------------------------------------------------------------


@pytest.mark.parametrize(
    "year, day, expected",
    [(2020, 100, "train"), (2021, 300, "train"), (2022, 180, "validation"), (2023, 1, "test"), (2024, 366, "test")],
)
def test_finetune_splits(year, day, expected):
    assert assign_split(Timestamp.from_calendar(year, day, 0), SplitRules.finetune()) == expected


@pytest.mark.parametrize(
    "year, day, expected",
    [(2016, 200, "train"), (2014, 1, "train"), (2019, 160, "validation"), (2019, 220, "test")],
)
def test_pretrain_splits(year, day, expected):
    assert assign_split(Timestamp.from_calendar(year, day, 0), SplitRules.pretrain()) == expected


@pytest.mark.parametrize("year, day", [(2019, 310), (2013, 100), (2025, 100)])
def test_uncovered_timestamps(year, day):
    rules = SplitRules.pretrain() if year < 2020 else SplitRules.finetune()
    with pytest.raises(SplitError):
        assign_split(Timestamp.from_calendar(year, day, 0), rules)


def test_custom_pretrain_years_move_evaluation():
    rules = SplitRules.pretrain(2015, 2016)
    assert assign_split(Timestamp.from_calendar(2017, 160, 0), rules) == "validation"
    with pytest.raises(SplitError):
        assign_split(Timestamp.from_calendar(2014, 160, 0), rules)


def test_split_rules_validation():
    with pytest.raises(ConfigError):
        SplitRules(rules={"train": [YearRange(first=2020, last=2022)], "test": [YearRange(first=2022, last=2023)]})
    with pytest.raises(ConfigError):
        YearRange(first=2021, last=2020)
    with pytest.raises(ConfigError):
        YearRange(first=2021, last=2021, months=(13,))
    # same year, disjoint months
    SplitRules(
        rules={
            "validation": [YearRange(first=2019, last=2019, months=(5,))],
            "test": [YearRange(first=2019, last=2019, months=(8,))],
        }
    )


@pytest.mark.parametrize(
    "rules, covered",
    [
        (SplitRules.pretrain(), lambda t: 2014 <= t.year <= 2018 or (t.year == 2019 and 5 <= t.month <= 9)),
        (SplitRules.finetune(), lambda t: 2020 <= t.year <= 2024),
    ],
    ids=["pretrain", "finetune"],
)
def test_split_assignment_is_disjoint_and_total(rules, covered):
    gen = np.random.default_rng(11)
    start = Timestamp.from_calendar(2013, 1, 0).epoch_seconds
    stop = Timestamp.from_calendar(2026, 1, 0).epoch_seconds
    for epoch in gen.integers(start, stop, size=2000):
        t = Timestamp.from_epoch(int(epoch))
        owners = [name for name, ranges in rules.rules.items() if any(r.covers(t) for r in ranges)]
        assert len(owners) == (1 if covered(t) else 0)
        if owners:
            assert assign_split(t, rules) == owners[0]
        else:
            with pytest.raises(SplitError):
                assign_split(t, rules)


def test_pretrain_and_finetune_years_are_disjoint():
    assert not set(SplitRules.pretrain().years) & set(SplitRules.finetune().years)


def test_split_rules_from_file(tmp_path):
    path = tmp_path / "rules.json"
    path.write_text(json.dumps({"train": [[2010, 2012]], "test": [[2013, 2013, [6, 7]]]}))
    rules = SplitRules.from_file(path)
    assert rules.years == [2010, 2011, 2012, 2013]
    assert assign_split(Timestamp.from_calendar(2013, 180, 0), rules) == "test"


# ---------------------------------------------------------------------------
# Collocation
# ---------------------------------------------------------------------------


def _t(seconds):
    return Timestamp.from_epoch(1_600_000_000 + seconds)


def test_collocation_nearest_within_tolerance():
    images = [(_t(0), "img0"), (_t(1000), "img1"), (_t(5000), "img2")]
    labels = [(_t(-300), "a"), (_t(400), "b"), (_t(1200), "c")]
    assert collocate_labels(images, labels, tolerance_s=600) == [("img0", "a"), ("img1", "c")]


def test_collocation_tie_goes_to_earlier_label():
    assert collocate_labels([(_t(0), "img")], [(_t(-300), "early"), (_t(300), "late")]) == [("img", "early")]


def test_collocation_label_reuse_and_boundary():
    images = [(_t(0), "x"), (_t(10), "y")]
    assert collocate_labels(images, [(_t(600), "l")], tolerance_s=600) == [("x", "l"), ("y", "l")]
    assert collocate_labels(images, [(_t(611), "l")], tolerance_s=600) == []


def test_collocation_needs_sorted_inputs():
    with pytest.raises(CollocationError):
        collocate_labels([(_t(10), "b"), (_t(0), "a")], [])


# ---------------------------------------------------------------------------
# Sampling
# ---------------------------------------------------------------------------


def test_multi_timestep_triple_shares_an_hour(rng):
    loc = ("region000", 0, 0)
    series = [_single(loc, m, label=np.full((4, 4), m % 2, dtype=np.uint8)) for m in (600, 615, 630, 645, 660)]
    for _ in range(20):
        triple = sample_multi_timestep(series, rng)
        assert triple.timesteps == 3
        assert all(triple.timestamps[0].same_hour(t) for t in triple.timestamps)
        assert triple.timestamps == sorted(triple.timestamps)
        latest_minute = triple.timestamps[-1].minute_of_day
        assert np.all(triple.label == latest_minute % 2)
        np.testing.assert_array_equal(triple.data[:, 0, 0, 0], [t.minute_of_day for t in triple.timestamps])


def test_multi_timestep_unavailable(rng):
    loc = ("region000", 0, 0)
    with pytest.raises(SampleUnavailableError):
        sample_multi_timestep([_single(loc, m) for m in (600, 615, 660, 675)], rng)


def test_multi_timestep_rejects_mixed_locations(rng):
    with pytest.raises(ContractError):
        sample_multi_timestep([_single(("a", 0, 0), 600), _single(("b", 0, 0), 615), _single(("a", 0, 0), 630)], rng)


def test_build_multi_timestep_set_skips_sparse_locations(rng):
    dense = [_single(("a", 0, 0), m) for m in (600, 610, 620)]
    sparse = [_single(("b", 0, 0), m) for m in (600, 700)]
    triples = build_multi_timestep_set(sparse + dense, rng)
    assert [t.location for t in triples] == [("a", 0, 0)]


def test_multi_timestep_subsets_are_uniform():
    loc = ("region000", 0, 0)
    series = [_single(loc, m) for m in (600, 615, 630, 645)]
    gen = np.random.default_rng(3)
    draws = 10_000
    counts = {}
    for _ in range(draws):
        key = tuple(t.minute_of_day for t in sample_multi_timestep(series, gen).timestamps)
        counts[key] = counts.get(key, 0) + 1
    assert len(counts) == 4
    sigma = np.sqrt(draws * 0.25 * 0.75)
    for count in counts.values():
        assert abs(count - draws / 4) <= 3 * sigma


def test_multi_timestep_same_hour_over_random_archives():
    gen = np.random.default_rng(5)
    loc = ("region000", 0, 0)
    for _ in range(500):
        minutes = sorted(int(m) for m in gen.choice(24 * 60, size=int(gen.integers(3, 30)), replace=False))
        series = [_single(loc, m) for m in minutes]
        try:
            triple = sample_multi_timestep(series, gen)
        except SampleUnavailableError:
            assert all(np.bincount([m // 60 for m in minutes]) < 3)
            continue
        assert len({t.hour_bucket for t in triple.timestamps}) == 1
        assert triple.timestamps == sorted(triple.timestamps)
        assert len(set(triple.timestamps)) == 3


def test_fire_train_filter():
    empty = _single(("a", 0, 0), 600, label=np.zeros((4, 4), dtype=np.uint8))
    burning = _single(("a", 0, 1), 600, label=np.eye(4, dtype=np.uint8))
    assert fire_train_filter([empty, burning], "train") == [burning]
    assert fire_train_filter([empty, burning], "test") == [empty, burning]
    with pytest.raises(ContractError):
        fire_train_filter([_single(("a", 0, 0), 600)], "validation")


# ---------------------------------------------------------------------------
# Containers and manifests
# ---------------------------------------------------------------------------


def test_fnv1a64_reference_values():
    assert fnv1a64(b"") == 0xCBF29CE484222325
    assert fnv1a64(b"a") == 0xAF63DC4C8601EC8C


def test_container_round_trip(make_samples):
    sample = make_samples(n=1, timesteps=3)[0]
    decoded = decode_container(encode_container(sample))
    np.testing.assert_array_equal(decoded.data, sample.data)
    np.testing.assert_array_equal(decoded.label, sample.label)
    assert decoded.timestamps == sample.timestamps


def _random_sample(gen):
    t = int(gen.choice([1, 3]))
    c, h, w = (int(v) for v in gen.integers(1, 6, size=3))
    hour = int(gen.integers(400_000, 500_000)) * 3600
    seconds = sorted(int(s) for s in gen.choice(3600, size=t, replace=False))
    label = (gen.random((h, w)) < 0.3).astype(np.uint8) if gen.random() < 0.5 else None
    return PatchSample(
        data=gen.normal(size=(t, c, h, w)).astype(np.float32),
        timestamps=[Timestamp.from_epoch(hour + s) for s in seconds],
        label=label,
    )


@pytest.mark.parametrize("cases", [300, pytest.param(10_000, marks=pytest.mark.slow)])
def test_container_round_trips_random_archives(cases):
    gen = np.random.default_rng(2024)
    for _ in range(cases):
        sample = _random_sample(gen)
        decoded = decode_container(encode_container(sample))
        np.testing.assert_array_equal(decoded.data, sample.data)
        assert decoded.timestamps == sample.timestamps
        if sample.label is None:
            assert decoded.label is None
        else:
            np.testing.assert_array_equal(decoded.label, sample.label)


@pytest.mark.parametrize(
    "corrupt, error",
    [
        (lambda blob: b"HFMPX" + blob[5:], MagicMismatchError),
        (lambda blob: blob[:5] + b"\x02" + blob[6:], VersionMismatchError),
        (lambda blob: blob[:3], TruncatedContainerError),
        (lambda blob: blob[:12], TruncatedContainerError),
        (lambda blob: blob[:-9], TruncatedContainerError),
        (lambda blob: blob[:40] + bytes([blob[40] ^ 0xFF]) + blob[41:], DigestMismatchError),
    ],
)
def test_corrupted_containers(make_samples, corrupt, error):
    blob = encode_container(make_samples(n=1)[0])
    with pytest.raises(error):
        decode_container(corrupt(blob))


def test_read_container_checks_manifest_digest(make_samples, tmp_path):
    sample = make_samples(n=1)[0]
    path = tmp_path / "region000__r000_c000__1.hfmp"
    digest = write_container(path, sample)
    assert len(digest) == 16
    assert read_container(path, expected_digest=digest).location == ("region000", 0, 0)
    with pytest.raises(DigestMismatchError):
        read_container(path, expected_digest="0" * 16)


def test_manifest_round_trip(make_samples, tmp_path):
    entries = []
    for k, sample in enumerate(make_samples(n=3)):
        name = f"tiles/s{k}.hfmp"
        entries.append(ManifestEntry(name, write_container(tmp_path / name, sample), 2020, "train" if k else "test"))
    Manifest(list(reversed(entries)), root=tmp_path).write(tmp_path / MANIFEST_NAME)
    manifest = Manifest.read(tmp_path / MANIFEST_NAME)
    assert [e.path for e in manifest.entries] == ["tiles/s0.hfmp", "tiles/s1.hfmp", "tiles/s2.hfmp"]
    assert manifest.splits == {"test": 1, "train": 2}
    assert len(manifest.load("train")) == 2


def test_manifest_rejects_malformed_lines(tmp_path):
    path = tmp_path / MANIFEST_NAME
    path.write_text("a.hfmp\tdeadbeef\t2020\n")
    with pytest.raises(ValueError):
        Manifest.read(path)


# ---------------------------------------------------------------------------
# Batching and prefetch
# ---------------------------------------------------------------------------


def test_collate_shapes(make_samples):
    batch = collate(make_samples(n=4, timesteps=3))
    assert batch.inputs.shape == (4, 3, 3, 8, 8)
    assert batch.labels.shape == (4, 8, 8)
    assert len(batch.timestamps) == 4 and len(batch.timestamps[0]) == 3


def test_collate_errors(make_samples):
    with pytest.raises(ShapeError):
        collate(make_samples(n=1) + make_samples(n=1, size=16))
    labeled = make_samples(n=1)[0]
    with pytest.raises(ValueError):
        collate([labeled, labeled.with_label(None)])
    with pytest.raises(ValueError):
        collate([])


def test_iterate_batches_order(make_samples):
    samples = make_samples(n=5)
    sizes = [len(b) for b in iterate_batches(samples, 2)]
    assert sizes == [2, 2, 1]
    assert [len(b) for b in iterate_batches(samples, 2, drop_last=True)] == [2, 2]
    first = [b.timestamps for b in iterate_batches(samples, 2, rng=np.random.default_rng(1))]
    again = [b.timestamps for b in iterate_batches(samples, 2, rng=np.random.default_rng(1))]
    assert first == again


def test_prefetcher_preserves_order():
    assert list(Prefetcher(range(50), capacity=2)) == list(range(50))


def test_prefetcher_reraises_producer_errors():
    def source():
        yield 1
        raise RuntimeError("disk gone")

    items = []
    with pytest.raises(RuntimeError, match="disk gone"):
        for item in Prefetcher(source()):
            items.append(item)
    assert items == [1]


def test_prefetcher_capacity():
    with pytest.raises(ValueError):
        Prefetcher([], capacity=0)


# ---------------------------------------------------------------------------
# Synthetic data and the on-disk pipeline
# ---------------------------------------------------------------------------


def test_synth_is_deterministic():
    a = synth_generate(SynthConfig(seed=3, n_scenes=2))
    b = synth_generate(SynthConfig(seed=3, n_scenes=2))
    for x, y in zip(a, b):
        np.testing.assert_array_equal(x.data, y.data)
        np.testing.assert_array_equal(x.labels["fire"], y.labels["fire"])
    assert a[0].timestamp.same_hour(a[1].timestamp)


def test_synth_fire_rate():
    scenes = synth_generate(SynthConfig(seed=0, n_scenes=100, fire_density=0.003))
    rate = sum(int(s.labels["fire"].sum()) for s in scenes) / (100 * 64 * 64)
    assert 0.0024 <= rate <= 0.0036
    assert all(np.all(s.labels["fire"] <= s.land_mask) for s in scenes)


def test_synth_config_validation():
    with pytest.raises(ConfigError):
        SynthConfig(height=16)
    with pytest.raises(ConfigError):
        SynthConfig(bands=5)


def test_assign_manifest_splits_season_only(make_samples, tmp_path):
    entries = []
    for k, day in enumerate((20, 150, 200, 300)):
        sample = make_samples(n=1)[0]
        sample = PatchSample(sample.data, [Timestamp.from_calendar(2021, day, 600)], sample.label, ("region000", k, 0))
        name = f"fire/s{k}.hfmp"
        entries.append(ManifestEntry(name, write_container(tmp_path / name, sample), 2021, "unassigned"))
    Manifest(entries, root=tmp_path).write(tmp_path / MANIFEST_NAME)

    everything = assign_manifest_splits(tmp_path / MANIFEST_NAME, SplitRules.finetune(), tmp_path / "all.tsv")
    assert len(everything.entries) == 4
    seasonal = assign_manifest_splits(tmp_path / MANIFEST_NAME, SplitRules.finetune(), season_only=True)
    assert [e.path for e in seasonal.entries] == ["fire/s1.hfmp", "fire/s2.hfmp"]
    assert all(in_season(s.latest) for s in Manifest.read(tmp_path / MANIFEST_NAME).load("train"))


def test_pipeline_end_to_end(tmp_path):
    write_synthetic(SynthConfig(seed=1, n_scenes=4, years=(2020, 2022)), tmp_path)
    tiles = write_tiles(tmp_path / "scenes", tmp_path / "tiles")
    assert len(tiles) > 0
    assert set(tiles.splits) == {"unassigned"}

    labeled = collocate_dir(tmp_path / "tiles", tmp_path / "labels", tmp_path / "fire" / MANIFEST_NAME)
    assert len(labeled) == len(tiles)

    manifest = assign_manifest_splits(tmp_path / "fire" / MANIFEST_NAME, SplitRules.finetune())
    assert set(manifest.splits) == {"train", "validation"}
    reread = Manifest.read(tmp_path / "fire" / MANIFEST_NAME)
    assert reread.splits == manifest.splits
    for sample in reread.load("validation"):
        assert sample.label is not None
        assert sample.latest.year == 2022
        assert sample.data.shape == (1, 11, 32, 32)
