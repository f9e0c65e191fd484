import numpy as np
import pytest
from _oracles import component_pixel_sets, flood_fill_label

from braggrei.errors import ConfigInvalid, EmptyDataset
from braggrei.frame_store import Frame, ScanManifest, in_memory_scan
from braggrei.peak_extract import (ExtractionConfig, PatchDataset, connected_components, extract_dataset,
                                   extract_frame, extract_frames, extract_patches, load_dataset,
                                   require_nonempty, robust_threshold, save_dataset, threshold_mask)
from braggrei.synth_gen import SyntheticScanConfig, generate_scan


def _frame(pixels, index=0, omega=0.0):
    return Frame(index, omega, np.asarray(pixels, dtype=np.float32))


def test_threshold_is_strict():
    assert not threshold_mask(np.zeros((4, 4)), 0).any()
    px = np.zeros((3, 3))
    px[1, 1] = 5
    assert not threshold_mask(px, 5).any()
    assert threshold_mask(px, 4.999)[1, 1]


def test_threshold_matches_scalar_loop():
    px = np.random.default_rng(1).normal(10, 3, size=(32, 32))
    got = threshold_mask(px, 11.0)
    for i in range(32):
        for j in range(32):
            assert got[i, j] == (px[i, j] > 11.0)


def test_robust_threshold_default_rule():
    px = np.arange(101, dtype=float)
    assert robust_threshold(px, 5.0) == 50 + 5 * 25


def test_diagonal_pixels_form_one_component():
    m = np.zeros((4, 4), bool)
    m[1, 1] = m[2, 2] = True
    assert connected_components(m).n_components == 1
    assert connected_components(np.zeros((4, 4), bool)).n_components == 0


def _same_partition(mask, comps):
    ref, n_ref = flood_fill_label(mask)
    assert comps.n_components == n_ref
    assert set(component_pixel_sets(comps.label_map, comps.n_components)) == set(component_pixel_sets(ref, n_ref))
    if n_ref:
        assert sorted(np.unique(comps.label_map[comps.label_map > 0])) == list(range(1, n_ref + 1))


def test_labels_match_flood_fill_on_1000_random_masks():
    rng = np.random.default_rng(2024)
    for case in range(1000):
        h, w = rng.integers(1, 25, size=2)
        density = rng.uniform(0.05, 0.7)
        mask = rng.random((h, w)) < density
        _same_partition(mask, connected_components(mask))


def test_labels_match_flood_fill_64():
    mask = np.random.default_rng(7).random((64, 64)) < 0.4
    _same_partition(mask, connected_components(mask))


def test_area_gates_and_contiguous_relabel():
    m = np.zeros((20, 20), bool)
    m[1, 1] = True                      # area 1
    m[5:7, 5:7] = True                  # area 4
    m[10:15, 10:15] = True              # area 25
    comps = connected_components(m, min_area=4, max_area=10)
    assert comps.n_components == 1 and comps.areas.tolist() == [4] and comps.n_rejected == 2
    assert set(np.unique(comps.label_map)) == {0, 1}


def test_centroid_inside_bbox_and_weighted():
    rng = np.random.default_rng(5)
    mask = rng.random((40, 40)) < 0.3
    inten = rng.uniform(1, 10, size=(40, 40))
    comps = connected_components(mask, inten)
    for k in range(comps.n_components):
        r0, c0, r1, c1 = comps.bboxes[k]
        assert r0 <= comps.centroids[k, 0] <= r1 and c0 <= comps.centroids[k, 1] <= c1
        rows, cols = np.nonzero(comps.label_map == k + 1)
        w = inten[rows, cols]
        np.testing.assert_allclose(comps.centroids[k], [np.sum(w * rows) / w.sum(), np.sum(w * cols) / w.sum()])
        assert comps.intensities[k] == pytest.approx(w.sum())


def test_block_patch():
    px = np.zeros((64, 64), np.float32)
    px[31:34, 31:34] = 100
    frame = _frame(px)
    patches = extract_frame(frame, ExtractionConfig(threshold=50, min_area=1))
    assert len(patches) == 1
    p = patches[0].pixels
    assert p.shape == (15, 15) and p[7, 7] == 1.0
    expect = np.zeros((15, 15))
    expect[6:9, 6:9] = 1
    np.testing.assert_array_equal(p, expect)
    assert patches[0].raw_max == 100 and patches[0].component_area == 9


def test_border_discard():
    px = np.zeros((64, 64), np.float32)
    px[2:5, 30:33] = 100  # centroid row 3
    frame = _frame(px)
    comps = connected_components(threshold_mask(frame, 50), frame.pixels)
    patches, discarded = extract_patches(frame, comps, 15)
    assert patches == [] and discarded == 1


def test_fifty_spots_seed_42_recovered():
    cfg = SyntheticScanConfig(width=256, height=256, n_frames=1, omega_step=1.0, n_spots=50, seed=42,
                              ring_radii=(30.0, 55.0, 80.0, 105.0), omega_width=200.0,
                              amplitude_range=(150.0, 300.0), min_separation=14.0, sigma_jitter=0.0)
    synth = generate_scan(cfg)
    truth = synth.truth[0]
    frame = synth.scan.frame(0)
    thr = robust_threshold(frame.pixels)
    clear = [s for s in truth if s["peak"] > 20 * thr and 7 <= s["row"] < 249 and 7 <= s["col"] < 249]
    assert len(clear) == 50
    patches = extract_frame(frame)
    assert len(patches) == 50
    got = np.array(sorted(p.centroid for p in patches))
    want = np.array(sorted((s["row"], s["col"]) for s in truth))
    np.testing.assert_allclose(got, want, atol=0.5)


def _scan(seed=0, n=12):
    cfg = SyntheticScanConfig(width=64, height=64, n_frames=n, omega_step=30.0, n_spots=30,
                              ring_radii=(14.0, 22.0), seed=seed, omega_width=8.0, min_separation=6.0)
    return generate_scan(cfg).scan


def test_patches_normalized_and_deterministic():
    scan = _scan()
    a = extract_dataset(scan)
    b = extract_dataset(scan)
    assert len(a) > 0
    np.testing.assert_array_equal(a.patches, b.patches)
    assert np.all(a.patches.reshape(len(a), -1).max(axis=1) == 1.0)
    assert a.patches.min() >= 0
    assert list(a.frame_index) == sorted(a.frame_index)


def test_workers_preserve_order():
    scan = _scan(seed=3)
    a = extract_dataset(scan, workers=1)
    b = extract_dataset(scan, workers=3)
    np.testing.assert_array_equal(a.patches, b.patches)
    np.testing.assert_array_equal(a.frame_index, b.frame_index)


def _isolated_spots(rng, n=12, size=96):
    rr, cc = np.mgrid[0:size, 0:size]
    img = np.zeros((size, size))
    centers = [(20 + 18 * (k // 4) + rng.uniform(-2, 2), 20 + 18 * (k % 4) + rng.uniform(-2, 2)) for k in range(n)]
    for r, c in centers:
        img += rng.uniform(50, 800) * np.exp(-((rr - r) ** 2 / (2 * 1.3 ** 2) + (cc - c) ** 2 / (2 * 2.0 ** 2)))
    return img


def test_count_monotone_in_threshold_for_isolated_spots():
    rng = np.random.default_rng(9)
    frames = [_frame(_isolated_spots(rng), index=i) for i in range(4)]
    thresholds = (2, 5, 10, 20, 50, 100, 200, 400, 800)
    counts = [len(extract_frames(frames, ExtractionConfig(threshold=t, min_area=1))) for t in thresholds]
    assert counts[0] == 48
    assert all(x >= y for x, y in zip(counts, counts[1:]))


def test_overlapping_spots_split_at_higher_threshold():
    # the one case where the count can grow: a saddle between two peaks drops below threshold
    rr, cc = np.mgrid[0:40, 0:40]
    img = sum(300 * np.exp(-((rr - 20) ** 2 + (cc - c) ** 2) / (2 * 1.5 ** 2)) for c in (16, 23))
    low = extract_frame(_frame(img), ExtractionConfig(threshold=30, min_area=1))
    high = extract_frame(_frame(img), ExtractionConfig(threshold=250, min_area=1))
    assert (len(low), len(high)) == (1, 2)


def test_stats_and_provenance():
    scan = _scan(seed=5)
    ds = extract_dataset(scan)
    assert ds.stats["n_frames"] == len(scan) and ds.stats["frames_per_second"] > 0
    assert set(np.unique(ds.omega)) <= {scan.omega_of(i) for i in range(len(scan))}


def test_empty_frames_give_empty_dataset():
    scan = in_memory_scan(ScanManifest("z", 32, 32, 3, omega_step=1.0), np.zeros((3, 32, 32)))
    ds = extract_dataset(scan)
    assert len(ds) == 0 and ds.patches.shape == (0, 15, 15)
    with pytest.raises(EmptyDataset):
        require_nonempty(ds)


def test_dataset_round_trip(tmp_path):
    ds = extract_dataset(_scan(seed=6))
    path = save_dataset(ds, tmp_path / "d.bin")
    back = load_dataset(path)
    np.testing.assert_array_equal(back.patches, ds.patches)
    for name in ("frame_index", "omega", "centroid", "raw_max", "area"):
        np.testing.assert_array_equal(getattr(back, name), getattr(ds, name))
    header = path.read_bytes()[:8]
    assert np.frombuffer(header, "<u4").tolist() == [len(ds), 15]


@pytest.mark.parametrize("kw", [dict(patch_size=14), dict(patch_size=3), dict(min_area=0),
                                dict(threshold=-1.0), dict(min_area=5, max_area=4)])
def test_config_validation(kw):
    with pytest.raises(ConfigInvalid):
        ExtractionConfig(**kw).validate()


def test_select_subset():
    ds = extract_dataset(_scan(seed=8))
    sub = ds.select(ds.frame_index == ds.frame_index[0])
    assert isinstance(sub, PatchDataset) and 0 < len(sub) <= len(ds)
