import numpy as np
import pytest

from conftest import SMALL_ARCH
from hsimamba.data import HsiCube, load_cube
from hsimamba.harness import (ablation_csv, ablation_table, bench_scan, labels_from_rgb, palette, predict_map,
                              read_ppm, route_ablation, write_ppm)
from hsimamba.routes import Route
from hsimamba.train import train


def test_ppm_round_trip(tmp_path):
    rgb = np.random.default_rng(0).integers(0, 256, (3, 5, 3)).astype(np.uint8)
    write_ppm(tmp_path / "x.ppm", rgb)
    assert (tmp_path / "x.ppm").read_bytes().startswith(b"P6\n5 3\n255\n")
    np.testing.assert_array_equal(read_ppm(tmp_path / "x.ppm"), rgb)


def test_palette_inverts():
    grid = np.random.default_rng(1).integers(0, 8, (6, 7))
    np.testing.assert_array_equal(labels_from_rgb(palette(7)[grid], 7), grid)
    assert len({tuple(c) for c in palette(12)}) == 13


def test_perfect_stub_map_equals_labels(tmp_path, small_cube, small_config):
    ck = train(small_config.replace(epochs=0), small_cube, **SMALL_ARCH)
    truth = small_cube.labels.astype(np.int64).ravel()
    calls = iter(range(0, truth.size, 256))
    stub = lambda patches: truth[next(calls):][:len(patches)]
    grid = predict_map(ck, small_cube, tmp_path / "map.ppm", predictor=stub)
    np.testing.assert_array_equal(grid, small_cube.labels)
    rgb = read_ppm(tmp_path / "map.ppm")
    np.testing.assert_array_equal(labels_from_rgb(rgb, 3), small_cube.labels)
    side = load_cube(tmp_path / "map.labels.hsic")
    np.testing.assert_array_equal(side.labels, small_cube.labels)


def test_single_pixel_map(tmp_path, small_cube, small_config):
    ck = train(small_config.replace(epochs=0, patch_size=5), small_cube, **SMALL_ARCH)
    one = HsiCube(small_cube.radiance[:1, :1], np.ones((1, 1), np.uint16), small_cube.class_names)
    with pytest.raises(ValueError, match="too small"):
        predict_map(ck, one)     # a 5x5 window cannot reflect inside a 1x1 image
    ck1 = train(small_config.replace(epochs=0, patch_size=1), small_cube, **SMALL_ARCH, kernel=(3, 1, 1))
    grid = predict_map(ck1, one, tmp_path / "one.ppm")
    assert grid.shape == (1, 1) and 1 <= grid[0, 0] <= 3
    assert read_ppm(tmp_path / "one.ppm").shape == (1, 1, 3)


def test_bench_report_shape():
    rep = bench_scan(state=4, dim=4, lengths=(64, 128, 256, 512), repeats=3)
    assert [L for L, _ in rep.rows] == [64, 128, 256, 512]
    assert all(t > 0 for _, t in rep.rows)
    assert "growth exponent" in rep.text()


def test_route_ablation_rows_and_determinism(small_cube, small_config):
    base = small_config.replace(epochs=1)
    rows = route_ablation(base, seeds=(0,), cube=small_cube)
    assert [r.route for r in rows] == list(Route)
    assert all(r.error is None for r in rows)
    again = route_ablation(base, seeds=(0,), cube=small_cube, routes=[Route(3)])
    assert (again[0].oa, again[0].aa, again[0].kappa) == (rows[2].oa, rows[2].aa, rows[2].kappa)
    csv_text = ablation_csv(rows)
    assert csv_text.count("\n") == 6 and csv_text.startswith("route,oa,aa,kappa")
    assert "spectral_priority" in ablation_table(rows)


def test_route_ablation_isolates_failures(small_cube, small_config, monkeypatch):
    from hsimamba import harness

    real_train = harness.train

    def flaky(cfg, **kw):
        if cfg.route == Route(2).slug:
            raise FloatingPointError("synthetic blow-up")
        return real_train(cfg, **kw, **SMALL_ARCH)

    monkeypatch.setattr(harness, "train", flaky)
    rows = route_ablation(small_config.replace(epochs=1), seeds=(0,), cube=small_cube,
                          routes=[Route(1), Route(2), Route(3)])
    assert [r.error is None for r in rows] == [True, False, True]
    assert "synthetic blow-up" in rows[1].error and np.isnan(rows[1].oa)
    assert "failed" in ablation_table(rows)
