import numpy as np
import pytest

from tileattrib.imaging import CanvasImage
from tileattrib.tiling import (Tile, TileSpec, crop, grid_count, load_tileset,
                               salient_tiles, save_tileset, shannon_entropy,
                               tile_positions)


def gray(pixels):
    return CanvasImage(pixels=np.asarray(pixels, dtype=np.uint8),
                       density_px_per_cm=25.0, source_id="g")


class TestEntropy:
    def test_constant_region(self):
        assert shannon_entropy(np.full((10, 10), 7, dtype=np.uint8)) == pytest.approx(0.0, abs=1e-9)

    def test_two_equal_bins(self):
        region = np.array([[0, 255], [255, 0]], dtype=np.uint8)
        assert shannon_entropy(region) == pytest.approx(1.0, abs=1e-9)

    def test_four_equal_bins(self):
        region = np.repeat(np.array([0, 10, 200, 255], dtype=np.uint8), 16)
        assert shannon_entropy(region) == pytest.approx(2.0, abs=1e-9)

    def test_full_uniform_histogram(self):
        region = np.arange(256, dtype=np.uint8).reshape(16, 16)
        assert shannon_entropy(region) == pytest.approx(8.0, abs=1e-9)

    def test_empty_region_errors(self):
        with pytest.raises(ValueError):
            shannon_entropy(np.zeros((0,), dtype=np.uint8))

    def test_permutation_invariance(self):
        rng = np.random.default_rng(0)
        region = rng.integers(0, 256, size=400, dtype=np.uint8)
        shuffled = rng.permutation(region)
        assert shannon_entropy(region) == shannon_entropy(shuffled)

    def test_range(self):
        rng = np.random.default_rng(1)
        for _ in range(10):
            r = rng.integers(0, 256, size=(7, 9), dtype=np.uint8)
            assert 0.0 <= shannon_entropy(r) <= 8.0


class TestGeometry:
    @pytest.mark.parametrize("overlap,stride", [(0.94, 21), (0.92, 28), (0.88, 42)])
    def test_stride_at_350(self, overlap, stride):
        assert TileSpec(350, overlap).stride == stride

    def test_single_tile(self):
        assert tile_positions(100, 100, TileSpec(100, 0.0)) == [(0, 0)]

    def test_700px_overlap_092(self):
        # floor((700 - 350) / 28) + 1 = 13 positions per axis
        positions = tile_positions(700, 700, TileSpec(350, 0.92))
        assert len(positions) == 169

    def test_700px_overlap_094(self):
        # floor((700 - 350) / 21) + 1 = 17 positions per axis
        positions = tile_positions(700, 700, TileSpec(350, 0.94))
        assert len(positions) == 289

    def test_too_small_image_gives_empty(self):
        assert tile_positions(349, 800, TileSpec(350, 0.9)) == []

    def test_positions_match_closed_form(self):
        rng = np.random.default_rng(2)
        for _ in range(30):
            w = int(rng.integers(100, 2000))
            h = int(rng.integers(100, 2000))
            spec = TileSpec(int(rng.integers(2, 120)),
                            float(rng.uniform(0, 0.95)))
            positions = tile_positions(w, h, spec)
            assert len(positions) == grid_count(w, h, spec)
            for x, y in positions:
                assert x % spec.stride == 0 and y % spec.stride == 0
                assert 0 <= x <= w - spec.side_px
                assert 0 <= y <= h - spec.side_px

    def test_row_major_order(self):
        positions = tile_positions(8, 8, TileSpec(4, 0.0))
        assert positions == [(0, 0), (4, 0), (0, 4), (4, 4)]

    def test_density_scaling_of_counts(self):
        # count ~ (1/stride)^2 within +/-15% for large images
        for overlap_a, overlap_b in [(0.92, 0.94), (0.88, 0.92)]:
            sa, sb = TileSpec(350, overlap_a), TileSpec(350, overlap_b)
            ca = grid_count(4000, 4000, sa)
            cb = grid_count(4000, 4000, sb)
            expected = (sa.stride / sb.stride) ** 2
            assert cb / ca == pytest.approx(expected, rel=0.15)

    def test_spec_validation(self):
        with pytest.raises(ValueError):
            TileSpec(1, 0.5)
        with pytest.raises(ValueError):
            TileSpec(100, 1.0)
        with pytest.raises(ValueError):
            TileSpec(100, -0.1)

    def test_stride_floor_at_one(self):
        assert TileSpec(2, 0.99).stride == 1


class TestSalientTiles:
    def test_constant_image_keeps_all(self):
        img = gray(np.full((64, 64), 100))
        tiles = salient_tiles(img, TileSpec(16, 0.0))
        assert len(tiles) == 16
        assert all(t.entropy_bits == 0.0 for t in tiles)

    def test_noise_half_passes_constant_half_fails(self):
        rng = np.random.default_rng(3)
        px = np.zeros((128, 256), dtype=np.uint8)
        px[:, :128] = rng.integers(0, 256, size=(128, 128), dtype=np.uint8)
        px[:, 128:] = 50
        img = gray(px)
        tiles = salient_tiles(img, TileSpec(64, 0.0))
        # tiles at x in {0, 64} are pure noise; x in {128, 192} pure constant
        xs = {t.x for t in tiles}
        assert xs == {0, 64}
        image_h = shannon_entropy(px)
        for t in tiles:
            assert t.entropy_bits >= image_h

    def test_gating_monotone_in_threshold(self):
        rng = np.random.default_rng(4)
        img = gray(rng.integers(0, 40, size=(96, 96), dtype=np.uint8))
        tiles = salient_tiles(img, TileSpec(32, 0.5))
        base = shannon_entropy(img.pixels)
        for bump in (0.05, 0.1, 0.5):
            stricter = [t for t in tiles if t.entropy_bits >= base + bump]
            assert len(stricter) <= len(tiles)

    def test_tiles_inside_image(self):
        rng = np.random.default_rng(5)
        img = gray(rng.integers(0, 256, size=(150, 90), dtype=np.uint8))
        for t in salient_tiles(img, TileSpec(40, 0.6)):
            assert 0 <= t.x <= img.width_px - t.side
            assert 0 <= t.y <= img.height_px - t.side

    def test_requires_single_channel(self):
        img = CanvasImage(pixels=np.zeros((64, 64, 3), dtype=np.uint8),
                          density_px_per_cm=25.0)
        with pytest.raises(ValueError):
            salient_tiles(img, TileSpec(32, 0.0))

    def test_overlap_count_ratio_geometry(self):
        # 0.94 vs 0.92 overlap at side 350: ~ (28/21)^2 more grid tiles
        c94 = grid_count(3000, 3000, TileSpec(350, 0.94))
        c92 = grid_count(3000, 3000, TileSpec(350, 0.92))
        assert c94 / c92 == pytest.approx((28 / 21) ** 2, rel=0.15)


class TestTileSerialization:
    def test_round_trip_with_crops(self, tmp_path):
        # constant image: tile entropy equals image entropy, so all tiles pass
        img = gray(np.full((64, 64), 9, dtype=np.uint8))
        tiles = salient_tiles(img, TileSpec(32, 0.0), label="positive")
        assert tiles
        save_tileset(tmp_path, tiles, images={"g": img})
        back = load_tileset(tmp_path)
        assert back == tiles
        from PIL import Image
        first = back[0]
        png = np.asarray(Image.open(
            tmp_path / f"g_{first.x}_{first.y}.png"), dtype=np.uint8)
        assert np.array_equal(png, crop(img, first))

    def test_crop_bounds_checked(self):
        img = gray(np.zeros((32, 32)))
        bad = Tile(x=10, y=10, side=32, entropy_bits=0.0, source_id="g")
        with pytest.raises(ValueError):
            crop(img, bad)

    def test_bad_label_rejected(self):
        with pytest.raises(ValueError):
            Tile(x=0, y=0, side=8, entropy_bits=0.0, source_id="g", label="foo")
