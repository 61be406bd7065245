"""Equirectangular projection, range scaling, condition rasters and file I/O."""

import math

import mpmath
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from seqlidar.codec import (
    EquirectImage,
    OrientedBox,
    PointCloud,
    SensorConfig,
    load_cloud,
    load_image,
    project,
    read_ply,
    render_object_prior,
    render_road_sketch,
    save_cloud,
    save_image,
    scale_range,
    unproject,
    unscale_range,
    write_ply,
)
from seqlidar.errors import ConfigurationError, FormatError, RangeError, ValidationError

CFG = SensorConfig()


def spherical(d, theta, phi, refl=0.5):
    return [d * math.cos(phi) * math.cos(theta), d * math.cos(phi) * math.sin(theta), d * math.sin(phi), refl]


def random_scene(rng, n=3000, cfg=CFG):
    d = rng.uniform(1.0, cfg.d_max, n)
    theta = rng.uniform(-math.pi, math.pi, n)
    phi = rng.uniform(cfg.elev_min - 0.05, cfg.elev_max + 0.05, n)
    return PointCloud(np.array([spherical(*args) for args in zip(d, theta, phi, rng.uniform(0, 1, n))]))


def rotate_z(pc, angle):
    c, s = math.cos(angle), math.sin(angle)
    rot = np.array([[c, -s, 0], [s, c, 0], [0, 0, 1]])
    pts = pc.points.copy()
    pts[:, :3] = pts[:, :3] @ rot.T
    return PointCloud(pts)


class TestRangeScaling:
    def test_endpoints(self):
        assert scale_range(0.0, 80.0) == -1.0
        assert scale_range(80.0, 80.0) == 1.0

    def test_midpoint_oracle(self):
        oracle = 2 * mpmath.log(9) / mpmath.log(81) - 1
        assert abs(scale_range(8.0, 80.0) - float(oracle)) < 1e-15

    @settings(max_examples=200, deadline=None)
    @given(st.floats(0.0, 80.0))
    def test_round_trip(self, d):
        back = unscale_range(scale_range(d, 80.0), 80.0)
        assert abs(back - d) <= 1e-6 * max(d, 1e-9) + 1e-12

    def test_strictly_increasing(self):
        d = np.linspace(0, 80, 10001)
        assert np.all(np.diff(scale_range(d, 80.0)) > 0)

    @pytest.mark.parametrize("d", [-0.1, 80.01, float("nan")])
    def test_out_of_range(self, d):
        with pytest.raises(RangeError):
            scale_range(d, 80.0)


class TestSensorConfig:
    def test_width_must_be_divisible_by_16(self):
        with pytest.raises(ConfigurationError):
            SensorConfig(W=100)

    def test_azimuth_zero_is_column_half_width(self):
        centers = CFG.azimuth_centers()
        assert np.argmin(np.abs(centers - 0.5 * CFG.d_azimuth)) == CFG.W // 2


class TestProject:
    def test_single_point_at_bin_centre(self):
        i, j = 5, 37
        theta = CFG.azimuth_centers()[j]
        phi = CFG.elevation_centers()[i]
        img = project(PointCloud([spherical(12.0, theta, phi, 0.25)]), CFG)
        assert img.valid_mask.sum() == 1 and img.valid_mask[i, j]
        assert img.channels[1, i, j] == np.float32(0.25)

    def test_nearest_point_wins(self):
        pts = [spherical(10.0, 0.01, -0.1, 0.9), spherical(5.0, 0.01, -0.1, 0.2)]
        img = project(PointCloud(pts), CFG)
        assert img.valid_mask.sum() == 1
        np.testing.assert_allclose(unscale_range(img.channels[0][img.valid_mask], 80.0), [5.0], rtol=1e-6)
        assert img.channels[1][img.valid_mask][0] == np.float32(0.2)

    def test_points_outside_fov_are_dropped(self):
        above = spherical(10.0, 0.0, CFG.elev_max + 0.01)
        beyond = spherical(90.0, 0.0, -0.1)
        img = project(PointCloud([above, beyond]), CFG)
        assert not img.valid_mask.any()
        assert np.all(img.channels[0] == -1) and np.all(img.channels[1] == 0)

    def test_empty_cloud_gives_invalid_image(self):
        img = project(PointCloud(), CFG)
        assert not img.valid_mask.any()

    def test_valid_count_bounded_by_points(self, rng):
        pc = random_scene(rng, 500)
        assert project(pc, CFG).valid_mask.sum() <= len(pc)

    def test_idempotent_round_trip(self, rng):
        img = project(random_scene(rng), CFG)
        again = project(unproject(img, CFG), CFG)
        assert np.array_equal(again.valid_mask, img.valid_mask)
        assert np.array_equal(again.channels[:, img.valid_mask], img.channels[:, img.valid_mask])

    def test_rotation_shifts_columns_exactly(self, rng):
        pc = random_scene(rng)
        base = project(pc, CFG)
        for k in (1, 5, 32, 64, 127):
            rotated = project(rotate_z(pc, 2 * math.pi * k / CFG.W), CFG)
            assert np.array_equal(rotated.valid_mask, np.roll(base.valid_mask, k, axis=1))
            assert np.array_equal(rotated.channels, np.roll(base.channels, k, axis=2))

    def test_unproject_range_example(self):
        img = EquirectImage.empty(CFG)
        img.channels[0, 3, 10] = 0.0
        img.valid_mask[3, 10] = True
        pc = unproject(img, CFG)
        assert len(pc) == 1
        np.testing.assert_allclose(pc.ranges(), [8.0], rtol=1e-12)
        theta = math.atan2(pc.xyz[0, 1], pc.xyz[0, 0])
        assert abs(theta - CFG.azimuth_centers()[10]) < 1e-12

    def test_unproject_empty(self):
        assert len(unproject(EquirectImage.empty(CFG), CFG)) == 0


class TestSketch:
    BOX = dict(l=4.0, w=2.0, h=1.5, heading=0.0)

    def test_empty_sketch(self):
        assert not render_road_sketch([], [], CFG).any()

    def test_box_ahead_lands_at_centre_columns(self):
        sketch = render_road_sketch([], [OrientedBox((10.0, 0.0, -1.05), **self.BOX)], CFG)
        cols = np.nonzero(sketch[1].any(axis=0))[0]
        assert cols.size > 0
        assert np.all(np.abs(cols - CFG.W // 2) <= CFG.W // 16)
        assert not sketch[0].any()

    def test_rotated_box_shifts_by_quarter_width(self):
        ahead = render_road_sketch([], [OrientedBox((10.0, 0.0, -1.05), **self.BOX)], CFG)[1]
        left_box = OrientedBox((0.0, 10.0, -1.05), 4.0, 2.0, 1.5, heading=math.pi / 2)
        left = render_road_sketch([], [left_box], CFG)[1]
        shifted = np.roll(ahead, CFG.W // 4, axis=1)
        # every pixel of one pattern lies within one column of the other
        for a, b in ((left, shifted), (shifted, left)):
            grown = b.astype(bool) | np.roll(b, 1, axis=1).astype(bool) | np.roll(b, -1, axis=1).astype(bool)
            assert np.all(grown[a > 0])

    def test_layout_channel(self):
        curb = [np.array([[-30.0, -3.5, -1.8], [30.0, -3.5, -1.8]])]
        sketch = render_road_sketch(curb, [], CFG)
        assert sketch[0].any() and not sketch[1].any()
        assert set(np.unique(sketch)) <= {0.0, 1.0}

    def test_degenerate_box(self):
        with pytest.raises(ValidationError):
            OrientedBox((1, 0, 0), 0.0, 1.0, 1.0)


class TestObjectPrior:
    def test_empty_prior_is_background(self):
        prior = render_object_prior(PointCloud(), CFG)
        assert np.all(prior[0] == -1) and np.all(prior[1] == 0)

    def test_prior_subset_of_scene_projection(self, rng):
        obj = PointCloud(np.array([spherical(15, t, -0.05) for t in rng.uniform(-0.2, 0.2, 200)]))
        scene = PointCloud.concat([obj, random_scene(rng, 1000)])
        prior_px = render_object_prior(obj, CFG)[0] > -1
        assert np.all(project(scene, CFG).valid_mask[prior_px])

    def test_self_occlusion_nearest_wins(self):
        pts = PointCloud([spherical(20.0, 0.3, -0.1, 0.6), spherical(19.0, 0.3, -0.1, 0.6)])
        prior = render_object_prior(pts, CFG)
        np.testing.assert_array_equal(prior, project(pts, CFG).channels)
        np.testing.assert_allclose(unscale_range(prior[0][prior[0] > -1], 80.0), [19.0], rtol=1e-6)


class TestFiles:
    def test_ply_round_trip(self, tmp_path, rng):
        pc = random_scene(rng, 50)
        write_ply(tmp_path / "c.ply", pc)
        np.testing.assert_array_equal(read_ply(tmp_path / "c.ply").points, pc.points)
        header = (tmp_path / "c.ply").read_text().splitlines()[:3]
        assert header == ["ply", "format ascii 1.0", "element vertex 50"]

    def test_ply_rejects_garbage(self, tmp_path):
        (tmp_path / "bad.ply").write_text("hello\n")
        with pytest.raises(FormatError):
            read_ply(tmp_path / "bad.ply")

    def test_l4dt_cloud_and_image(self, tmp_path, rng):
        pc = random_scene(rng, 40)
        save_cloud(tmp_path / "c.l4dt", pc)
        np.testing.assert_array_equal(load_cloud(tmp_path / "c.l4dt").points, pc.points)
        img = project(pc, CFG)
        save_image(tmp_path / "i.l4dt", img, tmp_path / "m.l4dt")
        back = load_image(tmp_path / "i.l4dt", tmp_path / "m.l4dt")
        assert np.array_equal(back.channels, img.channels) and np.array_equal(back.valid_mask, img.valid_mask)

    def test_from_channels_marks_low_range_invalid(self):
        ch = np.zeros((2, 2, 4), np.float32)
        ch[0, 0, 0] = -0.95
        img = EquirectImage.from_channels(ch)
        assert not img.valid_mask[0, 0] and img.valid_mask.sum() == 7
        assert img.channels[0, 0, 0] == -1 and img.channels[1, 0, 0] == 0
