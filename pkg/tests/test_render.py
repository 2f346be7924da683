import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import box_map
from navlearn.render import (RenderConfig, column_offsets, dump_raw, load_raw, raycast, render_rgb, shade,
                             slice_heights)
from navlearn.world import EnvironmentMap, Wall, load_env


def _facing_wall(distance=2.0, color=(200, 0, 0)):
    # a very long wall at x = distance, robot at the origin looking along +x
    wall = Wall((distance, -1000.0), (distance, 1000.0), color)
    return EnvironmentMap((wall,), (-1000.0, -1000.0, 1000.0, 1000.0), (0.0, 0.0, 0.0), ((-5.0, 0.0),), (),
                          0.2, 2000.0)


def test_head_on_wall_center_columns():
    cols = raycast(_facing_wall(), (0.0, 0.0, 0.0), math.pi / 2, 64)
    assert cols.hit.all()
    assert cols.distance[31] == pytest.approx(2.0, abs=1e-12)
    assert cols.distance[32] == pytest.approx(2.0, abs=1e-12)


def test_fisheye_correction_flattens_a_wall():
    cols = raycast(_facing_wall(), (0.0, 0.0, 0.0), math.pi / 2, 64)
    assert np.allclose(cols.distance, 2.0, atol=1e-9)


def test_offsets_follow_column_formula():
    i = np.arange(64)
    assert np.allclose(column_offsets(math.pi / 2, 64), math.pi / 2 * (0.5 - (i + 0.5) / 64), atol=1e-15)
    odd = column_offsets(1.0, 7)
    assert odd[3] == 0.0 and np.array_equal(odd, -odd[::-1])


def test_empty_region_misses_everywhere():
    empty = EnvironmentMap((), (-50.0, -50.0, 50.0, 50.0), (0.0, 0.0, 0.0), ((1.0, 1.0),), (), 0.2, 10.0)
    cols = raycast(empty, (0.0, 0.0, 0.3))
    assert not cols.hit.any() and np.isnan(cols.distance).all()


def test_max_range_turns_hits_into_misses():
    m = load_env(box_map(10.0, 10.0, start_pose=[1, 5, 0], train_targets=[[5, 5]], test_targets=[], max_range=3.0))
    cols = raycast(m, (1.0, 5.0, 0.0))
    assert not cols.hit.any()
    cols = raycast(m, (1.0, 5.0, math.pi))
    assert cols.hit[28:36].all()


def test_invalid_fov():
    with pytest.raises(ValueError):
        raycast(_facing_wall(), (0.0, 0.0, 0.0), math.pi)


def test_close_red_wall_fills_center_column():
    cfg = RenderConfig(height_scale=48.0)
    img = render_rgb(_facing_wall(1.0), (0.0, 0.0, 0.0), cfg)
    expected = shade((200, 0, 0), 1.0, cfg.shade_k)
    assert np.array_equal(img[:, 32], np.broadcast_to(expected, (48, 3)))


def test_miss_renders_bicolor_split():
    empty = EnvironmentMap((), (-50.0, -50.0, 50.0, 50.0), (0.0, 0.0, 0.0), ((1.0, 1.0),), (), 0.2, 10.0)
    cfg = RenderConfig()
    img = render_rgb(empty, (0.0, 0.0, 1.0), cfg)
    assert (img[:24] == cfg.ceiling).all() and (img[24:] == cfg.floor).all()


def test_slice_heights_are_centered_and_clamped():
    h = slice_heights(np.array([0.1, 1.0, 4.0, np.nan]), 40.0, 48)
    assert h.tolist() == [48, 40, 10, 0]
    img = render_rgb(_facing_wall(4.0), (0.0, 0.0, 0.0))
    wall_rows = np.flatnonzero((img[:, 32] != RenderConfig.ceiling).any(axis=1)
                               & (img[:, 32] != RenderConfig.floor).any(axis=1))
    assert wall_rows.tolist() == list(range(19, 29))


def test_render_is_byte_identical(desk_map):
    a = render_rgb(desk_map, desk_map.start_pose)
    b = render_rgb(desk_map, desk_map.start_pose)
    assert a.dtype == np.uint8 and a.shape == (48, 64, 3)
    assert a.tobytes() == b.tobytes()


@settings(max_examples=100)
@given(st.floats(0.0, 20.0), st.floats(0.0, 20.0))
def test_shading_never_brightens_with_distance(d1, d2):
    near, far = sorted((d1, d2))
    color = (250, 130, 7)
    assert (shade(color, far, 0.15) <= shade(color, near, 0.15)).all()


def test_raw_round_trip(tmp_path, desk_map):
    img = render_rgb(desk_map, desk_map.start_pose)
    path = tmp_path / "obs.raw"
    dump_raw(img, path)
    blob = path.read_bytes()
    assert blob[:8] == (64).to_bytes(4, "little") + (48).to_bytes(4, "little")
    assert len(blob) == 8 + 64 * 48 * 3
    assert np.array_equal(load_raw(path), img)


def test_raw_length_mismatch(tmp_path):
    path = tmp_path / "bad.raw"
    dump_raw(np.zeros((2, 3, 3), dtype=np.uint8), path)
    path.write_bytes(path.read_bytes()[:-1])
    with pytest.raises(ValueError, match="pixel bytes"):
        load_raw(path)
