"""Instance outlines and GeoJSON export."""

import json

import numpy as np
import pytest

from cellquant.errors import ValidationError
from cellquant.polygons import (instance_polygon, instances_to_polygons,
                                polygons_to_geojson, write_geojson)
from helpers import disc


def shoelace(loop):
    xs = np.array([p[0] for p in loop], dtype=float)
    ys = np.array([p[1] for p in loop], dtype=float)
    return 0.5 * float(np.sum(xs[:-1] * ys[1:] - xs[1:] * ys[:-1]))


def test_single_pixel_unit_square():
    mask = np.zeros((6, 6), bool)
    mask[2, 2] = True
    loop, area = instance_polygon(mask)
    assert loop == [(2, 2), (3, 2), (3, 3), (2, 3), (2, 2)]
    assert area == 1.0


def test_two_by_two_block():
    mask = np.zeros((6, 6), bool)
    mask[1:3, 2:4] = True
    loop, area = instance_polygon(mask)
    assert area == 4.0
    assert loop[0] == loop[-1]
    assert len(loop) == 9  # 8 unit edges around the block
    assert set(loop) == {(2, 1), (3, 1), (4, 1), (4, 2), (4, 3),
                         (3, 3), (2, 3), (2, 2)}


def test_l_shape_area_matches_pixels():
    mask = np.zeros((8, 8), bool)
    mask[1:5, 2] = True  # 4-px vertical bar
    mask[4, 3:5] = True  # 2-px foot
    loop, area = instance_polygon(mask)
    assert area == 6.0
    assert loop[0] == loop[-1]


def test_diagonal_pixels_form_two_loops():
    mask = np.zeros((5, 5), bool)
    mask[1, 1] = mask[2, 2] = True
    loop, area = instance_polygon(mask)
    # two disjoint unit squares; the traced ring is one of them
    assert area == 1.0
    assert len(loop) == 5


def test_ring_orientation_positive_in_screen_frame():
    mask = np.zeros((20, 20), bool)
    mask[disc(20, 20, 10, 10, 6)[:, :]] = True
    loop, _ = instance_polygon(mask)
    assert shoelace(loop) > 0


def test_area_equals_pixel_count_for_blobs():
    rng = np.random.default_rng(7)
    for _ in range(20):
        mask = np.zeros((32, 32), bool)
        r = float(rng.uniform(2, 10))
        mask |= disc(32, 32, float(rng.uniform(10, 22)),
                     float(rng.uniform(10, 22)), r)
        loop, area = instance_polygon(mask)
        assert area == float(mask.sum())
        assert shoelace(loop) == area


def test_empty_mask_rejected():
    with pytest.raises(ValidationError):
        instance_polygon(np.zeros((4, 4), bool))


def test_instances_to_polygons_skips_missing_ids():
    inst = np.zeros((10, 10), np.int32)
    inst[1, 1] = 1
    inst[5:7, 5:7] = 3  # id 2 absent
    out = instances_to_polygons(inst)
    assert [(i, a) for i, _, a in out] == [(1, 1.0), (3, 4.0)]


def test_geojson_structure_and_offset(tmp_path):
    inst = np.zeros((12, 12), np.int32)
    inst[2:5, 2:5] = 1
    inst[8:10, 8:10] = 2
    fc = polygons_to_geojson(inst, [2, 1],
                             class_names=["stroma", "tumor"],
                             offset=(100.0, 200.0))
    assert fc["type"] == "FeatureCollection"
    assert len(fc["features"]) == 2
    f1, f2 = fc["features"]
    assert f1["properties"] == {"instance_id": 1, "class_id": 2,
                                "class_name": "tumor", "pixel_area": 9.0}
    assert f2["properties"]["class_name"] == "stroma"
    ring = f1["geometry"]["coordinates"][0]
    assert ring[0] == ring[-1]
    xs = [p[0] for p in ring]
    ys = [p[1] for p in ring]
    assert min(xs) == 102.0 and max(xs) == 105.0
    assert min(ys) == 202.0 and max(ys) == 205.0

    path = tmp_path / "cells.geojson"
    write_geojson(fc, path)
    text = path.read_text()
    assert text.endswith("\n")
    assert json.loads(text) == fc


def test_geojson_unknown_class_name_fallback():
    inst = np.zeros((6, 6), np.int32)
    inst[2, 2] = 1
    fc = polygons_to_geojson(inst, [4], class_names=["only"])
    assert fc["features"][0]["properties"]["class_name"] == "class_4"
