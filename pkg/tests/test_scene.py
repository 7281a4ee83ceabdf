import json

import numpy as np
import pytest
from hypothesis import given, strategies as st

from speckletact.errors import InvalidArgument, InvalidGeometry
from speckletact.scene import (SCATTERER_MARGIN_MM, CameraSpec, SceneConfig, SlabGeometry, SourceSpec,
                               default_scene, image_sources, load_scene, mirror_top, sample_scatterers,
                               save_scene)

FLAT = SlabGeometry(55.0, 61.0, 3.0)


def test_sample_scatterers_margin_and_count():
    field = sample_scatterers(FLAT, 500, 7)
    assert len(field) == 500
    z = field.positions[:, 2]
    assert z.min() >= 0.1 and z.max() <= 2.9
    assert FLAT.contains(field.positions, SCATTERER_MARGIN_MM).all()
    assert np.all(field.amplitudes == 1.0)


def test_sample_scatterers_deterministic():
    a = sample_scatterers(FLAT, 500, 7)
    b = sample_scatterers(FLAT, 500, 7)
    assert a == b
    assert not np.array_equal(a.positions, sample_scatterers(FLAT, 500, 8).positions)


def test_sample_scatterers_means_near_center():
    # law of large numbers: per-axis means within 2% of the slab centre
    pos = sample_scatterers(FLAT, 10_000, 1).positions
    centre = np.array([55.0, 61.0, 3.0]) / 2
    assert np.all(np.abs(pos.mean(axis=0) - centre) <= 0.02 * centre)


def test_sample_scatterers_errors():
    with pytest.raises(InvalidArgument):
        sample_scatterers(FLAT, 0, 1)
    with pytest.raises(InvalidGeometry):
        sample_scatterers(SlabGeometry(10.0, 10.0, 0.2), 5, 1)


def test_geometry_invariants():
    with pytest.raises(InvalidGeometry):
        SlabGeometry(10.0, 10.0, 12.0)
    with pytest.raises(InvalidGeometry):
        SlabGeometry(10.0, 10.0, 1.0, refractive_index=1.0)
    with pytest.raises(InvalidGeometry):
        SlabGeometry(0.0, 10.0, 1.0)


def test_image_sources_examples():
    srcs = image_sources((1, 1, 1), FLAT, 1)
    assert [list(p) for p in srcs] == [[1, 1, 1], [1, 1, 5]]
    assert [list(p) for p in image_sources((1, 1, 1), FLAT, 0)] == [[1, 1, 1]]
    assert image_sources((2, 2, 1.5), FLAT, 1)[1][2] == pytest.approx(4.5)
    with pytest.raises(InvalidArgument):
        image_sources((1, 1, 1), FLAT, 2)


@given(st.floats(0.0, 3.0), st.floats(0.0, 55.0), st.floats(0.0, 61.0))
def test_mirror_is_involution(z, x, y):
    p = np.array([x, y, z])
    assert np.allclose(mirror_top(mirror_top(p, FLAT), FLAT), p, rtol=0, atol=1e-12)


def test_scene_roundtrip_bit_exact(tmp_path):
    scene = default_scene("flat")
    again = SceneConfig.from_json(scene.to_json())
    assert again.to_json() == scene.to_json()
    assert np.array_equal(again.scatterers.positions, scene.scatterers.positions)
    assert again.scatterers.positions.tobytes() == scene.scatterers.positions.tobytes()
    save_scene(scene, tmp_path / "s.json")
    assert load_scene(tmp_path / "s.json").digest() == scene.digest()
    assert json.loads(scene.to_json())["schema_version"] == 1


def test_scene_rejects_wrong_schema():
    doc = default_scene("gripper").to_dict()
    doc["schema_version"] = 99
    with pytest.raises(InvalidArgument):
        SceneConfig.from_dict(doc)


def test_scene_consistency_checks():
    scene = default_scene("flat")
    with pytest.raises(InvalidGeometry):
        SceneConfig(scene.geometry, scene.scatterers, scene.source, CameraSpec((1.0, 1.0)))
    with pytest.raises(InvalidGeometry):
        SceneConfig(scene.geometry, scene.scatterers, SourceSpec((-1.0, 0.0, 0.0)), scene.camera)
    with pytest.raises(InvalidArgument):
        CameraSpec((27.5, 30.5), raw_pixels=(100, 192))
    with pytest.raises(InvalidArgument):
        CameraSpec((27.5, 30.5), read_noise_frac=0.2)


def test_default_scene_layout():
    scene = default_scene("flat")
    assert scene.source.position == (0.0, 30.5, 1.5)
    assert scene.camera.center == (27.5, 30.5)
    px = scene.camera.pixel_coordinates()
    assert px.shape == (192 * 192, 3)
    assert np.allclose(px.mean(axis=0), [27.5, 30.5, 0.0])
    # rows run along y: consecutive entries differ in x only
    assert px[1, 0] - px[0, 0] == pytest.approx(0.02) and px[1, 1] == px[0, 1]
