"""Tests for scene bundle loading and writing."""

import json

import numpy as np
import pytest

from src.bundle import BundleError, bundle_paths, load_scene_bundle, write_scene_bundle
from src.formats import FormatError
from src.synthetic import generate
from tests.conftest import tiny_spec


@pytest.fixture(scope="module")
def synth():
    return generate(tiny_spec(cameras_per_ring=4))


@pytest.fixture
def bundle_dir(synth, tmp_path):
    directory = tmp_path / "garden"
    write_scene_bundle(str(directory), synth.degraded, synth.views)
    return directory


def edit_cameras(directory, change):
    path = directory / "cameras.json"
    doc = json.loads(path.read_text())
    change(doc)
    path.write_text(json.dumps(doc))


class TestRoundTrip:

    def test_views_survive(self, synth, bundle_dir):
        bundle = load_scene_bundle(*bundle_paths(str(bundle_dir)))
        assert bundle.name == "garden"
        assert len(bundle.scene) == len(synth.degraded)
        assert bundle.views.roles == synth.views.roles
        assert [c.camera_id for c in bundle.views.cameras] == [c.camera_id for c in synth.views.cameras]
        for got, want in zip(bundle.views.gt_color, synth.views.gt_color):
            assert np.max(np.abs(got.data - want.data)) <= 0.5 / 255 + 1e-12
        for got, want in zip(bundle.views.gt_depth, synth.views.gt_depth):
            assert np.allclose(got.data, want.data, rtol=1e-6)
        for got, want in zip(bundle.views.object_masks, synth.views.object_masks):
            assert np.array_equal(got, want)

    def test_poses_survive(self, synth, bundle_dir):
        bundle = load_scene_bundle(*bundle_paths(str(bundle_dir)), name="custom")
        assert bundle.name == "custom"
        for got, want in zip(bundle.views.cameras, synth.views.cameras):
            assert np.allclose(got.rotation, want.rotation)
            assert np.allclose(got.translation, want.translation)
            assert got.fx == want.fx

    def test_optional_images_may_be_absent(self, bundle_dir):
        edit_cameras(bundle_dir, lambda doc: [c.pop("depth") for c in doc["cameras"]])
        bundle = load_scene_bundle(*bundle_paths(str(bundle_dir)))
        assert all(d is None for d in bundle.views.gt_depth)


class TestRejections:

    def test_missing_color_image(self, bundle_dir):
        (bundle_dir / "images" / "cam000.png").unlink()
        with pytest.raises(BundleError, match="cam000"):
            load_scene_bundle(*bundle_paths(str(bundle_dir)))

    def test_unknown_role(self, bundle_dir):
        edit_cameras(bundle_dir, lambda doc: doc["cameras"][0].update(role="test"))
        with pytest.raises(BundleError, match="unknown role"):
            load_scene_bundle(*bundle_paths(str(bundle_dir)))

    def test_missing_field(self, bundle_dir):
        edit_cameras(bundle_dir, lambda doc: doc["cameras"][1].pop("fx"))
        with pytest.raises(BundleError, match="camera 1 lacks fields"):
            load_scene_bundle(*bundle_paths(str(bundle_dir)))

    def test_size_mismatch(self, bundle_dir):
        edit_cameras(bundle_dir, lambda doc: doc["cameras"][0].update(width=30))
        with pytest.raises(BundleError, match="color image is 24x24"):
            load_scene_bundle(*bundle_paths(str(bundle_dir)))

    def test_bad_version(self, bundle_dir):
        edit_cameras(bundle_dir, lambda doc: doc.update(version=2))
        with pytest.raises(BundleError, match="unsupported version"):
            load_scene_bundle(*bundle_paths(str(bundle_dir)))

    def test_malformed_json(self, bundle_dir):
        (bundle_dir / "cameras.json").write_text('{"version": 1,')
        with pytest.raises(FormatError, match="at byte"):
            load_scene_bundle(*bundle_paths(str(bundle_dir)))
