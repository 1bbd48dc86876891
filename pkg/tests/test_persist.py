"""Byte-deterministic persistence: CSVs, manifests, checkpoints."""

import numpy as np
import pytest

from pointcal.embeddings import PointCloud
from pointcal.network import NetConfig, build_params
from pointcal.persist import (Checkpoint, checkpoint_from_params, config_hash,
                              load_checkpoint, load_dataset, params_from_checkpoint,
                              read_cloud_csv, save_checkpoint, write_cloud_csv,
                              write_matching_dataset, write_segmentation_dataset)
from pointcal.rng import Rng
from pointcal.sampling import RigidTransform
from pointcal.scenes import PairConfig, SceneConfig, gen_matching_pair, gen_segmentation_scene


class TestCloudCsv:
    def test_roundtrip_labeled(self, tmp_path):
        cloud = gen_segmentation_scene(SceneConfig(n_points=50, seed=1), Rng(1))
        path = tmp_path / "cloud.csv"
        write_cloud_csv(path, cloud)
        back = read_cloud_csv(path)
        np.testing.assert_allclose(back.coords, cloud.coords, rtol=1e-8)
        np.testing.assert_array_equal(back.labels, cloud.labels)

    def test_unlabeled_roundtrip(self, tmp_path):
        cloud = PointCloud(Rng(2).uniform((20, 3), -1.0, 1.0))
        path = tmp_path / "cloud.csv"
        write_cloud_csv(path, cloud)
        back = read_cloud_csv(path)
        assert back.labels is None
        np.testing.assert_allclose(back.coords, cloud.coords, rtol=1e-8)

    def test_nine_significant_digits(self, tmp_path):
        cloud = PointCloud(np.array([[0.123456789123, -1.0, 2.5e-7]]))
        path = tmp_path / "c.csv"
        write_cloud_csv(path, cloud)
        assert path.read_text().splitlines()[0] == "0.123456789,-1,2.5e-07"


class TestDatasets:
    def test_segmentation_roundtrip(self, tmp_path):
        scenes = [gen_segmentation_scene(SceneConfig(n_points=30, seed=s), Rng(s))
                  for s in range(3)]
        manifest = write_segmentation_dataset(tmp_path, scenes[:2], scenes[2:],
                                              {"tag": 1}, seed=5)
        ds = load_dataset(manifest)
        assert len(ds.train) == 2 and len(ds.eval) == 1
        np.testing.assert_array_equal(ds.train[0].labels, scenes[0].labels)

    def test_matching_roundtrip(self, tmp_path):
        pairs = [gen_matching_pair(PairConfig(n_points=40, seed=s), Rng(s))
                 for s in range(2)]
        manifest = write_matching_dataset(tmp_path, pairs[:1], pairs[1:], {}, seed=9)
        ds = load_dataset(manifest)
        cloud_i, cloud_j, transform = ds.train[0]
        np.testing.assert_allclose(transform.rotation, pairs[0][2].rotation)
        assert transform.scale == pytest.approx(pairs[0][2].scale)
        np.testing.assert_allclose(cloud_i.coords, pairs[0][0].coords, rtol=1e-8)

    def test_gen_twice_is_byte_identical(self, tmp_path):
        scenes = [gen_segmentation_scene(SceneConfig(n_points=30, seed=3), Rng(3))]
        m1 = write_segmentation_dataset(tmp_path / "a", scenes, scenes, {}, 3)
        m2 = write_segmentation_dataset(tmp_path / "b", scenes, scenes, {}, 3)
        assert m1.read_bytes() == m2.read_bytes()
        assert (tmp_path / "a/clouds/train_0000.csv").read_bytes() == \
            (tmp_path / "b/clouds/train_0000.csv").read_bytes()


class TestCheckpoint:
    def _params(self):
        cfg = NetConfig(embed_dim=8, hidden=(16,), num_classes=3)
        return build_params(cfg, Rng(7),
                            frozenset({"mean", "var", "classifier"}))

    def test_roundtrip_bit_exact(self, tmp_path):
        params = self._params()
        ckpt = checkpoint_from_params(params, metadata={
            "task": "segmentation", "variant": "cue", "seed": 7, "epochs": 2,
            "losses": {"ce": [1.5, 1.25]}, "config": {"x": 1}})
        p1 = tmp_path / "a.bin"
        p2 = tmp_path / "b.bin"
        save_checkpoint(p1, ckpt)
        loaded = load_checkpoint(p1)
        save_checkpoint(p2, loaded)
        assert p1.read_bytes() == p2.read_bytes()

    def test_params_roundtrip_values(self, tmp_path):
        params = self._params()
        path = tmp_path / "c.bin"
        save_checkpoint(path, checkpoint_from_params(params))
        restored = params_from_checkpoint(load_checkpoint(path))
        assert set(restored.tensors) == set(params.tensors)
        for name, var in params.tensors.items():
            np.testing.assert_array_equal(restored.tensors[name].value, var.value)
        assert restored.heads == params.heads
        assert restored.config == params.config

    def test_frozen_set_persists(self, tmp_path):
        from pointcal.network import freeze
        params = freeze(self._params(), {"trunk", "mean"})
        path = tmp_path / "d.bin"
        save_checkpoint(path, checkpoint_from_params(params))
        restored = params_from_checkpoint(load_checkpoint(path))
        assert restored.frozen == frozenset({"trunk", "mean"})

    def test_rejects_garbage(self, tmp_path):
        path = tmp_path / "junk.bin"
        path.write_bytes(b"not a checkpoint")
        with pytest.raises(ValueError):
            load_checkpoint(path)


class TestConfigHash:
    def test_stable_and_order_insensitive(self):
        assert config_hash({"a": 1, "b": [2, 3]}) == config_hash({"b": [2, 3], "a": 1})
        assert config_hash({"a": 1}) != config_hash({"a": 2})
