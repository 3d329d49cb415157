import json
import os

import numpy as np
import pytest

from core.grid_model import feature_size
from core.neural_core import PIMP, init_params, output_size
from core.scenario_gen import OOD, TEST
from utils.storage import (MANIFEST, file_digests, load_checkpoint, load_dataset, read_arrays, save_checkpoint,
                           save_dataset, write_arrays)


def test_dataset_round_trip(tmp_path, ieee14_datasets):
    dataset = ieee14_datasets[OOD]
    save_dataset(dataset, str(tmp_path))
    loaded = load_dataset(str(tmp_path))
    assert loaded.split == OOD
    assert loaded.manifest["n_samples"] == len(dataset)
    original, restored = dataset.to_arrays(), loaded.to_arrays()
    assert set(original) == set(restored)
    for name in original:
        np.testing.assert_array_equal(original[name], restored[name])
    assert [s.tau.n_disconnected for s in loaded.samples] == [2] * len(dataset)


def test_rewrite_gives_identical_bytes(tmp_path, ieee14_datasets):
    first, second = tmp_path / "a", tmp_path / "b"
    save_dataset(ieee14_datasets[TEST], str(first))
    save_dataset(ieee14_datasets[TEST], str(second))
    assert file_digests(str(first)) == file_digests(str(second))
    assert (first / MANIFEST).read_bytes() == (second / MANIFEST).read_bytes()


def test_arrays_are_little_endian_float64(tmp_path):
    array = np.arange(6, dtype=np.int32).reshape(2, 3)
    write_arrays(str(tmp_path), {"grid": array}, {"grid_name": "toy"})
    raw = (tmp_path / "grid.f64").read_bytes()
    assert len(raw) == 6 * 8
    np.testing.assert_array_equal(np.frombuffer(raw, dtype="<f8"), np.arange(6.0))
    arrays, manifest = read_arrays(str(tmp_path))
    assert arrays["grid"].shape == (2, 3)
    assert manifest["grid_name"] == "toy"


def test_unknown_dtype_is_rejected(tmp_path):
    write_arrays(str(tmp_path), {"a": np.ones(2)}, {})
    path = tmp_path / MANIFEST
    manifest = json.loads(path.read_text())
    manifest["arrays"][0]["dtype"] = "f32be"
    path.write_text(json.dumps(manifest))
    with pytest.raises(ValueError):
        read_arrays(str(tmp_path))


def test_missing_manifest(tmp_path):
    with pytest.raises(FileNotFoundError):
        read_arrays(str(tmp_path / "nowhere"))


def test_checkpoint_round_trip(tmp_path, ieee14):
    params = init_params([feature_size(ieee14), 6, 5, output_size(ieee14, PIMP)], "tanh", seed=3)
    params.input_mean = np.linspace(0.0, 1.0, params.n_inputs)
    save_checkpoint(params, str(tmp_path), {"model_kind": PIMP, "seed": 3, "pimp_layers": 20})
    restored, manifest = load_checkpoint(str(tmp_path))
    assert manifest["pimp_layers"] == 20
    assert manifest["layer_sizes"] == params.layer_sizes
    assert restored.activation == "tanh"
    for a, b in zip(params.arrays(), restored.arrays()):
        np.testing.assert_array_equal(a, b)
    np.testing.assert_array_equal(restored.input_mean, params.input_mean)
    assert sorted(os.listdir(tmp_path))[0] == "input_mean.f64"


if __name__ == "__main__":
    pytest.main([__file__, "-v"])
