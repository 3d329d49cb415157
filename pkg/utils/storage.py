import hashlib
import json
import os

import numpy as np

from core.neural_core import MlpParams
from core.scenario_gen import Dataset

MANIFEST = "manifest.json"
DTYPE = "f64le"


def write_json(path, payload):
    """Sorted keys, fixed indent: reruns write identical bytes"""
    with open(path, "w", encoding="utf-8") as f:
        json.dump(payload, f, indent=2, sort_keys=True)
        f.write("\n")


def read_json(path):
    with open(path, "r", encoding="utf-8") as f:
        return json.load(f)


def write_arrays(directory, arrays, manifest):
    """Write each array as raw row-major little-endian float64 plus a manifest listing shapes"""
    os.makedirs(directory, exist_ok=True)
    entries = []
    for name in sorted(arrays):
        array = np.ascontiguousarray(arrays[name], dtype="<f8")
        filename = f"{name}.f64"
        array.tofile(os.path.join(directory, filename))
        entries.append({"name": name, "shape": list(array.shape), "dtype": DTYPE, "file": filename})
    payload = dict(manifest)
    payload["arrays"] = entries
    write_json(os.path.join(directory, MANIFEST), payload)
    return payload


def read_arrays(directory):
    manifest_path = os.path.join(directory, MANIFEST)
    if not os.path.exists(manifest_path):
        raise FileNotFoundError(f"no {MANIFEST} in {directory}")
    manifest = read_json(manifest_path)
    arrays = {}
    for entry in manifest.get("arrays", []):
        if entry["dtype"] != DTYPE:
            raise ValueError(f"array {entry['name']} has unsupported dtype {entry['dtype']}")
        raw = np.fromfile(os.path.join(directory, entry["file"]), dtype="<f8")
        arrays[entry["name"]] = raw.reshape(entry["shape"])
    return arrays, manifest


def file_digests(directory):
    """SHA-256 of every array file, keyed by file name"""
    _, manifest = read_arrays(directory)
    digests = {}
    for entry in manifest["arrays"]:
        with open(os.path.join(directory, entry["file"]), "rb") as f:
            digests[entry["file"]] = hashlib.sha256(f.read()).hexdigest()
    return digests


def save_dataset(dataset, directory):
    return write_arrays(directory, dataset.to_arrays(), dataset.manifest)


def load_dataset(directory):
    arrays, manifest = read_arrays(directory)
    manifest = {k: v for k, v in manifest.items() if k != "arrays"}
    return Dataset.from_arrays(manifest.get("split", "unknown"), arrays, manifest)


def save_checkpoint(params, directory, manifest):
    arrays = {"input_mean": params.input_mean, "input_std": params.input_std}
    for i, (w, b) in enumerate(zip(params.weights, params.biases)):
        arrays[f"layer{i:02d}_weights"] = w
        arrays[f"layer{i:02d}_bias"] = b
    payload = dict(manifest)
    payload["layer_sizes"] = params.layer_sizes
    payload["activation"] = params.activation
    return write_arrays(directory, arrays, payload)


def load_checkpoint(directory):
    arrays, manifest = read_arrays(directory)
    n_layers = len(manifest["layer_sizes"]) - 1
    params = MlpParams(
        weights=[arrays[f"layer{i:02d}_weights"] for i in range(n_layers)],
        biases=[arrays[f"layer{i:02d}_bias"] for i in range(n_layers)],
        activation=manifest["activation"],
        input_mean=arrays["input_mean"],
        input_std=arrays["input_std"],
    )
    return params, manifest
