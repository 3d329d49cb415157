import copy
import json
import os

from dotenv import load_dotenv

from core import PowerFlowLabError
from core.grid_model import SYNTHETIC_GRID_NAME, GridError, load_grid
from core.mp_engine import DEFAULT_LAYERS, DEFAULT_LAYERS_LARGE
from core.neural_core import MODEL_KINDS, TrainConfig
from core.scenario_gen import DESK_SAMPLES, SPLITS, ScenarioConfig, split_config
from utils.storage import write_json

PACKAGE_ROOT = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))

# Grids above this many substations get the larger MP Opt layer budget
LARGE_GRID_SUBSTATIONS = 20
MP_LAYERS_SMALL = DEFAULT_LAYERS
MP_LAYERS_LARGE = DEFAULT_LAYERS_LARGE

DEFAULTS = {
    "grid": "grids/ieee14.json",
    "output_dir": "runs",
    "seed": 0,
    "deterministic": False,
    "workers": 1,
    "scenario": {
        "p_unchanged": 0.3,
        "max_reconfigured_substations": 2,
        "load_scale_range": [0.8, 1.2],
        "samples": dict(DESK_SAMPLES),
    },
    "train": {
        "common": {
            "epochs": 200,
            "batch_size": 128,
            "initial_lr": 1e-3,
            "plateau_patience": 10,
            "plateau_factor": 0.5,
            "min_lr": 1e-6,
            "lambda_physics": 1.0,
            "pimp_layers": 50,
            "damping": 1.0,
            "pimp_all_layers_physics": False,
            "hidden_layers": [256, 256, 256, 256],
            "activation": "relu",
        },
        "mlp": {},
        "mlp_reg": {},
        "pimp": {},
    },
    "mp": {
        "n_layers": None,
        "damping": 1.0,
        "tol": 1e-6,
    },
    "bench": {
        "n_runs": 3,
        "seeds": [1, 2, 3],
        "timing_repeats": 5,
        "train_sizes": [],
        "warm_start_depth": 50,
        "thresholds": {
            "tau_lc": 1e-2,
            "tau_loss": 1e-6,
            "tau_null": 1e-6,
            "loss_range": [0.005, 0.04],
            "min_balance": 1e-9,
        },
    },
}

ENV_VARS = {
    "PFLAB_GRID": (("grid",), str),
    "PFLAB_OUTPUT_DIR": (("output_dir",), str),
    "PFLAB_SEED": (("seed",), int),
    "PFLAB_N_RUNS": (("bench", "n_runs"), int),
    "PFLAB_DETERMINISTIC": (("deterministic",), lambda v: v.lower() == "true"),
    "PFLAB_WORKERS": (("workers",), int),
    "PFLAB_TRAIN_SAMPLES": (("scenario", "samples", "train"), int),
}


class ConfigError(PowerFlowLabError):
    """Invalid or inconsistent run configuration"""


def _merge(base, update):
    """Recursive dict merge; update wins, nested dicts are merged key by key"""
    out = copy.deepcopy(base)
    for key, value in update.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = _merge(out[key], value)
        else:
            out[key] = copy.deepcopy(value)
    return out


def _set_path(tree, path, value):
    node = tree
    for key in path[:-1]:
        node = node.setdefault(key, {})
    node[path[-1]] = value


def _grid_substations(grid):
    return load_grid(grid).n_substations


class Config:
    def __init__(self, config_path=None, overrides=None):
        load_dotenv()
        settings = copy.deepcopy(DEFAULTS)

        if config_path:
            if not os.path.exists(config_path):
                raise ConfigError(f"config file not found: {config_path}")
            try:
                with open(config_path, "r", encoding="utf-8") as f:
                    settings = _merge(settings, json.load(f))
            except json.JSONDecodeError as e:
                raise ConfigError(f"config file {config_path} is not valid JSON: {e}") from e

        for name, (path, cast) in ENV_VARS.items():
            raw = os.getenv(name)
            if raw is None or raw == "":
                continue
            try:
                _set_path(settings, path, cast(raw))
            except ValueError as e:
                raise ConfigError(f"environment variable {name}={raw!r} is invalid: {e}") from e

        if overrides:
            settings = _merge(settings, {k: v for k, v in overrides.items() if v is not None})

        self.settings = self._resolve(settings)

    def _resolve(self, settings):
        grid = settings["grid"]
        if grid != SYNTHETIC_GRID_NAME and not os.path.exists(grid):
            bundled = os.path.join(PACKAGE_ROOT, grid)
            if os.path.exists(bundled):
                grid = settings["grid"] = bundled
        if grid != SYNTHETIC_GRID_NAME and not os.path.exists(grid):
            raise ConfigError(f"grid file not found: {grid}")
        if settings["deterministic"]:
            settings["workers"] = 1
        if int(settings["workers"]) < 1:
            raise ConfigError(f"workers must be >= 1, got {settings['workers']}")

        bench = settings["bench"]
        seeds = [int(s) for s in bench["seeds"]]
        n_runs = int(bench["n_runs"])
        if n_runs < 1:
            raise ConfigError(f"n_runs must be >= 1, got {n_runs}")
        if len(seeds) < n_runs:
            seeds += [seeds[-1] + i + 1 if seeds else i + 1 for i in range(n_runs - len(seeds))]
        bench["seeds"] = seeds[:n_runs]
        bench["n_runs"] = n_runs

        if settings["mp"]["n_layers"] is None:
            try:
                large = _grid_substations(grid) > LARGE_GRID_SUBSTATIONS
            except (OSError, GridError) as e:
                raise ConfigError(f"cannot read grid {grid}: {e}") from e
            settings["mp"]["n_layers"] = MP_LAYERS_LARGE if large else MP_LAYERS_SMALL

        missing = [s for s in SPLITS if s not in settings["scenario"]["samples"]]
        if missing:
            raise ConfigError(f"scenario.samples is missing splits {missing}")

        # Build every typed config once so bad values fail at load time
        try:
            for split in SPLITS:
                self._scenario(settings, split)
            for kind in MODEL_KINDS:
                self._train(settings, kind)
        except (TypeError, ValueError) as e:
            raise ConfigError(f"invalid configuration: {e}") from e
        return settings

    @staticmethod
    def _scenario(settings, split):
        scenario = settings["scenario"]
        base = ScenarioConfig(
            n_samples=int(scenario["samples"][split]),
            p_unchanged=scenario["p_unchanged"],
            max_reconfigured_substations=scenario["max_reconfigured_substations"],
            load_scale_range=tuple(scenario["load_scale_range"]),
            seed=int(settings["seed"]),
        )
        return split_config(base, split)

    @staticmethod
    def _train(settings, model_kind, seed=None):
        params = _merge(settings["train"]["common"], settings["train"].get(model_kind, {}))
        params["model_kind"] = model_kind
        params["seed"] = int(settings["seed"] if seed is None else seed)
        params["workers"] = int(settings["workers"])
        return TrainConfig(**params)

    @property
    def resolved(self):
        return copy.deepcopy(self.settings)

    def save(self, path):
        """Write the resolved config next to run outputs"""
        os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
        write_json(path, self.settings)
        return path

    def get_grid_settings(self):
        return {
            "grid": self.settings["grid"],
            "output_dir": self.settings["output_dir"],
            "deterministic": self.settings["deterministic"],
            "workers": self.settings["workers"],
        }

    def get_scenario_settings(self, split):
        if split not in SPLITS:
            raise ConfigError(f"unknown split {split!r}, expected one of {SPLITS}")
        return self._scenario(self.settings, split).to_dict()

    def get_train_settings(self, model_kind, seed=None):
        if model_kind not in MODEL_KINDS:
            raise ConfigError(f"unknown model kind {model_kind!r}, expected one of {MODEL_KINDS}")
        return self._train(self.settings, model_kind, seed).to_dict()

    def get_mp_settings(self):
        return dict(self.settings["mp"])

    def get_bench_settings(self):
        return copy.deepcopy(self.settings["bench"])


def test_config():
    config = Config()
    print("Grid Settings:", config.get_grid_settings())
    print("Scenario Settings (test):", config.get_scenario_settings("test"))
    print("MP Settings:", config.get_mp_settings())
    print("Bench Settings:", config.get_bench_settings())


if __name__ == "__main__":
    test_config()
