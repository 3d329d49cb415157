import os

import pytest

from core.grid_model import Generator, Grid, Line, Load, load_grid
from core.scenario_gen import OOD, TEST, TRAIN, VAL, ScenarioConfig, generate_dataset, split_config

ROOT = os.path.dirname(os.path.abspath(__file__))
IEEE14_PATH = os.path.join(ROOT, "grids", "ieee14.json")


def build_two_bus():
    return Grid("two-bus", 2, [Line(0, 0, 1, 0.1)], [Generator(0, 0, 1.0)], [Load(0, 1, 1.0)])


def build_triangle():
    lines = [Line(0, 0, 1, 0.1), Line(1, 1, 2, 0.2), Line(2, 0, 2, 0.25)]
    return Grid("triangle", 3, lines, [Generator(0, 0, 1.0)], [Load(0, 1, 0.4), Load(1, 2, 0.6)])


def build_path():
    lines = [Line(0, 0, 1, 0.1), Line(1, 1, 2, 0.2)]
    return Grid("path", 3, lines, [Generator(0, 0, 1.0)], [Load(0, 2, 1.0)])


def build_toy4():
    lines = [
        Line(0, 0, 1, 0.1),
        Line(1, 1, 2, 0.2),
        Line(2, 2, 3, 0.1),
        Line(3, 3, 0, 0.25),
        Line(4, 0, 2, 0.3),
    ]
    generators = [Generator(0, 0, 1.0), Generator(1, 2, 0.5)]
    loads = [Load(0, 1, 0.6), Load(1, 3, 0.8)]
    return Grid("toy4", 4, lines, generators, loads)


def small_datasets(grid, sizes, seed=0):
    base = ScenarioConfig(seed=seed)
    return {split: generate_dataset(grid, split, split_config(base, split, n_samples=n))
            for split, n in sizes.items()}


@pytest.fixture
def two_bus():
    return build_two_bus()


@pytest.fixture
def triangle():
    return build_triangle()


@pytest.fixture
def path_grid():
    return build_path()


@pytest.fixture
def toy4():
    return build_toy4()


@pytest.fixture(scope="session")
def ieee14():
    return load_grid(IEEE14_PATH)


@pytest.fixture(scope="session")
def ieee14_datasets(ieee14):
    return small_datasets(ieee14, {TRAIN: 40, VAL: 10, TEST: 12, OOD: 12}, seed=1)


@pytest.fixture(scope="session")
def toy4_datasets():
    return small_datasets(build_toy4(), {TRAIN: 24, VAL: 8}, seed=2)
