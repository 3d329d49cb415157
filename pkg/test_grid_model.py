import numpy as np
import pytest

from conftest import IEEE14_PATH
from core.dc_solver import Injection
from core.grid_model import (BUSBAR_2, SYNTHETIC_GRID_NAME, DimensionMismatch, Generator, Grid, GridError,
                             IslandedGrid, Line, Load, TopologyVector, apply_topology, build_nodal_matrix,
                             encode_features, feature_size, load_grid, make_synthetic_grid)


def test_ieee14_asset_dimensions(ieee14):
    assert ieee14.n_substations == 14
    assert ieee14.n_lines == 20
    assert ieee14.n_generators == 6
    assert ieee14.n_loads == 11
    assert ieee14.n_elements == 2 * 20 + 6 + 11
    assert ieee14.slack_substation == 0


def test_two_bus_nodal_matrix(two_bus):
    bg = apply_topology(two_bus, two_bus.default_topology())
    Y = build_nodal_matrix(bg)
    np.testing.assert_allclose(Y.entries, [[10.0, -10.0], [-10.0, 10.0]])


def test_triangle_nodal_matrix_is_laplacian(triangle):
    bg = apply_topology(triangle, triangle.default_topology())
    Y = build_nodal_matrix(bg).entries
    np.testing.assert_allclose(Y, [[14.0, -10.0, -4.0], [-10.0, 15.0, -5.0], [-4.0, -5.0, 9.0]])
    np.testing.assert_allclose(Y, Y.T)
    np.testing.assert_allclose(Y.sum(axis=1), 0.0, atol=1e-12)


def test_default_topology_has_one_bus_per_substation(ieee14):
    bg = apply_topology(ieee14, ieee14.default_topology())
    assert bg.n_buses == 14
    assert list(bg.bus_slots) == list(range(14))
    assert bg.slack_bus == 0
    assert bg.slack_slot == 0


def test_busbar_split_adds_a_bus(triangle):
    element_bus = np.zeros(triangle.n_elements, dtype=np.int8)
    element_bus[4] = BUSBAR_2  # extremity of line 1 at substation 2
    element_bus[8] = BUSBAR_2  # load 1 at substation 2
    bg = apply_topology(triangle, triangle.default_topology().with_element_bus(element_bus))
    assert bg.n_buses == 4
    assert list(bg.bus_slots) == [0, 1, 2, 5]
    assert bg.line_buses[1].tolist() == [1, 3]
    assert bg.load_buses.tolist() == [1, 3]


def test_slack_falls_back_to_second_busbar(triangle):
    element_bus = np.zeros(triangle.n_elements, dtype=np.int8)
    element_bus[[0, 2, 6]] = BUSBAR_2  # every element of substation 0
    bg = apply_topology(triangle, triangle.default_topology().with_element_bus(element_bus))
    assert bg.n_buses == 3
    assert bg.slack_slot == triangle.n_substations


def test_bridge_disconnection_islands(path_grid):
    tau = path_grid.default_topology().with_disconnected([1])
    with pytest.raises(IslandedGrid):
        apply_topology(path_grid, tau)


def test_radial_line_outage_islands_ieee14(ieee14):
    with pytest.raises(IslandedGrid):
        apply_topology(ieee14, ieee14.default_topology().with_disconnected([13]))


def test_lonely_load_on_second_busbar_islands(triangle):
    element_bus = np.zeros(triangle.n_elements, dtype=np.int8)
    element_bus[7] = BUSBAR_2
    with pytest.raises(IslandedGrid):
        apply_topology(triangle, triangle.default_topology().with_element_bus(element_bus))


def test_disconnected_line_end_on_empty_busbar_reads_zero(triangle):
    element_bus = np.zeros(triangle.n_elements, dtype=np.int8)
    element_bus[4] = BUSBAR_2
    tau = TopologyVector(element_bus, [True, False, True])
    bg = apply_topology(triangle, tau)
    assert bg.n_buses == 3
    assert bg.line_buses[1, 1] == -1
    theta_or, theta_ex = bg.line_angles(np.array([0.0, -0.1, -0.2]))
    assert theta_or[1] == pytest.approx(-0.1)
    assert theta_ex[1] == 0.0


def test_padded_matrix_matches_compact(triangle):
    element_bus = np.zeros(triangle.n_elements, dtype=np.int8)
    element_bus[[4, 8]] = BUSBAR_2
    bg = apply_topology(triangle, triangle.default_topology().with_element_bus(element_bus))
    Y = build_nodal_matrix(bg)
    padded = Y.padded(bg)
    assert padded.shape == (6, 6)
    np.testing.assert_allclose(padded[np.ix_(bg.bus_slots, bg.bus_slots)], Y.entries)
    assert np.count_nonzero(padded[3]) == 0


def test_invalid_grids_are_rejected():
    with pytest.raises(GridError):
        Grid("loop", 2, [Line(0, 1, 1, 0.1)], [], [])
    with pytest.raises(GridError):
        Grid("split", 4, [Line(0, 0, 1, 0.1), Line(1, 2, 3, 0.1)], [], [])
    with pytest.raises(GridError):
        Grid("bad-x", 2, [Line(0, 0, 1, 0.0)], [], [])
    with pytest.raises(GridError):
        Grid("bad-gen", 2, [Line(0, 0, 1, 0.1)], [Generator(0, 5, 1.0)], [Load(0, 1, 1.0)])


def test_topology_vector_validation(triangle):
    with pytest.raises(ValueError):
        TopologyVector(np.full(triangle.n_elements, 2), np.ones(3, dtype=bool))
    short = TopologyVector(np.zeros(3, dtype=np.int8), np.ones(3, dtype=bool))
    with pytest.raises(DimensionMismatch):
        apply_topology(triangle, short)


def test_topology_vector_is_read_only(triangle):
    tau = triangle.default_topology()
    with pytest.raises(ValueError):
        tau.element_bus[0] = 1
    assert tau.is_default()
    assert tau.with_disconnected([0]).n_disconnected == 1


def test_grid_file_round_trip(tmp_path, ieee14):
    path = tmp_path / "grid.json"
    ieee14.save(str(path))
    assert load_grid(str(path)) == ieee14


def test_missing_grid_file():
    with pytest.raises(FileNotFoundError):
        load_grid("no/such/grid.json")


def test_synthetic_grid_shape_and_determinism():
    grid = make_synthetic_grid()
    assert grid.name == SYNTHETIC_GRID_NAME
    assert (grid.n_substations, grid.n_lines, grid.n_generators, grid.n_loads) == (36, 58, 22, 37)
    assert make_synthetic_grid().to_dict() == grid.to_dict()
    assert load_grid(SYNTHETIC_GRID_NAME).to_dict() == grid.to_dict()


def test_synthetic_grid_survives_any_single_outage():
    grid = make_synthetic_grid()
    for line in range(grid.n_lines):
        apply_topology(grid, grid.default_topology().with_disconnected([line]))


def test_feature_encoding_layout(ieee14):
    tau = ieee14.default_topology().with_disconnected([3])
    inj = Injection.nominal(ieee14)
    x = encode_features(ieee14, tau, inj)
    assert x.shape == (feature_size(ieee14),)
    g, d = ieee14.n_generators, ieee14.n_loads
    np.testing.assert_allclose(x[:g], inj.p_prod)
    np.testing.assert_allclose(x[g:g + d], inj.p_load)
    status = x[-ieee14.n_lines:]
    assert status[3] == 0.0 and status.sum() == ieee14.n_lines - 1


def test_asset_path_exists():
    assert load_grid(IEEE14_PATH).name == "ieee14"


if __name__ == "__main__":
    pytest.main([__file__, "-v"])
