import json
import os
from dataclasses import dataclass, field

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components

from core import PowerFlowLabError

BUSBAR_1 = 0
BUSBAR_2 = 1

SYNTHETIC_GRID_NAME = "synthetic36"


class GridError(PowerFlowLabError):
    """Grid description breaks one of its invariants"""


class IslandedGrid(PowerFlowLabError):
    """Energized graph is not a single component containing the slack"""

    def __init__(self, message, n_components=None):
        super().__init__(message)
        self.n_components = n_components


class DimensionMismatch(PowerFlowLabError):
    """Vector lengths do not match the grid they are used with"""


@dataclass(frozen=True)
class Line:
    id: int
    sub_or: int
    sub_ex: int
    x: float


@dataclass(frozen=True)
class Generator:
    id: int
    substation: int
    p_nominal: float = 0.0


@dataclass(frozen=True)
class Load:
    id: int
    substation: int
    p_nominal: float = 0.0


def _frozen(array, dtype):
    out = np.array(array, dtype=dtype)
    out.setflags(write=False)
    return out


def _count_components(n_nodes, node_a, node_b):
    graph = coo_matrix(
        (np.ones(len(node_a)), (np.asarray(node_a, dtype=int), np.asarray(node_b, dtype=int))),
        shape=(n_nodes, n_nodes),
    )
    n_components, labels = connected_components(graph, directed=False)
    return n_components, labels


@dataclass(frozen=True)
class Grid:
    """Static grid: substations, lines, generators, loads and the slack substation.

    Elements are ordered as line origin ends, line extremity ends, generators,
    loads. That order is shared by TopologyVector.element_bus and the feature
    encoding.
    """

    name: str
    n_substations: int
    lines: tuple
    generators: tuple
    loads: tuple
    slack_substation: int = 0
    base_mva: float = 100.0

    def __post_init__(self):
        object.__setattr__(self, "lines", tuple(self.lines))
        object.__setattr__(self, "generators", tuple(self.generators))
        object.__setattr__(self, "loads", tuple(self.loads))
        self._validate()

    def _validate(self):
        k = self.n_substations
        if k < 2:
            raise GridError(f"grid '{self.name}' needs at least 2 substations, got {k}")
        if not 0 <= self.slack_substation < k:
            raise GridError(f"slack substation {self.slack_substation} out of range")
        if not self.lines:
            raise GridError(f"grid '{self.name}' has no lines")
        for line in self.lines:
            for sub in (line.sub_or, line.sub_ex):
                if not 0 <= sub < k:
                    raise GridError(f"line {line.id} references unknown substation {sub}")
            if line.sub_or == line.sub_ex:
                raise GridError(f"line {line.id} connects substation {line.sub_or} to itself")
            if not (np.isfinite(line.x) and line.x > 0):
                raise GridError(f"line {line.id} has non-positive or non-finite reactance {line.x}")
        for kind, items in (("generator", self.generators), ("load", self.loads)):
            for item in items:
                if not 0 <= item.substation < k:
                    raise GridError(f"{kind} {item.id} references unknown substation {item.substation}")
                if not (np.isfinite(item.p_nominal) and item.p_nominal >= 0):
                    raise GridError(f"{kind} {item.id} has invalid nominal power {item.p_nominal}")
        n_components, _ = _count_components(k, self.line_origins, self.line_extremities)
        if n_components != 1:
            raise GridError(f"grid '{self.name}' is not connected with all lines in service "
                            f"({n_components} components)")

    @property
    def n_lines(self):
        return len(self.lines)

    @property
    def n_generators(self):
        return len(self.generators)

    @property
    def n_loads(self):
        return len(self.loads)

    @property
    def n_elements(self):
        return 2 * self.n_lines + self.n_generators + self.n_loads

    @property
    def n_slots(self):
        """Potential buses: two busbars per substation"""
        return 2 * self.n_substations

    @property
    def line_origins(self):
        return np.array([line.sub_or for line in self.lines], dtype=int)

    @property
    def line_extremities(self):
        return np.array([line.sub_ex for line in self.lines], dtype=int)

    @property
    def susceptances(self):
        return np.array([1.0 / line.x for line in self.lines])

    @property
    def generator_substations(self):
        return np.array([gen.substation for gen in self.generators], dtype=int)

    @property
    def load_substations(self):
        return np.array([load.substation for load in self.loads], dtype=int)

    @property
    def nominal_production(self):
        return np.array([gen.p_nominal for gen in self.generators])

    @property
    def nominal_load(self):
        return np.array([load.p_nominal for load in self.loads])

    @property
    def slack_generators(self):
        return np.flatnonzero(self.generator_substations == self.slack_substation)

    def element_substations(self):
        return np.concatenate([
            self.line_origins,
            self.line_extremities,
            self.generator_substations,
            self.load_substations,
        ])

    def substation_elements(self, substation):
        return np.flatnonzero(self.element_substations() == substation)

    def default_topology(self):
        return TopologyVector(
            np.zeros(self.n_elements, dtype=np.int8),
            np.ones(self.n_lines, dtype=bool),
        )

    def to_dict(self):
        return {
            "name": self.name,
            "base_mva": self.base_mva,
            "substations": self.n_substations,
            "slack_substation": self.slack_substation,
            "lines": [{"id": l.id, "from": l.sub_or, "to": l.sub_ex, "x": l.x} for l in self.lines],
            "generators": [{"id": g.id, "substation": g.substation, "p_nominal": g.p_nominal}
                           for g in self.generators],
            "loads": [{"id": d.id, "substation": d.substation, "p_nominal": d.p_nominal}
                      for d in self.loads],
        }

    @classmethod
    def from_dict(cls, data):
        try:
            return cls(
                name=data["name"],
                n_substations=int(data["substations"]),
                lines=[Line(int(l["id"]), int(l["from"]), int(l["to"]), float(l["x"]))
                       for l in data["lines"]],
                generators=[Generator(int(g["id"]), int(g["substation"]), float(g.get("p_nominal", 0.0)))
                            for g in data.get("generators", [])],
                loads=[Load(int(d["id"]), int(d["substation"]), float(d.get("p_nominal", 0.0)))
                       for d in data.get("loads", [])],
                slack_substation=int(data.get("slack_substation", 0)),
                base_mva=float(data.get("base_mva", 100.0)),
            )
        except (KeyError, TypeError, ValueError) as e:
            raise GridError(f"malformed grid description: {e}") from e

    def save(self, path):
        with open(path, "w", encoding="utf-8") as f:
            json.dump(self.to_dict(), f, indent=2)


def load_grid(path_or_name):
    """Load a grid JSON file, or build the synthetic medium grid by name"""
    if path_or_name == SYNTHETIC_GRID_NAME:
        return make_synthetic_grid()
    if not os.path.exists(path_or_name):
        raise FileNotFoundError(f"grid file not found: {path_or_name}")
    with open(path_or_name, "r", encoding="utf-8") as f:
        try:
            data = json.load(f)
        except json.JSONDecodeError as e:
            raise GridError(f"grid file {path_or_name} is not valid JSON: {e}") from e
    return Grid.from_dict(data)


def make_synthetic_grid(n_substations=36, n_lines=58, n_generators=22, n_loads=37, seed=2020):
    """Deterministic meshed grid with 36 substations by default.

    A ring backbone keeps every single-line outage survivable; the remaining
    lines are random chords. Substation 0 is the slack and hosts generator 0.
    """
    if n_lines < n_substations:
        raise GridError("synthetic grid needs at least one line per substation for its ring")
    rng = np.random.default_rng(seed)
    pairs = {(i, (i + 1) % n_substations) for i in range(n_substations)}
    pairs = {tuple(sorted(p)) for p in pairs}
    ordered = sorted(pairs)
    while len(ordered) < n_lines:
        a, b = sorted(int(v) for v in rng.choice(n_substations, size=2, replace=False))
        if (a, b) not in pairs:
            pairs.add((a, b))
            ordered.append((a, b))
    reactances = rng.uniform(0.05, 0.30, size=n_lines)
    lines = [Line(i, a, b, float(round(x, 5))) for i, ((a, b), x) in enumerate(zip(ordered, reactances))]

    gen_subs = np.concatenate([[0], rng.choice(np.arange(1, n_substations), size=n_generators - 1)])
    load_subs = rng.choice(np.arange(1, n_substations), size=n_loads)
    load_p = np.round(rng.uniform(0.1, 0.5, size=n_loads), 4)
    capacity = rng.uniform(0.5, 1.5, size=n_generators)
    capacity = np.round(capacity / capacity.sum() * load_p.sum() * 1.2, 4)

    generators = [Generator(i, int(s), float(p)) for i, (s, p) in enumerate(zip(gen_subs, capacity))]
    loads = [Load(i, int(s), float(p)) for i, (s, p) in enumerate(zip(load_subs, load_p))]
    return Grid(SYNTHETIC_GRID_NAME, n_substations, lines, generators, loads, slack_substation=0)


@dataclass(frozen=True)
class TopologyVector:
    """Per-element busbar assignment and per-line connection status"""

    element_bus: np.ndarray
    line_status: np.ndarray

    def __post_init__(self):
        element_bus = _frozen(self.element_bus, np.int8)
        if np.any((element_bus != BUSBAR_1) & (element_bus != BUSBAR_2)):
            raise ValueError("element_bus entries must be 0 (busbar 1) or 1 (busbar 2)")
        object.__setattr__(self, "element_bus", element_bus)
        object.__setattr__(self, "line_status", _frozen(self.line_status, bool))

    def check(self, grid):
        if len(self.element_bus) != grid.n_elements:
            raise DimensionMismatch(
                f"element_bus has {len(self.element_bus)} entries, grid '{grid.name}' has "
                f"{grid.n_elements} elements")
        if len(self.line_status) != grid.n_lines:
            raise DimensionMismatch(
                f"line_status has {len(self.line_status)} entries, grid '{grid.name}' has "
                f"{grid.n_lines} lines")

    @property
    def n_disconnected(self):
        return int(np.count_nonzero(~self.line_status))

    def is_default(self):
        return bool(np.all(self.element_bus == BUSBAR_1) and np.all(self.line_status))

    def with_disconnected(self, line_ids):
        status = self.line_status.copy()
        status[list(line_ids)] = False
        return TopologyVector(self.element_bus.copy(), status)

    def with_element_bus(self, element_bus):
        return TopologyVector(element_bus, self.line_status.copy())


@dataclass(frozen=True)
class BusGraph:
    """Energized electrical graph induced by a topology.

    Compact bus indices run over energized buses only; bus_slots maps each of
    them back to its potential-bus slot (substation k busbar 1 -> k,
    busbar 2 -> K + k).
    """

    n_buses: int
    n_slots: int
    bus_slots: np.ndarray
    element_to_bus: np.ndarray
    line_buses: np.ndarray
    line_status: np.ndarray
    line_susceptance: np.ndarray
    edge_buses: np.ndarray
    edge_lines: np.ndarray
    edge_susceptance: np.ndarray
    slack_bus: int
    generator_buses: np.ndarray = field(default=None)
    load_buses: np.ndarray = field(default=None)

    @property
    def slack_slot(self):
        return int(self.bus_slots[self.slack_bus])

    def slot_mask(self):
        mask = np.zeros(self.n_slots, dtype=bool)
        mask[self.bus_slots] = True
        return mask

    def to_slots(self, values, fill=0.0):
        """Scatter a per-bus vector into the 2K potential-bus slots"""
        values = np.asarray(values)
        out = np.full(values.shape[:-1] + (self.n_slots,), fill, dtype=float)
        out[..., self.bus_slots] = values
        return out

    def from_slots(self, slot_values):
        return np.asarray(slot_values)[..., self.bus_slots]

    def line_angles(self, theta):
        """(theta_or, theta_ex) per line; ends on a non-energized busbar read 0"""
        theta = np.asarray(theta, dtype=float)
        padded = np.append(theta, 0.0)
        idx = np.where(self.line_buses < 0, len(theta), self.line_buses)
        return padded[idx[:, 0]], padded[idx[:, 1]]


def apply_topology(grid, tau):
    """Build the energized bus graph for a topology vector.

    A busbar is an electrical node only when it hosts a generator, a load or
    the end of a connected line. The slack bus is the busbar-1 node of the
    slack substation, or its busbar-2 node when busbar 1 hosts nothing.
    """
    tau.check(grid)
    k = grid.n_substations
    n_lines = grid.n_lines
    slots = grid.element_substations() + k * tau.element_bus.astype(int)

    status = tau.line_status
    active = np.ones(grid.n_elements, dtype=bool)
    active[:n_lines] = status
    active[n_lines:2 * n_lines] = status

    energized = np.unique(slots[active])
    slot_to_bus = np.full(2 * k, -1, dtype=int)
    slot_to_bus[energized] = np.arange(len(energized))
    element_to_bus = slot_to_bus[slots]

    line_buses = np.stack([element_to_bus[:n_lines], element_to_bus[n_lines:2 * n_lines]], axis=1)
    connected = np.flatnonzero(status)
    susceptance = grid.susceptances
    edge_buses = line_buses[connected]

    n_buses = len(energized)
    n_components, labels = _count_components(n_buses, edge_buses[:, 0], edge_buses[:, 1])

    slack_slot = grid.slack_substation
    if slot_to_bus[slack_slot] < 0:
        slack_slot = grid.slack_substation + k
    slack_bus = int(slot_to_bus[slack_slot])
    if slack_bus < 0:
        raise IslandedGrid(f"slack substation {grid.slack_substation} hosts no energized bus")
    if n_components != 1:
        raise IslandedGrid(
            f"energized graph has {n_components} components, slack bus sits in component "
            f"{labels[slack_bus]}", n_components=n_components)

    n_gen = grid.n_generators
    offset = 2 * n_lines
    return BusGraph(
        n_buses=n_buses,
        n_slots=2 * k,
        bus_slots=_frozen(energized, int),
        element_to_bus=_frozen(element_to_bus, int),
        line_buses=_frozen(line_buses, int),
        line_status=_frozen(status, bool),
        line_susceptance=_frozen(susceptance, float),
        edge_buses=_frozen(edge_buses, int),
        edge_lines=_frozen(connected, int),
        edge_susceptance=_frozen(susceptance[connected], float),
        slack_bus=slack_bus,
        generator_buses=_frozen(element_to_bus[offset:offset + n_gen], int),
        load_buses=_frozen(element_to_bus[offset + n_gen:], int),
    )


@dataclass(frozen=True)
class NodalMatrix:
    """Bus susceptance Laplacian: y_ii = sum of incident b, y_ij = -b_ij"""

    dim: int
    entries: np.ndarray

    def reduced(self, slack):
        keep = np.flatnonzero(np.arange(self.dim) != slack)
        return self.entries[np.ix_(keep, keep)], keep

    def padded(self, bg):
        """Same matrix laid out on the 2K potential-bus slots"""
        out = np.zeros((bg.n_slots, bg.n_slots))
        out[np.ix_(bg.bus_slots, bg.bus_slots)] = self.entries
        return out


def build_nodal_matrix(bg):
    n = bg.n_buses
    entries = np.zeros((n, n))
    a = bg.edge_buses[:, 0]
    b = bg.edge_buses[:, 1]
    y = bg.edge_susceptance
    np.add.at(entries, (a, a), y)
    np.add.at(entries, (b, b), y)
    np.add.at(entries, (a, b), -y)
    np.add.at(entries, (b, a), -y)
    return NodalMatrix(n, _frozen(entries, float))


def feature_size(grid):
    return grid.n_generators + grid.n_loads + grid.n_elements + grid.n_lines


def encode_arrays(grid, element_bus, line_status, p_prod, p_load):
    """Row-wise feature encoding for stacked samples (leading axis = sample)"""
    element_bus = np.atleast_2d(element_bus)
    line_status = np.atleast_2d(line_status)
    p_prod = np.atleast_2d(p_prod)
    p_load = np.atleast_2d(p_load)
    expected = (grid.n_generators, grid.n_loads, grid.n_elements, grid.n_lines)
    got = (p_prod.shape[1], p_load.shape[1], element_bus.shape[1], line_status.shape[1])
    if got != expected:
        raise DimensionMismatch(f"feature blocks have sizes {got}, grid '{grid.name}' expects {expected}")
    return np.concatenate([
        p_prod.astype(float),
        p_load.astype(float),
        element_bus.astype(float),
        line_status.astype(float),
    ], axis=1)


def encode_features(grid, tau, inj):
    """[p_prod, p_load, element busbar (0/1), line status (1 connected / 0 not)]"""
    tau.check(grid)
    return encode_arrays(grid, tau.element_bus, tau.line_status, inj.p_prod, inj.p_load)[0]
