from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from core import PowerFlowLabError
from core.dc_solver import Injection, solve_sample
from core.grid_model import BUSBAR_2, IslandedGrid, TopologyVector, apply_topology

GENERATOR_VERSION = "pflab-scenarios/1"
MAX_RETRIES = 100

TRAIN = "train"
VAL = "val"
TEST = "test"
OOD = "ood"
SPLITS = (TRAIN, VAL, TEST, OOD)

AT_MOST_ONE = "AtMostOne"
EXACTLY_ONE = "ExactlyOne"
EXACTLY_TWO = "ExactlyTwo"

SPLIT_RULES = {
    TRAIN: AT_MOST_ONE,
    VAL: AT_MOST_ONE,
    TEST: EXACTLY_ONE,
    OOD: EXACTLY_TWO,
}

# Desk scale: one tenth of the full 100k/10k/10k/10k protocol
DESK_SAMPLES = {TRAIN: 10_000, VAL: 1_000, TEST: 1_000, OOD: 1_000}

# Offsets keep every split on its own seed; val shares train's config only
SPLIT_SEED_OFFSETS = {TRAIN: 0, VAL: 1, TEST: 2, OOD: 3}


class RetriesExhausted(PowerFlowLabError):
    """Every draw in the retry budget islanded the grid"""


@dataclass
class ScenarioConfig:
    n_samples: int = 1000
    p_unchanged: float = 0.3
    max_reconfigured_substations: int = 2
    disconnection_rule: str = AT_MOST_ONE
    load_scale_range: tuple = (0.8, 1.2)
    seed: int = 0

    def __post_init__(self):
        lo, hi = (float(v) for v in self.load_scale_range)
        self.load_scale_range = (lo, hi)
        if not 0.0 <= float(self.p_unchanged) <= 1.0:
            raise ValueError(f"p_unchanged must lie in [0, 1], got {self.p_unchanged}")
        if lo > hi:
            raise ValueError(f"load_scale_range lower bound {lo} exceeds upper bound {hi}")
        if int(self.n_samples) < 1:
            raise ValueError(f"n_samples must be >= 1, got {self.n_samples}")
        if int(self.max_reconfigured_substations) < 1:
            raise ValueError("max_reconfigured_substations must be >= 1")
        if self.disconnection_rule not in (AT_MOST_ONE, EXACTLY_ONE, EXACTLY_TWO):
            raise ValueError(f"unknown disconnection rule {self.disconnection_rule!r}")
        self.n_samples = int(self.n_samples)
        self.max_reconfigured_substations = int(self.max_reconfigured_substations)
        self.seed = int(self.seed)

    def to_dict(self):
        out = asdict(self)
        out["load_scale_range"] = list(self.load_scale_range)
        return out


def _accepts(grid, tau):
    try:
        apply_topology(grid, tau)
        return True
    except IslandedGrid:
        return False


def sample_reference_topology(grid, rng, config):
    """Default topology with probability p_unchanged, else random busbar splits.

    Reconfigured draws that reproduce the default are redrawn so the default
    share stays at p_unchanged.
    """
    default = grid.default_topology()
    if rng.random() < config.p_unchanged:
        return default
    k = grid.n_substations
    max_subs = min(config.max_reconfigured_substations, k)
    subs_of = grid.element_substations()
    for _ in range(MAX_RETRIES):
        n_subs = int(rng.integers(1, max_subs + 1))
        chosen = rng.choice(k, size=n_subs, replace=False)
        element_bus = default.element_bus.copy()
        for sub in chosen:
            elements = np.flatnonzero(subs_of == sub)
            element_bus[elements] = rng.integers(0, 2, size=len(elements))
        tau = default.with_element_bus(element_bus)
        # every chosen element landed back on busbar 1
        if tau.is_default():
            continue
        if _accepts(grid, tau):
            return tau
    raise RetriesExhausted(f"no connected reference topology after {MAX_RETRIES} draws on '{grid.name}'")


def overlay_disconnections(grid, tau, rng, rule):
    """Disconnect lines on top of a reference topology according to a split rule"""
    if not np.all(tau.line_status):
        raise ValueError("overlay expects a topology with every line connected")
    if rule == AT_MOST_ONE:
        if rng.random() < 0.5:
            return tau
        n_out = 1
    elif rule == EXACTLY_ONE:
        n_out = 1
    elif rule == EXACTLY_TWO:
        n_out = 2
    else:
        raise ValueError(f"unknown disconnection rule {rule!r}")
    for _ in range(MAX_RETRIES):
        lines = rng.choice(grid.n_lines, size=n_out, replace=False)
        candidate = tau.with_disconnected(lines)
        if _accepts(grid, candidate):
            return candidate
    raise RetriesExhausted(f"no survivable {rule} disconnection after {MAX_RETRIES} draws on '{grid.name}'")


def sample_injection(grid, rng, config):
    """Loads scaled uniformly around nominal; generators share the total by capacity.

    Non-slack generators take total_load * capacity / total_capacity; the slack
    substation's generators take the remainder, so production equals load.
    """
    lo, hi = config.load_scale_range
    p_load = grid.nominal_load * rng.uniform(lo, hi, size=grid.n_loads)
    total = p_load.sum()
    capacity = grid.nominal_production
    p_prod = np.zeros(grid.n_generators)
    slack_gens = grid.slack_generators
    if grid.n_generators:
        share = capacity / capacity.sum() if capacity.sum() > 0 else np.full(grid.n_generators, 1.0 / grid.n_generators)
        p_prod = total * share
        if len(slack_gens):
            others = np.setdiff1d(np.arange(grid.n_generators), slack_gens)
            remainder = total - p_prod[others].sum()
            slack_share = capacity[slack_gens]
            slack_share = slack_share / slack_share.sum() if slack_share.sum() > 0 else np.full(len(slack_gens), 1.0 / len(slack_gens))
            p_prod[slack_gens] = remainder * slack_share
    return Injection(p_prod, p_load)


@dataclass
class Sample:
    tau: TopologyVector
    inj: Injection
    theta_bus: np.ndarray
    bus_mask: np.ndarray
    slack_slot: int
    theta_line: np.ndarray
    p_or: np.ndarray
    p_ex: np.ndarray


def build_sample(grid, tau, inj):
    bg, _, _, solution, flows = solve_sample(grid, tau, inj)
    theta_or, theta_ex = bg.line_angles(solution.theta)
    return Sample(
        tau=tau,
        inj=inj,
        theta_bus=bg.to_slots(solution.theta),
        bus_mask=bg.slot_mask(),
        slack_slot=bg.slack_slot,
        theta_line=np.stack([theta_or, theta_ex], axis=1),
        p_or=flows.p_or,
        p_ex=flows.p_ex,
    )


def sample_rng(seed, index):
    """Independent stream per (seed, sample index)"""
    return np.random.default_rng([int(seed), int(index)])


def generate_sample(grid, config, index):
    rng = sample_rng(config.seed, index)
    tau = sample_reference_topology(grid, rng, config)
    tau = overlay_disconnections(grid, tau, rng, config.disconnection_rule)
    inj = sample_injection(grid, rng, config)
    return build_sample(grid, tau, inj)


def _generate_chunk(args):
    grid, config, indices = args
    return [generate_sample(grid, config, i) for i in indices]


@dataclass
class Dataset:
    split: str
    samples: list
    manifest: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.samples)

    def subset(self, n):
        manifest = dict(self.manifest)
        manifest["n_samples"] = min(n, len(self.samples))
        return Dataset(self.split, self.samples[:n], manifest)

    def to_arrays(self):
        s = self.samples
        return {
            "p_prod": np.stack([x.inj.p_prod for x in s]),
            "p_load": np.stack([x.inj.p_load for x in s]),
            "element_bus": np.stack([x.tau.element_bus for x in s]).astype(float),
            "line_status": np.stack([x.tau.line_status for x in s]).astype(float),
            "theta_bus": np.stack([x.theta_bus for x in s]),
            "bus_mask": np.stack([x.bus_mask for x in s]).astype(float),
            "slack_slot": np.array([[x.slack_slot] for x in s], dtype=float),
            "theta_or": np.stack([x.theta_line[:, 0] for x in s]),
            "theta_ex": np.stack([x.theta_line[:, 1] for x in s]),
            "p_or": np.stack([x.p_or for x in s]),
            "p_ex": np.stack([x.p_ex for x in s]),
        }

    @classmethod
    def from_arrays(cls, split, arrays, manifest):
        samples = []
        for i in range(arrays["p_prod"].shape[0]):
            tau = TopologyVector(arrays["element_bus"][i].astype(np.int8), arrays["line_status"][i] > 0.5)
            samples.append(Sample(
                tau=tau,
                inj=Injection(arrays["p_prod"][i], arrays["p_load"][i]),
                theta_bus=arrays["theta_bus"][i].copy(),
                bus_mask=arrays["bus_mask"][i] > 0.5,
                slack_slot=int(arrays["slack_slot"][i, 0]),
                theta_line=np.stack([arrays["theta_or"][i], arrays["theta_ex"][i]], axis=1),
                p_or=arrays["p_or"][i].copy(),
                p_ex=arrays["p_ex"][i].copy(),
            ))
        return cls(split, samples, manifest)


def split_config(base, split, n_samples=None, seed=None):
    """Config for one split: rule from the split, seed offset per split"""
    base_seed = base.seed if seed is None else seed
    return ScenarioConfig(
        n_samples=n_samples if n_samples is not None else base.n_samples,
        p_unchanged=base.p_unchanged,
        max_reconfigured_substations=base.max_reconfigured_substations,
        disconnection_rule=SPLIT_RULES[split],
        load_scale_range=base.load_scale_range,
        seed=base_seed * 10 + SPLIT_SEED_OFFSETS[split],
    )


def generate_dataset(grid, split, config, workers=1):
    """Generate n_samples solvable samples; output order is the sample index order"""
    if split not in SPLIT_RULES:
        raise ValueError(f"unknown split {split!r}")
    if config.disconnection_rule != SPLIT_RULES[split]:
        raise ValueError(f"split {split} requires rule {SPLIT_RULES[split]}, config has "
                         f"{config.disconnection_rule}")
    indices = list(range(config.n_samples))
    if workers and workers > 1:
        chunks = [indices[i::workers] for i in range(workers)]
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_generate_chunk, [(grid, config, c) for c in chunks]))
        samples = [None] * config.n_samples
        for chunk, produced in zip(chunks, results):
            for i, sample in zip(chunk, produced):
                samples[i] = sample
    else:
        samples = [generate_sample(grid, config, i) for i in indices]

    manifest = {
        "grid": grid.name,
        "split": split,
        "n_samples": config.n_samples,
        "seed": config.seed,
        "config": config.to_dict(),
        "generator_version": GENERATOR_VERSION,
        "scale_note": "desk scale; full-scale runs use 100k/10k/10k/10k samples",
    }
    return Dataset(split, samples, manifest)
