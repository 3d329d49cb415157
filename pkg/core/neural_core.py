import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np
import pandas as pd

from core import PowerFlowLabError
from core.dc_solver import nodal_injections
from core.grid_model import DimensionMismatch, apply_topology, build_nodal_matrix, encode_arrays
from core.mp_engine import lc_residual, mp_adjoint, mp_forward
from core.scenario_gen import Dataset

MLP = "mlp"
MLP_REG = "mlp_reg"
PIMP = "pimp"
MODEL_KINDS = (MLP, MLP_REG, PIMP)

ACTIVATIONS = ("relu", "tanh")


class NonFiniteLoss(PowerFlowLabError):
    """Loss went to NaN or inf during training"""


@dataclass
class MlpParams:
    """Dense network: hidden layers share one activation, the output is linear.

    weights[i] has shape (out, in). input_mean/input_std standardize raw
    features before the first layer.
    """

    weights: list
    biases: list
    activation: str = "relu"
    input_mean: np.ndarray = None
    input_std: np.ndarray = None

    def __post_init__(self):
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"activation must be one of {ACTIVATIONS}, got {self.activation!r}")
        for i in range(1, len(self.weights)):
            if self.weights[i].shape[1] != self.weights[i - 1].shape[0]:
                raise DimensionMismatch(f"layer {i} expects {self.weights[i].shape[1]} inputs, "
                                        f"layer {i - 1} emits {self.weights[i - 1].shape[0]}")
        if self.input_mean is None:
            self.input_mean = np.zeros(self.n_inputs)
        if self.input_std is None:
            self.input_std = np.ones(self.n_inputs)

    @property
    def n_inputs(self):
        return self.weights[0].shape[1]

    @property
    def n_outputs(self):
        return self.weights[-1].shape[0]

    @property
    def layer_sizes(self):
        return [self.n_inputs] + [w.shape[0] for w in self.weights]

    def arrays(self):
        return self.weights + self.biases

    def copy(self):
        return MlpParams([w.copy() for w in self.weights], [b.copy() for b in self.biases],
                         self.activation, self.input_mean.copy(), self.input_std.copy())

    def is_finite(self):
        return all(np.all(np.isfinite(a)) for a in self.arrays())


def init_params(layer_sizes, activation="relu", seed=0):
    """Uniform fan-in init, bound 1/sqrt(fan_in)"""
    rng = np.random.default_rng(seed)
    weights, biases = [], []
    for fan_in, fan_out in zip(layer_sizes[:-1], layer_sizes[1:]):
        bound = 1.0 / np.sqrt(fan_in)
        weights.append(rng.uniform(-bound, bound, size=(fan_out, fan_in)))
        biases.append(rng.uniform(-bound, bound, size=fan_out))
    return MlpParams(weights, biases, activation)


def _activate(z, kind):
    return np.maximum(z, 0.0) if kind == "relu" else np.tanh(z)


def _activate_grad(z, a, kind):
    return (z > 0).astype(float) if kind == "relu" else 1.0 - a * a


def _forward_cached(params, x):
    x = np.atleast_2d(np.asarray(x, dtype=float))
    if x.shape[1] != params.n_inputs:
        raise DimensionMismatch(f"input has {x.shape[1]} features, network expects {params.n_inputs}")
    a = (x - params.input_mean) / params.input_std
    layers = [(None, a)]
    last = len(params.weights) - 1
    for i, (w, b) in enumerate(zip(params.weights, params.biases)):
        z = a @ w.T + b
        a = z if i == last else _activate(z, params.activation)
        layers.append((z, a))
    return a, layers


def forward(params, x):
    single = np.ndim(x) == 1
    y, _ = _forward_cached(params, x)
    return y[0] if single else y


def _backward(params, layers, grad_out):
    grads_w = [None] * len(params.weights)
    grads_b = [None] * len(params.biases)
    g = grad_out
    last = len(params.weights) - 1
    for i in range(last, -1, -1):
        z, a = layers[i + 1]
        if i != last:
            g = g * _activate_grad(z, a, params.activation)
        a_prev = layers[i][1]
        grads_w[i] = g.T @ a_prev
        grads_b[i] = g.sum(axis=0)
        if i:
            g = g @ params.weights[i]
    return grads_w + grads_b


@dataclass
class PreparedData:
    """Dataset stacked into the arrays the three model kinds train on.

    Bus quantities live on the 2K potential-bus slots; Y and p are the padded
    nodal matrix and nodal injections of each sample.
    """

    x: np.ndarray
    theta_line: np.ndarray
    theta_bus: np.ndarray
    bus_mask: np.ndarray
    slack_slot: np.ndarray
    Y: np.ndarray
    p: np.ndarray
    line_slots: np.ndarray
    line_status: np.ndarray

    def __len__(self):
        return self.x.shape[0]

    def take(self, idx):
        return PreparedData(*(getattr(self, f)[idx] for f in self.__dataclass_fields__))

    def subset(self, n):
        return self.take(np.arange(min(n, len(self))))


def prepare_dataset(grid, dataset, with_matrix=True):
    """Stack a dataset for training or inference; with_matrix=False skips the padded Y (line-level MLP)"""
    samples = dataset.samples
    n = len(samples)
    k = grid.n_substations
    n_lines = grid.n_lines
    slots = 2 * k
    Y = np.zeros((n, slots, slots) if with_matrix else (n, 0, 0))
    p = np.zeros((n, slots))
    arrays = dataset.to_arrays()
    subs = grid.element_substations()
    line_slots = np.zeros((n, n_lines, 2), dtype=int)
    for i, sample in enumerate(samples):
        bg = apply_topology(grid, sample.tau)
        if with_matrix:
            Y[i] = build_nodal_matrix(bg).padded(bg)
        p[i] = bg.to_slots(nodal_injections(bg, grid, sample.inj))
        element_slots = subs + k * sample.tau.element_bus.astype(int)
        line_slots[i, :, 0] = element_slots[:n_lines]
        line_slots[i, :, 1] = element_slots[n_lines:2 * n_lines]
    x = encode_arrays(grid, arrays["element_bus"], arrays["line_status"], arrays["p_prod"], arrays["p_load"])
    return PreparedData(
        x=x,
        theta_line=np.concatenate([arrays["theta_or"], arrays["theta_ex"]], axis=1),
        theta_bus=arrays["theta_bus"],
        bus_mask=arrays["bus_mask"] > 0.5,
        slack_slot=arrays["slack_slot"][:, 0].astype(int),
        Y=Y,
        p=p,
        line_slots=line_slots,
        line_status=arrays["line_status"] > 0.5,
    )


@dataclass
class LossSettings:
    lambda_physics: float = 1.0
    pimp_layers: int = 50
    damping: float = 1.0
    pimp_all_layers_physics: bool = False


@dataclass
class LossParts:
    total: float
    data: float
    physics: float


def _reference_mask(data):
    """Energized slots other than the slack, whose angle is pinned to 0"""
    return data.bus_mask & (np.arange(data.bus_mask.shape[1]) != data.slack_slot[:, None])


def _physics_term(theta, batch, count):
    """mean E^2 over energized buses and its gradient w.r.t. theta"""
    residual = np.where(batch.bus_mask, lc_residual(theta, batch.p, batch.Y), 0.0)
    value = float(np.sum(residual * residual) / count)
    g = -np.einsum("nji,nj->ni", batch.Y, 2.0 * residual / count)
    return value, g


def _loss_and_output_grad(y_hat, batch, model_kind, settings):
    """Loss parts and dL/dy_hat for one batch"""
    lam = settings.lambda_physics
    if model_kind == MLP:
        diff = y_hat - batch.theta_line
        data = float(np.mean(diff * diff))
        return LossParts(data, data, 0.0), 2.0 * diff / diff.size

    mask = batch.bus_mask
    count = max(int(mask.sum()), 1)
    if model_kind == MLP_REG:
        free = _reference_mask(batch)
        theta = np.where(free, y_hat, 0.0)
        diff = np.where(mask, theta - batch.theta_bus, 0.0)
        data = float(np.sum(diff * diff) / count)
        physics, g_phys = _physics_term(theta, batch, count)
        grad = np.where(free, 2.0 * diff / count + lam * g_phys, 0.0)
        return LossParts(data + lam * physics, data, physics), grad

    if model_kind == PIMP:
        theta0 = np.where(mask, y_hat, 0.0)
        n_layers = settings.pimp_layers
        all_layers = settings.pimp_all_layers_physics and n_layers > 0
        theta_k, cache = mp_forward(theta0, batch.p, batch.Y, settings.damping, n_layers,
                                    slack=batch.slack_slot, keep_states=all_layers)
        diff = np.where(mask, theta_k - batch.theta_bus, 0.0)
        data = float(np.sum(diff * diff) / count)
        if all_layers:
            weight = 1.0 / (n_layers + 1)
            physics = 0.0
            layer_grads = []
            for state in cache.states:
                value, g = _physics_term(state, batch, count)
                physics += weight * value
                layer_grads.append(lam * weight * g)
            g_k = 2.0 * diff / count
        else:
            physics, g_phys = _physics_term(theta_k, batch, count)
            layer_grads = None
            g_k = 2.0 * diff / count + lam * g_phys
        g0 = mp_adjoint(g_k, cache, layer_grads)
        return LossParts(data + lam * physics, data, physics), np.where(mask, g0, 0.0)

    raise ValueError(f"unknown model kind {model_kind!r}")


def loss(params, batch, model_kind, aux=None):
    y_hat, _ = _forward_cached(params, batch.x)
    parts, _ = _loss_and_output_grad(y_hat, batch, model_kind, aux or LossSettings())
    return parts


def grad(params, batch, model_kind, aux=None):
    """Exact gradient of the model-kind loss w.r.t. every weight and bias.

    Returns (grads, LossParts); grads lists weight gradients then bias
    gradients, in the order of MlpParams.arrays().
    """
    if len(batch) == 0:
        raise ValueError("cannot take a gradient over an empty batch")
    y_hat, layers = _forward_cached(params, batch.x)
    parts, g_out = _loss_and_output_grad(y_hat, batch, model_kind, aux or LossSettings())
    if not np.isfinite(parts.total):
        raise NonFiniteLoss(f"{model_kind} loss is {parts.total}")
    return _backward(params, layers, g_out), parts


class Adam:
    def __init__(self, params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(a) for a in params.arrays()]
        self.v = [np.zeros_like(a) for a in params.arrays()]

    def step(self, params, grads):
        self.t += 1
        correction1 = 1.0 - self.beta1 ** self.t
        correction2 = 1.0 - self.beta2 ** self.t
        for a, g, m, v in zip(params.arrays(), grads, self.m, self.v):
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            a -= self.lr * (m / correction1) / (np.sqrt(v / correction2) + self.eps)


class ReduceLROnPlateau:
    """Multiply lr by factor after `patience` epochs without a better validation loss"""

    def __init__(self, lr, patience=10, factor=0.5, min_lr=1e-6):
        self.lr = lr
        self.patience = patience
        self.factor = factor
        self.min_lr = min_lr
        self.best = np.inf
        self.bad_epochs = 0

    def step(self, val_loss):
        if val_loss < self.best:
            self.best = val_loss
            self.bad_epochs = 0
        else:
            self.bad_epochs += 1
            if self.bad_epochs >= self.patience:
                self.lr = max(self.lr * self.factor, self.min_lr)
                self.bad_epochs = 0
        return self.lr


@dataclass
class TrainConfig:
    model_kind: str = MLP
    epochs: int = 200
    batch_size: int = 128
    initial_lr: float = 1e-3
    plateau_patience: int = 10
    plateau_factor: float = 0.5
    min_lr: float = 1e-6
    lambda_physics: float = 1.0
    seed: int = 0
    pimp_layers: int = 50
    damping: float = 1.0
    pimp_all_layers_physics: bool = False
    hidden_layers: tuple = (256, 256, 256, 256)
    activation: str = "relu"
    workers: int = 1

    def __post_init__(self):
        if self.model_kind not in MODEL_KINDS:
            raise ValueError(f"model_kind must be one of {MODEL_KINDS}, got {self.model_kind!r}")
        if not 0.0 < self.plateau_factor < 1.0:
            raise ValueError(f"plateau_factor must lie in (0, 1), got {self.plateau_factor}")
        if self.lambda_physics < 0:
            raise ValueError(f"lambda_physics must be >= 0, got {self.lambda_physics}")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")
        if self.pimp_layers < 0:
            raise ValueError("pimp_layers must be >= 0")
        self.hidden_layers = tuple(int(h) for h in self.hidden_layers)

    def loss_settings(self):
        return LossSettings(self.lambda_physics, self.pimp_layers, self.damping,
                            self.pimp_all_layers_physics)

    def to_dict(self):
        out = asdict(self)
        out["hidden_layers"] = list(self.hidden_layers)
        return out


@dataclass
class TrainReport:
    model_kind: str
    seed: int
    train_loss: list = field(default_factory=list)
    val_loss: list = field(default_factory=list)
    data_loss: list = field(default_factory=list)
    physics_loss: list = field(default_factory=list)
    lr: list = field(default_factory=list)
    best_epoch: int = 0
    wall_time: float = 0.0

    @property
    def epochs_run(self):
        return len(self.train_loss)

    def to_frame(self):
        return pd.DataFrame({
            "epoch": np.arange(1, self.epochs_run + 1),
            "train_loss": self.train_loss,
            "val_loss": self.val_loss,
            "data_loss": self.data_loss,
            "physics_loss": self.physics_loss,
            "lr": self.lr,
        })


def output_size(grid, model_kind):
    return 2 * grid.n_lines if model_kind == MLP else 2 * grid.n_substations


def _output_size_for(data, model_kind):
    return data.theta_line.shape[1] if model_kind == MLP else data.theta_bus.shape[1]


def _loss_weight(batch, model_kind):
    """Normalizer of a batch loss: samples for MLP, energized bus entries otherwise"""
    if model_kind == MLP:
        return len(batch)
    return max(int(batch.bus_mask.sum()), 1)


def _accumulate(params, batch, model_kind, settings, workers):
    """Gradient over a batch; with workers > 1 the batch is cut into fixed chunks summed in order"""
    if workers <= 1 or len(batch) < 2 * workers:
        return grad(params, batch, model_kind, settings)
    chunks = np.array_split(np.arange(len(batch)), workers)

    def run(idx):
        return grad(params, batch.take(idx), model_kind, settings)

    with ThreadPoolExecutor(max_workers=workers) as pool:
        results = list(pool.map(run, chunks))
    n = _loss_weight(batch, model_kind)
    total = [np.zeros_like(a) for a in params.arrays()]
    parts = LossParts(0.0, 0.0, 0.0)
    for idx, (grads, chunk_parts) in zip(chunks, results):
        # chunk results are chunk means; weights are the chunk share of the normalizer
        w = _loss_weight(batch.take(idx), model_kind) / n
        for acc, g in zip(total, grads):
            acc += w * g
        parts = LossParts(parts.total + w * chunk_parts.total, parts.data + w * chunk_parts.data,
                          parts.physics + w * chunk_parts.physics)
    return total, parts


def evaluate_loss(params, data, model_kind, settings, chunk=1024):
    total = data_part = physics = 0.0
    n = len(data)
    norm = _loss_weight(data, model_kind)
    for start in range(0, n, chunk):
        part = data.take(np.arange(start, min(start + chunk, n)))
        parts = loss(params, part, model_kind, settings)
        w = _loss_weight(part, model_kind) / norm
        total += w * parts.total
        data_part += w * parts.data
        physics += w * parts.physics
    return LossParts(total, data_part, physics)


def train(model_kind, train_data, val_data, config, logger=None, run_id=None, verbose=False):
    """Adam + reduce-on-plateau; returns the best-validation parameters and the report"""
    if config.model_kind != model_kind:
        config = TrainConfig(**{**config.to_dict(), "model_kind": model_kind})
    if train_data.x.shape[1] != val_data.x.shape[1]:
        raise DimensionMismatch("train and validation data come from different feature encodings")
    sizes = [train_data.x.shape[1], *config.hidden_layers, _output_size_for(train_data, model_kind)]
    params = init_params(sizes, config.activation, config.seed)
    params.input_mean = train_data.x.mean(axis=0)
    std = train_data.x.std(axis=0)
    params.input_std = np.where(std > 1e-12, std, 1.0)

    settings = config.loss_settings()
    optimizer = Adam(params, config.initial_lr)
    scheduler = ReduceLROnPlateau(config.initial_lr, config.plateau_patience,
                                  config.plateau_factor, config.min_lr)
    rng = np.random.default_rng(config.seed)
    report = TrainReport(model_kind, config.seed)
    best_params, best_val = params.copy(), np.inf
    started = time.perf_counter()
    n = len(train_data)

    for epoch in range(1, config.epochs + 1):
        order = rng.permutation(n)
        sums = np.zeros(3)
        for start in range(0, n, config.batch_size):
            idx = order[start:start + config.batch_size]
            grads, parts = _accumulate(params, train_data.take(idx), model_kind, settings, config.workers)
            optimizer.step(params, grads)
            sums += len(idx) * np.array([parts.total, parts.data, parts.physics])
        if not params.is_finite():
            raise NonFiniteLoss(f"{model_kind} parameters diverged at epoch {epoch}")
        val = evaluate_loss(params, val_data, model_kind, settings)
        if not np.isfinite(val.total):
            raise NonFiniteLoss(f"{model_kind} validation loss is {val.total} at epoch {epoch}")
        epoch_total, epoch_data, epoch_physics = sums / n
        report.train_loss.append(epoch_total)
        report.data_loss.append(epoch_data)
        report.physics_loss.append(epoch_physics)
        report.val_loss.append(val.total)
        report.lr.append(optimizer.lr)
        if val.total < best_val:
            best_val = val.total
            best_params = params.copy()
            report.best_epoch = epoch
        optimizer.lr = scheduler.step(val.total)
        if logger is not None:
            logger.log_epoch(run_id or f"{model_kind}-{config.seed}", model_kind, epoch,
                             epoch_total, val.total, epoch_data, epoch_physics, report.lr[-1])
        if verbose and (epoch == 1 or epoch % 10 == 0 or epoch == config.epochs):
            print(f"  epoch {epoch:4d} | train {epoch_total:.3e} | val {val.total:.3e} | "
                  f"lr {report.lr[-1]:.1e}")

    report.wall_time = time.perf_counter() - started
    return best_params, report


@dataclass
class Prediction:
    """Batch prediction: bus angles on slots (None for line-level models) and line-end angles"""

    theta_bus: np.ndarray
    theta_line: np.ndarray


def predict_batch(params, model_kind, data, pimp_layers=50, damping=1.0):
    if params.n_inputs != data.x.shape[1]:
        raise DimensionMismatch(f"network expects {params.n_inputs} features, data has {data.x.shape[1]}")
    y_hat = forward(params, data.x)
    n_lines = data.line_slots.shape[1]
    if model_kind == MLP:
        if y_hat.shape[1] != 2 * n_lines:
            raise DimensionMismatch(f"line-level network emits {y_hat.shape[1]} values, grid needs {2 * n_lines}")
        return Prediction(None, np.stack([y_hat[:, :n_lines], y_hat[:, n_lines:]], axis=2))
    if y_hat.shape[1] != data.bus_mask.shape[1]:
        raise DimensionMismatch(f"bus-level network emits {y_hat.shape[1]} values, grid has "
                                f"{data.bus_mask.shape[1]} bus slots")
    theta = np.where(_reference_mask(data), y_hat, 0.0)
    if model_kind == PIMP:
        theta, _ = mp_forward(theta, data.p, data.Y, damping, pimp_layers,
                              slack=data.slack_slot, keep_states=False)
    return Prediction(theta, line_angles_from_slots(theta, data))


def line_angles_from_slots(theta_slots, data):
    rows = np.arange(theta_slots.shape[0])[:, None]
    theta_or = theta_slots[rows, data.line_slots[:, :, 0]]
    theta_ex = theta_slots[rows, data.line_slots[:, :, 1]]
    return np.stack([theta_or, theta_ex], axis=2)


def predict_phasors(params, model_kind, sample, grid, pimp_layers=50, damping=1.0):
    """Single-sample prediction: compact per-bus theta (bus-level kinds) and (L, 2) line angles"""
    bg = apply_topology(grid, sample.tau)
    data = prepare_dataset(grid, Dataset("predict", [sample]))
    prediction = predict_batch(params, model_kind, data, pimp_layers, damping)
    theta_bus = None if prediction.theta_bus is None else bg.from_slots(prediction.theta_bus[0])
    return theta_bus, prediction.theta_line[0]
