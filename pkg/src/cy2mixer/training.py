"""Configuration, optimization loop, evaluation, ablations and run directories."""

from __future__ import annotations

import dataclasses
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml

from . import autodiff as ad
from .data import SignalTensor, WindowedDataset, load_signals, make_windows
from .encodings import dtw_matrix, default_top_k, lap_pe, laplacian_spectrum, rwse, ZERO_EIG_TOL
from .errors import ConfigError, ConfigMismatch, DataError, NonFiniteLoss
from .metrics import MetricsReport, compute_metrics
from .model import ModelConfig, ModelParams, forward, init_params, load_params, save_params
from .topology import (
    AdjacencyMatrix,
    Graph,
    clique_adjacency,
    cycle_basis_paton,
    dense_adjacency,
    read_edge_csv,
)

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    """Everything a run needs; defaults follow the PEMS04 hyperparameters."""

    model: ModelConfig = field(default_factory=ModelConfig)
    learning_rate: float = 1e-3
    weight_decay: float = 5e-4
    lr_decay_factor: float = 0.1
    lr_decay_milestones: tuple[int, ...] = (25, 45)
    batch_size: int = 16
    max_epochs: int = 60
    max_steps: int | None = None
    early_stop_patience: int = 10
    seed: int = 0
    loss: str = "mae"  # or "huber"
    huber_delta: float = 1.0
    mape_epsilon: float = 1.0
    grad_clip: float = 5.0  # global-norm clip; 0 disables
    split_ratios: tuple[float, float, float] = (0.6, 0.2, 0.2)
    adjacency: str = "binary"  # or "gaussian"
    gaussian_sigma: float | None = None
    gaussian_threshold: float = 0.1
    precision: str = "float32"
    encoding_dim: int = 8  # K for the RWSE / LapPE ablation variants
    dtw_stride: int = 1
    ablation_seeds: tuple[int, ...] = (0,)

    @property
    def dtype(self):
        return np.dtype(self.precision)

    # flat key/value form used by config files
    def to_flat(self) -> dict:
        flat = {f.name: getattr(self.model, f.name) for f in dataclasses.fields(ModelConfig)}
        for f in dataclasses.fields(self):
            if f.name != "model":
                val = getattr(self, f.name)
                flat[f.name] = list(val) if isinstance(val, tuple) else val
        return flat

    @classmethod
    def from_flat(cls, flat: dict) -> "TrainConfig":
        model_keys = {f.name: f for f in dataclasses.fields(ModelConfig)}
        own_keys = {f.name: f for f in dataclasses.fields(cls) if f.name != "model"}
        unknown = set(flat) - set(model_keys) - set(own_keys)
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        model_kw, own_kw = {}, {}
        defaults_m, defaults_o = ModelConfig(), cls()
        for k, v in flat.items():
            if k in model_keys:
                model_kw[k] = _coerce(k, v, getattr(defaults_m, k))
            else:
                own_kw[k] = _coerce(k, v, getattr(defaults_o, k))
        cfg = cls(model=ModelConfig(**model_kw), **own_kw)
        cfg.validate()
        return cfg

    def validate(self) -> None:
        m = self.model
        if m.num_layers < 1 or m.T < 1 or m.T_prime < 1 or m.C < 1 or m.d_o < 1:
            raise ConfigError("num_layers, T, T_prime, C and d_o must be positive")
        if m.d_o > m.C:
            raise ConfigError("d_o cannot exceed the number of input features C")
        if not 0 <= m.dropout < 1:
            raise ConfigError("dropout must be in [0, 1)")
        if self.loss not in ("mae", "huber"):
            raise ConfigError(f"loss must be 'mae' or 'huber', got {self.loss!r}")
        if self.adjacency not in ("binary", "gaussian"):
            raise ConfigError(f"adjacency must be 'binary' or 'gaussian', got {self.adjacency!r}")
        if self.batch_size < 1 or self.max_epochs < 1:
            raise ConfigError("batch_size and max_epochs must be positive")
        if self.precision not in ("float32", "float64"):
            raise ConfigError("precision must be float32 or float64")


def _coerce(key, value, default):
    try:
        if isinstance(default, bool):
            if not isinstance(value, bool):
                raise TypeError
            return value
        if isinstance(default, tuple):
            return tuple(type(default[0])(v) if default else v for v in value)
        if isinstance(default, int) and not isinstance(value, bool):
            if isinstance(value, float) and not value.is_integer():
                raise TypeError
            return int(value)
        if isinstance(default, float):
            return float(value)
        if isinstance(default, str):
            return str(value)
        if default is None:
            return value
    except (TypeError, ValueError):
        pass
    else:
        return value
    raise ConfigError(f"config key {key!r}: cannot use {value!r}")


def load_config(path) -> TrainConfig:
    """Read a flat YAML mapping of TrainConfig keys."""
    try:
        flat = yaml.safe_load(Path(path).read_text()) or {}
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: {exc}") from None
    if not isinstance(flat, dict):
        raise ConfigError(f"{path}: expected a flat key/value mapping")
    nested = [k for k, v in flat.items() if isinstance(v, dict)]
    if nested:
        raise ConfigError(f"{path}: nested sections are not allowed ({nested})")
    return TrainConfig.from_flat(flat)


def save_config(cfg: TrainConfig, path) -> None:
    Path(path).write_text(yaml.safe_dump(cfg.to_flat(), sort_keys=True))


# --- data wiring ---------------------------------------------------------------


@dataclass
class GraphArtifacts:
    """Matrices fed to the model: ``A`` for the spatial block, ``A_C`` for the cycle block."""

    A: AdjacencyMatrix
    A_C: AdjacencyMatrix | None
    node_encoding: np.ndarray | None = None


@dataclass
class Experiment:
    graph: Graph
    signals: SignalTensor
    train: WindowedDataset
    val: WindowedDataset
    test: WindowedDataset
    artifacts: GraphArtifacts

    def split(self, name: str) -> WindowedDataset:
        try:
            return {"train": self.train, "val": self.val, "test": self.test}[name]
        except KeyError:
            raise ConfigError(f"unknown split {name!r}") from None


def standard_adjacency(g: Graph, cfg: TrainConfig) -> AdjacencyMatrix:
    if cfg.adjacency == "gaussian":
        sigma = cfg.gaussian_sigma
        if sigma is None:
            sigma = float(np.std(g.weights)) if g.edges else 1.0
        return dense_adjacency(g, "gaussian", sigma, cfg.gaussian_threshold)
    return dense_adjacency(g, "binary")


def prepare_experiment(g: Graph, signals: SignalTensor, cfg: TrainConfig) -> Experiment:
    m = cfg.model
    if signals.shape[1] != g.num_nodes:
        raise DataError(f"signals have {signals.shape[1]} nodes, graph has {g.num_nodes}")
    if signals.shape[2] != m.C:
        raise ConfigMismatch(f"config C={m.C} but signals have {signals.shape[2]} features")
    if signals.steps_per_day != m.steps_per_day:
        raise ConfigMismatch(f"config steps_per_day={m.steps_per_day}, signals give {signals.steps_per_day}")
    train, val, test = make_windows(signals, m.T, m.T_prime, cfg.split_ratios, m.d_o)
    arts = GraphArtifacts(standard_adjacency(g, cfg), clique_adjacency(g, cycle_basis_paton(g)))
    return Experiment(g, signals, train, val, test, arts)


def find_signals(data_dir: Path) -> Path:
    for name in ("signals.cy2s", "signals.csv"):
        if (data_dir / name).exists():
            return data_dir / name
    raise DataError(f"{data_dir}: no signals.cy2s or signals.csv")


def load_experiment(data_dir, cfg: TrainConfig) -> Experiment:
    data_dir = Path(data_dir)
    signals = load_signals(find_signals(data_dir))
    g = read_edge_csv(data_dir / "edges.csv", num_nodes=signals.shape[1])
    return prepare_experiment(g, signals, cfg)


# --- optimization -------------------------------------------------------------


class AdamW:
    """Adam with decoupled weight decay."""

    def __init__(self, params, lr=1e-3, weight_decay=0.0, betas=(0.9, 0.999), eps=1e-8):
        self.params = list(params)
        self.lr = lr
        self.weight_decay = weight_decay
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self) -> None:
        self.t += 1
        c1 = 1.0 - self.b1**self.t
        c2 = 1.0 - self.b2**self.t
        for p, m, v in zip(self.params, self.m, self.v):
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            update = (m / c1) / (np.sqrt(v / c2) + self.eps)
            if self.weight_decay:
                update = update + self.weight_decay * p.data
            p.data = (p.data - self.lr * update).astype(p.data.dtype)


def clip_grad_norm(params, max_norm: float) -> float:
    grads = [p.grad for p in params if p.grad is not None]
    total = math.sqrt(sum(float(np.sum(g.astype(np.float64) ** 2)) for g in grads))
    if max_norm > 0 and total > max_norm:
        s = max_norm / (total + 1e-12)
        for p in params:
            if p.grad is not None:
                p.grad = p.grad * s
    return total


def lr_at_epoch(cfg: TrainConfig, epoch: int) -> float:
    passed = sum(1 for m in cfg.lr_decay_milestones if epoch >= m)
    return cfg.learning_rate * cfg.lr_decay_factor**passed


@dataclass
class EpochRecord:
    epoch: int
    steps: int
    lr: float
    train_loss: float
    val_mae: float
    val_rmse: float
    val_mape: float


@dataclass
class TrainLog:
    epochs: list[EpochRecord] = field(default_factory=list)
    best_epoch: int = -1
    best_val_mae: float = math.inf
    stopped_early: bool = False

    def as_dict(self) -> dict:
        return dataclasses.asdict(self)


def _loss(pred: ad.Tensor, target: np.ndarray, cfg: TrainConfig) -> ad.Tensor:
    if cfg.loss == "huber":
        return ad.huber_loss(pred, target, cfg.huber_delta)
    return ad.mae_loss(pred, target)


def _denorm(pred: ad.Tensor, ds: WindowedDataset, d_o: int) -> ad.Tensor:
    norm = ds.normalization
    return ad.affine(pred, norm.std[:d_o], norm.mean[:d_o])


def train_step(params: ModelParams, opt: AdamW, batch, arts: GraphArtifacts, ds: WindowedDataset, cfg: TrainConfig, rng) -> float:
    x, tod, dow, y = batch
    params.zero_grad()
    with ad.Tape() as tape:
        pred = forward(x, tod, dow, arts.A, arts.A_C, params, training=True, rng=rng, node_encoding=arts.node_encoding)
        loss = _loss(_denorm(pred, ds, cfg.model.d_o), y, cfg)
        value = loss.item()
        if not math.isfinite(value):
            raise NonFiniteLoss(f"loss became {value} at optimizer step {opt.t + 1}")
        tape.backward(loss)
    clip_grad_norm(params.parameters(), cfg.grad_clip)
    opt.step()
    return value


def predict(params: ModelParams, ds: WindowedDataset, arts: GraphArtifacts, batch_size: int = 64) -> np.ndarray:
    """Denormalized predictions for every window of ``ds`` (eval mode)."""
    cfg = params.config
    outs = []
    for x, tod, dow, _ in ds.batches(batch_size):
        pred = forward(x, tod, dow, arts.A, arts.A_C, params, node_encoding=arts.node_encoding)
        outs.append(ds.normalization.denormalize(pred.data.astype(np.float64), cfg.d_o))
    if not outs:
        return np.zeros((0,) + ds.targets.shape[1:])
    return np.concatenate(outs)


def evaluate(params: ModelParams, ds: WindowedDataset, arts: GraphArtifacts, mape_epsilon: float = 1.0) -> MetricsReport:
    if ds.targets.shape[1:] != (params.config.T_prime, params.num_nodes, params.config.d_o):
        raise ConfigMismatch(f"split targets {ds.targets.shape[1:]} do not match the model")
    return compute_metrics(predict(params, ds, arts), ds.targets, mape_epsilon)


def train(cfg: TrainConfig, exp: Experiment, params: ModelParams | None = None, progress=None) -> tuple[ModelParams, TrainLog]:
    """Train with AdamW, step lr decay and early stopping on validation MAE.

    Returns the parameters of the best validation epoch (training loss is
    used for selection when the validation split is empty).
    """
    cfg.validate()
    m = cfg.model
    if exp.train.inputs.shape[2:] != (exp.graph.num_nodes, m.C) or exp.train.inputs.shape[1] != m.T:
        raise ConfigMismatch("training windows do not match the model config")
    if len(exp.train) == 0:
        raise DataError("training split has no windows")
    if params is None:
        params = init_params(m, exp.graph.num_nodes, cfg.seed, cfg.dtype)
    rng = np.random.default_rng(cfg.seed + 1)
    opt = AdamW(params.parameters(), cfg.learning_rate, cfg.weight_decay)
    tlog = TrainLog()
    best_state = params.state_dict()
    since_best = 0

    for epoch in range(cfg.max_epochs):
        opt.lr = lr_at_epoch(cfg, epoch)
        losses = []
        for batch in exp.train.batches(cfg.batch_size, rng):
            losses.append(train_step(params, opt, batch, exp.artifacts, exp.train, cfg, rng))
            if cfg.max_steps is not None and opt.t >= cfg.max_steps:
                break
        train_loss = float(np.mean(losses))
        if len(exp.val):
            rep = evaluate(params, exp.val, exp.artifacts, cfg.mape_epsilon)
        else:
            rep = MetricsReport(train_loss, float("nan"), float("nan"))
        tlog.epochs.append(EpochRecord(epoch, opt.t, opt.lr, train_loss, rep.mae, rep.rmse, rep.mape))
        if progress:
            progress(tlog.epochs[-1])
        if rep.mae < tlog.best_val_mae:
            tlog.best_val_mae, tlog.best_epoch = rep.mae, epoch
            best_state = params.state_dict()
            since_best = 0
        else:
            since_best += 1
        if cfg.max_steps is not None and opt.t >= cfg.max_steps:
            break
        if since_best >= cfg.early_stop_patience:
            tlog.stopped_early = True
            break
    params.load_state_dict(best_state)
    return params, tlog


# --- ablations -------------------------------------------------------------------

VARIANTS = ("Cy2Mixer", "w/o cycle block", "cycle block with A", "w/ DTW", "w/ RWSE", "w/ LapPE")


@dataclass
class Variant:
    name: str
    config: TrainConfig
    artifacts: GraphArtifacts


def ablation_variants(cfg: TrainConfig, exp: Experiment) -> list[Variant]:
    """The six model variants compared in the cycle-block ablation."""
    g, arts = exp.graph, exp.artifacts

    def with_model(**changes) -> TrainConfig:
        return dataclasses.replace(cfg, model=dataclasses.replace(cfg.model, **changes))

    k = cfg.encoding_dim
    nonzero = int(np.sum(laplacian_spectrum(g)[0] > ZERO_EIG_TOL))
    k_lap = max(1, min(k, nonzero, g.num_nodes - 1))
    top_k = min(default_top_k(g), g.num_nodes - 1)
    dtw = dtw_matrix(exp.signals, 0, top_k, cfg.dtw_stride, cfg.split_ratios)
    return [
        Variant(VARIANTS[0], with_model(use_cycle_block=True, cycle_source="clique", pe_dim=0), arts),
        Variant(VARIANTS[1], with_model(use_cycle_block=False, pe_dim=0), GraphArtifacts(arts.A, None)),
        Variant(VARIANTS[2], with_model(use_cycle_block=True, cycle_source="standard", pe_dim=0), GraphArtifacts(arts.A, arts.A)),
        Variant(VARIANTS[3], with_model(use_cycle_block=True, cycle_source="dtw", pe_dim=0), GraphArtifacts(arts.A, dtw)),
        Variant(VARIANTS[4], with_model(use_cycle_block=False, pe_dim=k), GraphArtifacts(arts.A, None, rwse(g, k))),
        Variant(VARIANTS[5], with_model(use_cycle_block=False, pe_dim=k_lap), GraphArtifacts(arts.A, None, lap_pe(g, k_lap))),
    ]


@dataclass
class AblationRow:
    variant: str
    mae: float
    rmse: float
    mape: float
    per_seed_mae: list[float]


def run_variant(variant: Variant, exp: Experiment, seeds) -> AblationRow:
    reports = []
    for seed in seeds:
        cfg = dataclasses.replace(variant.config, seed=seed)
        sub = dataclasses.replace(exp, artifacts=variant.artifacts)
        params, _ = train(cfg, sub)
        reports.append(evaluate(params, exp.test, variant.artifacts, cfg.mape_epsilon))
    return AblationRow(
        variant.name,
        float(np.mean([r.mae for r in reports])),
        float(np.mean([r.rmse for r in reports])),
        float(np.nanmean([r.mape for r in reports])) if any(math.isfinite(r.mape) for r in reports) else float("nan"),
        [r.mae for r in reports],
    )


def ablate(cfg: TrainConfig, exp: Experiment, seeds=None, names=None) -> list[AblationRow]:
    """Train and test every variant over the same seeds; one row per variant."""
    seeds = tuple(seeds if seeds is not None else cfg.ablation_seeds)
    rows = []
    for variant in ablation_variants(cfg, exp):
        if names is None or variant.name in names:
            rows.append(run_variant(variant, exp, seeds))
    return rows


# --- run directories -------------------------------------------------------------


def save_run(run_dir, cfg: TrainConfig, params: ModelParams, tlog: TrainLog, data_dir) -> None:
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    save_params(params, run_dir / "params")
    save_config(cfg, run_dir / "config.yaml")
    meta = {"data_dir": str(Path(data_dir).resolve()), "num_nodes": params.num_nodes, "log": tlog.as_dict()}
    (run_dir / "run.json").write_text(json.dumps(meta, indent=2, default=float))


def load_run(run_dir) -> tuple[TrainConfig, ModelParams, dict]:
    run_dir = Path(run_dir)
    cfg = load_config(run_dir / "config.yaml")
    meta = json.loads((run_dir / "run.json").read_text())
    params = load_params(run_dir / "params", cfg.model, meta["num_nodes"], cfg.dtype)
    return cfg, params, meta
