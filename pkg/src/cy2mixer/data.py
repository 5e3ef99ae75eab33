"""Signal ingestion, calendar features, windowing and synthetic datasets."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Literal

import numpy as np

from . import formats
from .errors import BadInterval, InvalidSpec, ParseError, ShapeInconsistent, SplitTooSmall
from .topology import Graph, build_graph, cycle_basis_paton

log = logging.getLogger(__name__)

STD_FLOOR = 1e-6
SECONDS_PER_DAY = 86400


@dataclass
class SignalTensor:
    data: np.ndarray  # T_total x N x C
    start_timestamp: int = 0
    interval_seconds: int = 300

    def __post_init__(self) -> None:
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.data.ndim != 3:
            raise ShapeInconsistent(f"signals must be T x N x C, got {self.data.shape}")
        if self.interval_seconds <= 0 or SECONDS_PER_DAY % self.interval_seconds:
            raise BadInterval(f"interval {self.interval_seconds}s does not divide a day")
        if not np.all(np.isfinite(self.data)):
            raise ParseError("signals contain NaN or Inf")

    @property
    def steps_per_day(self) -> int:
        return SECONDS_PER_DAY // self.interval_seconds

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.data.shape


def _locf(data: np.ndarray) -> np.ndarray:
    """Fill NaNs with the last observation per (node, feature); leading gaps become 0."""
    out = data.copy()
    last = np.zeros(out.shape[1:])
    for t in range(out.shape[0]):
        row = out[t]
        missing = np.isnan(row)
        row[missing] = last[missing]
        last = row
    return out


def _load_csv(path) -> SignalTensor:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if not header or [h.strip() for h in header[:2]] != ["timestamp", "node"] or len(header) < 3:
            raise ParseError(f"{path}: expected header 'timestamp,node,feature_0[,...]'")
        n_feat = len(header) - 2
        blocks: dict[int, dict[int, list[float]]] = {}
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != n_feat + 2:
                raise ShapeInconsistent(f"{path}:{lineno}: expected {n_feat + 2} fields")
            try:
                ts, node = int(row[0]), int(row[1])
                vals = [float(v) if v.strip() else math.nan for v in row[2:]]
            except ValueError:
                raise ParseError(f"{path}:{lineno}: cannot parse {row!r}") from None
            blocks.setdefault(ts, {})[node] = vals
    if not blocks:
        raise ParseError(f"{path}: no data rows")
    stamps = sorted(blocks)
    n = len(blocks[stamps[0]])
    for ts in stamps:
        if sorted(blocks[ts]) != list(range(n)):
            raise ShapeInconsistent(f"{path}: timestamp {ts} does not cover nodes 0..{n - 1}")
    if len(stamps) > 1:
        gaps = np.diff(stamps)
        if np.any(gaps != gaps[0]):
            raise BadInterval(f"{path}: timestamps are not evenly spaced")
        interval = int(gaps[0])
    else:
        interval = 300
    data = np.array([[blocks[ts][v] for v in range(n)] for ts in stamps], dtype=np.float64)
    return SignalTensor(_locf(data), stamps[0], interval)


def load_signals(path, format: Literal["csv", "cy2s-binary"] | None = None) -> SignalTensor:
    """Read a CSV or CY2S signal file; the format defaults to the file suffix."""
    path = Path(path)
    if format is None:
        format = "csv" if path.suffix.lower() == ".csv" else "cy2s-binary"
    if format == "csv":
        return _load_csv(path)
    if format == "cy2s-binary":
        data, start, interval = formats.read_signal_array(path)
        return SignalTensor(data, start, interval)
    raise ValueError(f"unknown signal format {format!r}")


def save_signals(signals: SignalTensor, path, format: Literal["csv", "cy2s-binary"] | None = None) -> None:
    path = Path(path)
    if format is None:
        format = "csv" if path.suffix.lower() == ".csv" else "cy2s-binary"
    if format == "cy2s-binary":
        formats.write_signal_array(path, signals.data, signals.start_timestamp, signals.interval_seconds)
        return
    t_total, n, c = signals.shape
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["timestamp", "node"] + [f"feature_{i}" for i in range(c)])
        for t in range(t_total):
            ts = signals.start_timestamp + t * signals.interval_seconds
            for v in range(n):
                writer.writerow([ts, v] + [repr(float(x)) for x in signals.data[t, v]])


def calendar_features(signals: SignalTensor) -> tuple[np.ndarray, np.ndarray]:
    """Time-of-day slot and day-of-week (Monday = 0) per timestep, in UTC."""
    t = np.arange(signals.shape[0], dtype=np.int64)
    secs = signals.start_timestamp + t * signals.interval_seconds
    tod = (secs % SECONDS_PER_DAY) // signals.interval_seconds
    # 1970-01-01 was a Thursday
    dow = (secs // SECONDS_PER_DAY + 3) % 7
    return tod.astype(np.int64), dow.astype(np.int64)


@dataclass
class Normalizer:
    mean: np.ndarray  # per feature
    std: np.ndarray

    @classmethod
    def fit(cls, data: np.ndarray) -> "Normalizer":
        flat = data.reshape(-1, data.shape[-1])
        return cls(flat.mean(axis=0), np.maximum(flat.std(axis=0), STD_FLOOR))

    def normalize(self, x: np.ndarray) -> np.ndarray:
        return (x - self.mean) / self.std

    def denormalize(self, x: np.ndarray, features: int | None = None) -> np.ndarray:
        k = x.shape[-1] if features is None else features
        return x * self.std[:k] + self.mean[:k]


@dataclass
class WindowedDataset:
    """Sliding windows over one chronological split.

    ``inputs`` are z-scored with training statistics; ``targets`` stay in
    original units. ``starts`` holds the absolute timestep of each window's
    first input row.
    """

    inputs: np.ndarray  # W x T x N x C
    targets: np.ndarray  # W x T' x N x d_o
    tod_idx: np.ndarray  # W x T
    dow_idx: np.ndarray  # W x T
    starts: np.ndarray
    normalization: Normalizer
    steps_per_day: int = 288
    name: str = ""

    def __len__(self) -> int:
        return len(self.inputs)

    def batches(self, batch_size: int, rng: np.random.Generator | None = None):
        order = np.arange(len(self)) if rng is None else rng.permutation(len(self))
        for i in range(0, len(order), batch_size):
            sel = order[i : i + batch_size]
            yield self.inputs[sel], self.tod_idx[sel], self.dow_idx[sel], self.targets[sel]


def split_bounds(total: int, ratios) -> list[tuple[int, int]]:
    ratios = np.asarray(ratios, dtype=float)
    if len(ratios) != 3 or np.any(ratios < 0) or not math.isclose(ratios.sum(), 1.0, abs_tol=1e-9):
        raise SplitTooSmall(f"split ratios must be three non-negative values summing to 1, got {ratios}")
    cuts = np.round(np.cumsum(ratios) * total).astype(int)
    cuts[-1] = total
    lo = [0, int(cuts[0]), int(cuts[1])]
    return [(lo[i], int(cuts[i])) for i in range(3)]


def make_windows(
    signals: SignalTensor,
    T: int,
    T_prime: int,
    split_ratios=(0.6, 0.2, 0.2),
    d_o: int = 1,
) -> tuple[WindowedDataset, WindowedDataset, WindowedDataset]:
    """Chronological train/val/test split, then windowing inside each split."""
    data = signals.data
    bounds = split_bounds(data.shape[0], split_ratios)
    (tr_lo, tr_hi) = bounds[0]
    if tr_hi - tr_lo < T + T_prime:
        raise SplitTooSmall(f"training split has {tr_hi - tr_lo} rows, need at least {T + T_prime}")
    norm = Normalizer.fit(data[tr_lo:tr_hi])
    scaled = norm.normalize(data)
    tod, dow = calendar_features(signals)
    out = []
    for name, (lo, hi) in zip(("train", "val", "test"), bounds):
        count = max(hi - lo - T - T_prime + 1, 0)
        if count == 0 and name != "train":
            log.warning("%s split has %d rows, too few for T=%d, T'=%d; it is empty", name, hi - lo, T, T_prime)
        starts = lo + np.arange(count)
        win = starts[:, None] + np.arange(T)
        tgt = starts[:, None] + T + np.arange(T_prime)
        n, c = data.shape[1:]
        out.append(
            WindowedDataset(
                inputs=scaled[win] if count else np.zeros((0, T, n, c)),
                targets=data[tgt][..., :d_o] if count else np.zeros((0, T_prime, n, d_o)),
                tod_idx=tod[win] if count else np.zeros((0, T), dtype=np.int64),
                dow_idx=dow[win] if count else np.zeros((0, T), dtype=np.int64),
                starts=starts,
                normalization=norm,
                steps_per_day=signals.steps_per_day,
                name=name,
            )
        )
    return out[0], out[1], out[2]


# --- synthetic data -----------------------------------------------------------


@dataclass
class SynthSpec:
    """Parameters of a synthetic dataset.

    ``topology`` is one of ``ring`` (one cycle over ``num_nodes``), ``rings``
    (``num_rings`` cycles of ``ring_size`` nodes chained by single bridge
    edges, plus ``num_tail_nodes`` acyclic pendant nodes), or ``grid``
    (``grid_rows`` x ``grid_cols`` lattice).
    """

    topology: str = "ring"
    num_nodes: int = 6
    num_rings: int = 3
    ring_size: int = 8
    num_tail_nodes: int = 0
    grid_rows: int = 3
    grid_cols: int = 3
    T_total: int = 2000
    interval_seconds: int = 300
    start_timestamp: int = 1514764800  # 2018-01-01 00:00 UTC, a Monday
    noise: float = 0.0
    latent_strength: float = 1.0
    latent_ar: float = 0.9
    amplitude: float = 1.0
    offset: float = 0.0
    phase_spread: float = 0.0
    seed: int = 0

    @classmethod
    def from_dict(cls, d: dict) -> "SynthSpec":
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise InvalidSpec(f"unknown synth keys: {sorted(unknown)}")
        return cls(**d)


def _synth_graph(spec: SynthSpec) -> Graph:
    if spec.topology == "ring":
        n = spec.num_nodes
        if n < 3:
            raise InvalidSpec("a ring needs at least 3 nodes")
        return build_graph(n, [(i, (i + 1) % n, 1.0) for i in range(n)])
    if spec.topology == "rings":
        if spec.ring_size < 3 or spec.num_rings < 1:
            raise InvalidSpec("rings need num_rings >= 1 and ring_size >= 3")
        m = spec.ring_size
        edges = []
        for r in range(spec.num_rings):
            base = r * m
            edges += [(base + i, base + (i + 1) % m, 1.0) for i in range(m)]
            if r:
                edges.append((base - m + m // 2, base, 1.0))
        n = spec.num_rings * m
        for i in range(spec.num_tail_nodes):
            edges.append((n + i, n + i - 1 if i else 0, 1.0))
        return build_graph(n + spec.num_tail_nodes, edges)
    if spec.topology == "grid":
        r, c = spec.grid_rows, spec.grid_cols
        if r < 1 or c < 1 or r * c < 2:
            raise InvalidSpec("grid needs at least two nodes")
        edges = []
        for i in range(r):
            for j in range(c):
                v = i * c + j
                if j + 1 < c:
                    edges.append((v, v + 1, 1.0))
                if i + 1 < r:
                    edges.append((v, v + c, 1.0))
        return build_graph(r * c, edges)
    raise InvalidSpec(f"unknown topology {spec.topology!r}")


def synthesize_dataset(spec: SynthSpec | dict) -> tuple[Graph, SignalTensor]:
    """Graph with a known cycle basis plus cycle-coupled signals.

    Each node's series is a daily sinusoid, plus one AR(1) latent factor per
    basis cycle shared by all nodes on that cycle, plus Gaussian noise.
    Deterministic for a given seed.
    """
    if isinstance(spec, dict):
        spec = SynthSpec.from_dict(spec)
    if spec.T_total < 1 or spec.noise < 0 or not 0 <= spec.latent_ar < 1:
        raise InvalidSpec("T_total >= 1, noise >= 0 and 0 <= latent_ar < 1 required")
    if spec.interval_seconds <= 0 or SECONDS_PER_DAY % spec.interval_seconds:
        raise InvalidSpec(f"interval {spec.interval_seconds}s does not divide a day")
    rng = np.random.default_rng(spec.seed)
    g = _synth_graph(spec)
    basis = cycle_basis_paton(g)
    n, t_total = g.num_nodes, spec.T_total

    secs = spec.start_timestamp + np.arange(t_total) * spec.interval_seconds
    angle = 2 * np.pi * (secs % SECONDS_PER_DAY) / SECONDS_PER_DAY
    phase = rng.uniform(-spec.phase_spread, spec.phase_spread, size=n) if spec.phase_spread else np.zeros(n)
    x = spec.offset + spec.amplitude * np.sin(angle[:, None] + phase[None, :])

    innov = math.sqrt(1.0 - spec.latent_ar**2)
    for cyc in basis.cycles:
        z = np.empty(t_total)
        eps = rng.standard_normal(t_total)
        z[0] = eps[0]
        for t in range(1, t_total):
            z[t] = spec.latent_ar * z[t - 1] + innov * eps[t]
        x[:, list(cyc)] += spec.latent_strength * z[:, None]
    if spec.noise:
        x = x + spec.noise * rng.standard_normal(x.shape)
    return g, SignalTensor(x[:, :, None], spec.start_timestamp, spec.interval_seconds)
