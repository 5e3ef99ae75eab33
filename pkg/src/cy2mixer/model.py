"""The Cy2Mixer network: embedding, gated encoder layers and output head.

All functions accept a window batch shaped ``(B, T, N, C)``; :func:`forward`
also takes a single ``(T, N, C)`` window. Each encoder layer runs three
gated blocks on the same input: a temporal block (3x3 convolution gate), a
spatial block (message passing over the road adjacency ``A``) and a cycle
block (message passing over the clique adjacency ``A_C``).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, fields, is_dataclass
from pathlib import Path
from typing import Iterator

import numpy as np

from . import autodiff as ad
from . import formats
from .autodiff import Tensor
from .errors import AdjacencyKindMismatch, CalendarIndexOutOfRange, ConfigMismatch, ShapeMismatch
from .topology import AdjacencyMatrix


@dataclass
class ModelConfig:
    num_layers: int = 3
    d_f: int = 24
    d_t: int = 24
    d_a: int = 80
    d_tiny: int = 64
    tiny_attention: bool = True
    dropout: float = 0.4
    T: int = 12
    T_prime: int = 12
    C: int = 1
    d_o: int = 1
    steps_per_day: int = 288
    # ablation switches
    use_cycle_block: bool = True
    cycle_source: str = "clique"  # adjacency kind the cycle block expects
    pe_dim: int = 0  # width of a fixed node encoding appended to the embedding

    @property
    def d_h(self) -> int:
        return self.d_f + 2 * self.d_t + self.d_a + self.pe_dim

    @property
    def num_blocks(self) -> int:
        return 3 if self.use_cycle_block else 2


# --- parameters -------------------------------------------------------------------


@dataclass
class EmbeddingParams:
    feat_w: Tensor
    feat_b: Tensor
    tod_table: Tensor
    dow_table: Tensor
    adaptive: Tensor


@dataclass
class AttentionParams:
    q_w: Tensor
    k_w: Tensor
    v_w: Tensor
    o_w: Tensor


@dataclass
class BlockParams:
    norm_g: Tensor
    norm_b: Tensor
    u_w: Tensor
    u_b: Tensor
    gate_w: Tensor  # (3, 3, d_h, d_h) for temporal, (d_h, d_h) otherwise
    gate_b: Tensor
    v_w: Tensor
    v_b: Tensor
    attn: AttentionParams | None = None


@dataclass
class EncoderLayerParams:
    temporal: BlockParams
    spatial: BlockParams
    cycle: BlockParams | None
    fusion_w: Tensor
    fusion_b: Tensor


@dataclass
class HeadParams:
    w: Tensor
    b: Tensor


@dataclass
class ModelParams:
    embedding: EmbeddingParams
    layers: list[EncoderLayerParams]
    head: HeadParams
    config: ModelConfig = field(repr=False, compare=False, default=None)
    num_nodes: int = 0

    def named_parameters(self) -> Iterator[tuple[str, Tensor]]:
        yield from _walk(self.embedding, "embedding")
        for i, layer in enumerate(self.layers):
            yield from _walk(layer, f"layers.{i}")
        yield from _walk(self.head, "head")

    def parameters(self) -> list[Tensor]:
        return [t for _, t in self.named_parameters()]

    def zero_grad(self) -> None:
        for t in self.parameters():
            t.grad = None

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: t.data.copy() for k, t in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = dict(self.named_parameters())
        if set(own) != set(state):
            missing, extra = set(own) - set(state), set(state) - set(own)
            raise ConfigMismatch(f"parameter names differ: missing {sorted(missing)}, unexpected {sorted(extra)}")
        for k, t in own.items():
            if tuple(state[k].shape) != t.shape:
                raise ConfigMismatch(f"{k}: checkpoint shape {state[k].shape}, config expects {t.shape}")
            t.data = np.asarray(state[k], dtype=t.data.dtype).copy()


def _walk(obj, prefix: str) -> Iterator[tuple[str, Tensor]]:
    for f in fields(obj):
        val = getattr(obj, f.name)
        if isinstance(val, Tensor):
            yield f"{prefix}.{f.name}", val
        elif is_dataclass(val):
            yield from _walk(val, f"{prefix}.{f.name}")


def _glorot(rng, shape, dtype, fan_in=None, fan_out=None) -> Tensor:
    fan_in = fan_in or shape[-2]
    fan_out = fan_out or shape[-1]
    lim = math.sqrt(6.0 / (fan_in + fan_out))
    return Tensor(rng.uniform(-lim, lim, size=shape).astype(dtype), requires_grad=True)


def _const(value, shape, dtype) -> Tensor:
    return Tensor(np.full(shape, value, dtype=dtype), requires_grad=True)


def _init_block(cfg: ModelConfig, kind: str, rng, dtype) -> BlockParams:
    d = cfg.d_h
    gate_shape = (3, 3, d, d) if kind == "temporal" else (d, d)
    attn = None
    if cfg.tiny_attention:
        attn = AttentionParams(
            q_w=_glorot(rng, (d, cfg.d_tiny), dtype),
            k_w=_glorot(rng, (d, cfg.d_tiny), dtype),
            v_w=_glorot(rng, (d, cfg.d_tiny), dtype),
            o_w=_glorot(rng, (cfg.d_tiny, d), dtype),
        )
    return BlockParams(
        norm_g=_const(1.0, (d,), dtype),
        norm_b=_const(0.0, (d,), dtype),
        u_w=_glorot(rng, (d, 2 * d), dtype),
        u_b=_const(0.0, (2 * d,), dtype),
        gate_w=_const(0.0, gate_shape, dtype),
        gate_b=_const(1.0, (d,), dtype),
        v_w=_glorot(rng, (d, d), dtype),
        v_b=_const(0.0, (d,), dtype),
        attn=attn,
    )


def init_params(cfg: ModelConfig, num_nodes: int, seed: int | np.random.Generator = 0, dtype=np.float32) -> ModelParams:
    """Glorot-uniform projections; gate weights zero and gate biases one."""
    rng = np.random.default_rng(seed)
    d = cfg.d_h
    emb = EmbeddingParams(
        feat_w=_glorot(rng, (cfg.C, cfg.d_f), dtype),
        feat_b=_const(0.0, (cfg.d_f,), dtype),
        tod_table=_glorot(rng, (cfg.steps_per_day, cfg.d_t), dtype),
        dow_table=_glorot(rng, (7, cfg.d_t), dtype),
        adaptive=_glorot(rng, (cfg.T, num_nodes, cfg.d_a), dtype),
    )
    layers = []
    for _ in range(cfg.num_layers):
        layers.append(
            EncoderLayerParams(
                temporal=_init_block(cfg, "temporal", rng, dtype),
                spatial=_init_block(cfg, "spatial", rng, dtype),
                cycle=_init_block(cfg, "cycle", rng, dtype) if cfg.use_cycle_block else None,
                fusion_w=_glorot(rng, (cfg.num_blocks * d, d), dtype),
                fusion_b=_const(0.0, (d,), dtype),
            )
        )
    head = HeadParams(
        w=_glorot(rng, (cfg.T * d, cfg.T_prime * cfg.d_o), dtype),
        b=_const(0.0, (cfg.T_prime * cfg.d_o,), dtype),
    )
    return ModelParams(emb, layers, head, cfg, num_nodes)


# --- operations -------------------------------------------------------------------


def embed(window: Tensor, tod_idx, dow_idx, params: EmbeddingParams, steps_per_day: int, node_encoding=None) -> Tensor:
    """Concatenate feature, calendar and adaptive embeddings: ``(B, T, N, d_h)``.

    ``node_encoding`` is an optional fixed ``(N, K)`` matrix (RWSE/LapPE)
    appended after the adaptive embedding.
    """
    window = ad.as_tensor(window)
    b, t, n, _ = window.shape
    tod_idx = np.asarray(tod_idx, dtype=np.int64).reshape(b, t)
    dow_idx = np.asarray(dow_idx, dtype=np.int64).reshape(b, t)
    if tod_idx.size and (tod_idx.min() < 0 or tod_idx.max() >= steps_per_day):
        raise CalendarIndexOutOfRange(f"time-of-day index outside [0, {steps_per_day})")
    if dow_idx.size and (dow_idx.min() < 0 or dow_idx.max() >= 7):
        raise CalendarIndexOutOfRange("day-of-week index outside [0, 7)")
    if params.adaptive.shape[:2] != (t, n):
        raise ShapeMismatch(f"adaptive embedding {params.adaptive.shape} for window {window.shape}")
    d_t = params.tod_table.shape[1]
    d_a = params.adaptive.shape[2]

    feat = ad.linear(window, params.feat_w, params.feat_b)
    tod = ad.broadcast_to(ad.take_rows(params.tod_table, tod_idx), (b, t, n, d_t), axes=(2,))
    dow = ad.broadcast_to(ad.take_rows(params.dow_table, dow_idx), (b, t, n, d_t), axes=(2,))
    adaptive = ad.broadcast_to(params.adaptive, (b, t, n, d_a), axes=(0,))
    parts = [feat, tod, dow, adaptive]
    if node_encoding is not None:
        enc = ad.as_tensor(np.asarray(node_encoding, dtype=feat.data.dtype))
        if enc.shape[0] != n:
            raise ShapeMismatch(f"node encoding {enc.shape} for {n} nodes")
        parts.append(ad.broadcast_to(enc, (b, t, n, enc.shape[1]), axes=(0, 1)))
    return ad.concat(parts)


def propagation_matrix(adj) -> np.ndarray:
    """Row-normalized self-loop-augmented adjacency ``D~^-1 (A + I)``."""
    a = adj.data if isinstance(adj, AdjacencyMatrix) else np.asarray(adj)
    a = a + np.eye(a.shape[0])
    return a / a.sum(axis=1, keepdims=True)


def mpnn(x: Tensor, adj, weight: Tensor, bias: Tensor | None) -> Tensor:
    """One message-passing round per time slice: ``A_hat @ x @ weight + bias``.

    Aggregation is the degree-normalized sum over the node and its
    neighbors; the combine step is a shared linear map.
    """
    a_hat = adj if isinstance(adj, Tensor) else None
    if a_hat is None:
        a_hat = Tensor(propagation_matrix(adj).astype(x.data.dtype))
    if a_hat.shape != (x.shape[-2], x.shape[-2]):
        raise ShapeMismatch(f"mpnn: adjacency {a_hat.shape} for {x.shape[-2]} nodes")
    return ad.linear(ad.matmul(a_hat, x), weight, bias)


def attention_weights(x: Tensor, params: AttentionParams) -> Tensor:
    """Softmax over the node axis of scaled query-key products, per time slice."""
    q = ad.linear(x, params.q_w)
    k = ad.linear(x, params.k_w)
    perm = tuple(range(x.ndim - 2)) + (x.ndim - 1, x.ndim - 2)
    scores = ad.scale(ad.matmul(q, ad.transpose(k, perm)), 1.0 / math.sqrt(q.shape[-1]))
    return ad.softmax(scores)


def tiny_attention(x: Tensor, params: AttentionParams) -> Tensor:
    """Single-head attention across nodes within each time slice, width ``d_tiny``."""
    w = attention_weights(x, params)
    v = ad.linear(x, params.v_w)
    return ad.linear(ad.matmul(w, v), params.o_w)


_EXPECTED_KIND = {"spatial": "standard"}


def gated_block(
    H: Tensor,
    kind: str,
    adj,
    params: BlockParams,
    cycle_source: str = "clique",
) -> Tensor:
    """Gated MLP block with a kind-specific gate on the second channel half.

    ``adj`` is an :class:`AdjacencyMatrix` (kind-checked) or, from the model's
    forward pass, a precomputed propagation matrix as a :class:`Tensor`.
    """
    if kind not in ("temporal", "spatial", "cycle"):
        raise ValueError(f"unknown block kind {kind!r}")
    if isinstance(adj, AdjacencyMatrix):
        expected = _EXPECTED_KIND.get(kind, cycle_source)
        if kind != "temporal" and adj.kind != expected:
            raise AdjacencyKindMismatch(f"{kind} block expects a {expected} adjacency, got {adj.kind}")
    elif kind != "temporal" and adj is None:
        raise AdjacencyKindMismatch(f"{kind} block needs an adjacency matrix")

    hn = ad.layer_norm(H, params.norm_g, params.norm_b)
    z = ad.gelu(ad.linear(hn, params.u_w, params.u_b))
    z1, z2 = ad.split_channels(z)
    if kind == "temporal":
        gate = ad.add_bias(ad.conv2d_3x3(z2, params.gate_w), params.gate_b)
    else:
        gate = mpnn(z2, adj, params.gate_w, params.gate_b)
    if params.attn is not None:
        gate = ad.add(gate, tiny_attention(hn, params.attn))
    return ad.linear(ad.hadamard(z1, gate), params.v_w, params.v_b)


def encoder_layer(
    H: Tensor,
    A,
    A_C,
    params: EncoderLayerParams,
    dropout: float = 0.0,
    training: bool = False,
    rng: np.random.Generator | None = None,
    cycle_source: str = "clique",
) -> Tensor:
    """Temporal, cycle and spatial blocks on the same input, fused, plus residual."""
    outs = [gated_block(H, "temporal", None, params.temporal)]
    if params.cycle is not None:
        outs.append(gated_block(H, "cycle", A_C, params.cycle, cycle_source))
    outs.append(gated_block(H, "spatial", A, params.spatial))
    outs = [ad.dropout(y, dropout, rng, training) for y in outs]
    fused = ad.linear(ad.concat(outs), params.fusion_w, params.fusion_b)
    return ad.add(H, fused)


def output_head(Y: Tensor, params: HeadParams, T_prime: int, d_o: int) -> Tensor:
    """Flatten each node's ``(T, d_h)`` block and map it to ``(T', d_o)``."""
    b, t, n, d = Y.shape
    if params.w.shape[0] != t * d:
        raise ShapeMismatch(f"head expects T*d_h={params.w.shape[0]}, got {t}*{d}")
    y = ad.reshape(ad.transpose(Y, (0, 2, 1, 3)), (b, n, t * d))
    y = ad.reshape(ad.linear(y, params.w, params.b), (b, n, T_prime, d_o))
    return ad.transpose(y, (0, 2, 1, 3))


def forward(
    window,
    tod_idx,
    dow_idx,
    A: AdjacencyMatrix,
    A_C: AdjacencyMatrix | None,
    params: ModelParams,
    training: bool = False,
    rng: np.random.Generator | None = None,
    node_encoding=None,
) -> Tensor:
    """Embedding, ``L`` encoder layers, output head.

    Returns normalized-unit predictions shaped ``(B, T', N, d_o)``, or
    ``(T', N, d_o)`` for a single unbatched window.
    """
    cfg = params.config
    window = ad.as_tensor(window)
    single = window.ndim == 3
    if single:
        window = ad.Tensor(window.data[None])
        tod_idx = np.asarray(tod_idx)[None]
        dow_idx = np.asarray(dow_idx)[None]
    if window.ndim != 4 or window.shape[1] != cfg.T or window.shape[3] != cfg.C:
        raise ShapeMismatch(f"window {window.shape} does not match T={cfg.T}, C={cfg.C}")
    dtype = params.head.w.data.dtype
    if window.data.dtype != dtype:
        window = ad.Tensor(window.data.astype(dtype))

    for name, adj in (("A", A), ("A_C", A_C)):
        if adj is not None and adj.data.shape != (params.num_nodes, params.num_nodes):
            raise ShapeMismatch(f"{name} is {adj.data.shape}, model has {params.num_nodes} nodes")
    if A is None or A.kind != "standard":
        raise AdjacencyKindMismatch("spatial block expects a standard adjacency")
    a_hat = Tensor(propagation_matrix(A).astype(dtype))
    ac_hat = None
    if cfg.use_cycle_block:
        if A_C is None or A_C.kind != cfg.cycle_source:
            got = None if A_C is None else A_C.kind
            raise AdjacencyKindMismatch(f"cycle block expects a {cfg.cycle_source} adjacency, got {got}")
        ac_hat = Tensor(propagation_matrix(A_C).astype(dtype))

    h = embed(window, tod_idx, dow_idx, params.embedding, cfg.steps_per_day, node_encoding)
    for layer in params.layers:
        h = encoder_layer(h, a_hat, ac_hat, layer, cfg.dropout, training, rng)
    out = output_head(h, params.head, cfg.T_prime, cfg.d_o)
    if single:
        out = ad.reshape(out, out.shape[1:])
    return out


# --- checkpoints ------------------------------------------------------------------

MANIFEST = "manifest.txt"


def save_params(params: ModelParams, directory) -> None:
    """Write ``manifest.txt`` (name and shape per line) and one CY2T blob per tensor."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    lines = []
    for name, t in params.named_parameters():
        formats.write_tensor(directory / f"{name}.cy2t", t.data)
        lines.append(f"{name} {' '.join(str(s) for s in t.shape)}")
    (directory / MANIFEST).write_text("\n".join(lines) + "\n")


def load_params(directory, cfg: ModelConfig, num_nodes: int, dtype=np.float32) -> ModelParams:
    """Load a checkpoint, validating every shape against ``cfg``."""
    directory = Path(directory)
    params = init_params(cfg, num_nodes, 0, dtype)
    expected = {k: t.shape for k, t in params.named_parameters()}
    manifest = {}
    for line in (directory / MANIFEST).read_text().splitlines():
        if line.strip():
            name, *dims = line.split()
            manifest[name] = tuple(int(d) for d in dims)
    if manifest != expected:
        bad = sorted(k for k in set(manifest) | set(expected) if manifest.get(k) != expected.get(k))
        raise ConfigMismatch(f"checkpoint does not match config at: {bad[:5]}")
    params.load_state_dict({k: formats.read_tensor(directory / f"{k}.cy2t") for k in expected})
    return params
