import math

import numpy as np
import pytest

from cy2mixer import autodiff as ad
from cy2mixer.autodiff import Tape, Tensor
from cy2mixer.errors import AdjacencyKindMismatch, CalendarIndexOutOfRange, ConfigMismatch
from cy2mixer.model import (
    ModelConfig,
    attention_weights,
    embed,
    encoder_layer,
    forward,
    gated_block,
    init_params,
    load_params,
    mpnn,
    output_head,
    save_params,
    tiny_attention,
)
from cy2mixer.topology import AdjacencyMatrix, build_graph, clique_adjacency, cycle_basis_paton, dense_adjacency

from .oracles import numeric_grad, rel_error

TOY = ModelConfig(num_layers=2, d_f=4, d_t=2, d_a=8, d_tiny=4, T=4, T_prime=4, dropout=0.0)


def ring_artifacts(n=6):
    g = build_graph(n, [(i, (i + 1) % n, 1.0) for i in range(n)])
    return dense_adjacency(g), clique_adjacency(g, cycle_basis_paton(g))


def randomize(params, rng, scale=0.3):
    for t in params.parameters():
        t.data = t.data + scale * rng.standard_normal(t.shape)


def toy_inputs(rng, cfg=TOY, n=6, batch=2):
    x = rng.standard_normal((batch, cfg.T, n, cfg.C))
    tod = rng.integers(0, cfg.steps_per_day, size=(batch, cfg.T))
    dow = rng.integers(0, 7, size=(batch, cfg.T))
    return x, tod, dow


# --- embedding ------------------------------------------------------------------


def test_embed_table6_shape():
    cfg = ModelConfig(d_f=24, d_t=24, d_a=80, T=12)
    assert cfg.d_h == 152
    params = init_params(cfg, 307, 0)
    x = np.zeros((1, 12, 307, 1))
    h = embed(x, np.arange(12)[None], np.zeros((1, 12), int), params.embedding, cfg.steps_per_day)
    assert h.shape == (1, 12, 307, 152)


def test_embed_zero_everything_is_zero():
    params = init_params(TOY, 6, 0, np.float64)
    for t in (params.embedding.tod_table, params.embedding.dow_table, params.embedding.adaptive):
        t.data = np.zeros_like(t.data)
    h = embed(np.zeros((1, 4, 6, 1)), np.zeros((1, 4), int), np.zeros((1, 4), int), params.embedding, 288)
    assert not h.data.any()


def test_embed_feature_rows_follow_node_permutation():
    rng = np.random.default_rng(0)
    params = init_params(TOY, 6, 0, np.float64)
    x, tod, dow = toy_inputs(rng)
    perm = rng.permutation(6)
    h = embed(x, tod, dow, params.embedding, 288)
    hp = embed(x[:, :, perm], tod, dow, params.embedding, 288)
    np.testing.assert_array_equal(hp.data[..., : TOY.d_f], h.data[:, :, perm, : TOY.d_f])
    # calendar part is identical across nodes
    cal = h.data[..., TOY.d_f : TOY.d_f + 2 * TOY.d_t]
    np.testing.assert_array_equal(cal, np.broadcast_to(cal[:, :, :1], cal.shape))


def test_embed_rejects_bad_calendar():
    params = init_params(TOY, 6, 0)
    x = np.zeros((1, 4, 6, 1))
    with pytest.raises(CalendarIndexOutOfRange):
        embed(x, np.full((1, 4), 288), np.zeros((1, 4), int), params.embedding, 288)
    with pytest.raises(CalendarIndexOutOfRange):
        embed(x, np.zeros((1, 4), int), np.full((1, 4), 7), params.embedding, 288)


# --- message passing --------------------------------------------------------------


def test_mpnn_zero_adjacency_is_self_loop():
    rng = np.random.default_rng(1)
    x = Tensor(rng.standard_normal((3, 4, 5)))
    w, b = Tensor(rng.standard_normal((5, 5))), Tensor(rng.standard_normal(5))
    out = mpnn(x, AdjacencyMatrix(np.zeros((4, 4)), "clique"), w, b)
    np.testing.assert_allclose(out.data, x.data @ w.data + b.data)


def test_mpnn_equal_neighbors_equal_outputs():
    x = Tensor(np.tile([[1.0, -2.0, 0.5]], (2, 1))[None])
    a = AdjacencyMatrix(np.array([[0.0, 1.0], [1.0, 0.0]]), "standard")
    out = mpnn(x, a, Tensor(np.random.default_rng(2).standard_normal((3, 3))), Tensor(np.zeros(3)))
    np.testing.assert_allclose(out.data[0, 0], out.data[0, 1])


def test_mpnn_path_one_hot():
    g = build_graph(3, [(0, 1, 1), (1, 2, 1)])
    out = mpnn(Tensor(np.eye(3)[None]), dense_adjacency(g), Tensor(np.eye(3)), Tensor(np.zeros(3)))
    expected = np.array([[1 / 2, 1 / 2, 0], [1 / 3, 1 / 3, 1 / 3], [0, 1 / 2, 1 / 2]])
    np.testing.assert_allclose(out.data[0], expected)


def test_mpnn_permutation_equivariance():
    rng = np.random.default_rng(3)
    for _ in range(20):
        n = int(rng.integers(2, 9))
        a = (rng.random((n, n)) < 0.4).astype(float)
        a = np.triu(a, 1)
        a = a + a.T
        x = rng.standard_normal((2, n, 3))
        w, b = Tensor(rng.standard_normal((3, 3))), Tensor(rng.standard_normal(3))
        perm = rng.permutation(n)
        lhs = mpnn(Tensor(x[:, perm]), AdjacencyMatrix(a[np.ix_(perm, perm)], "standard"), w, b)
        rhs = mpnn(Tensor(x), AdjacencyMatrix(a, "standard"), w, b)
        np.testing.assert_allclose(lhs.data, rhs.data[:, perm], atol=1e-12)


# --- gated blocks -----------------------------------------------------------------


def _layer_norm_ref(x, eps=1e-5):
    mu = x.mean(-1, keepdims=True)
    var = ((x - mu) ** 2).mean(-1, keepdims=True)
    return (x - mu) / np.sqrt(var + eps)


def _gelu_ref(x):
    return np.vectorize(lambda v: 0.5 * v * (1 + math.erf(v / math.sqrt(2))))(x)


@pytest.mark.parametrize("kind", ["temporal", "spatial", "cycle"])
def test_block_at_init_is_plain_mlp(kind):
    cfg = ModelConfig(d_f=4, d_t=2, d_a=8, tiny_attention=False)
    params = init_params(cfg, 6, 0, np.float64)
    blk = getattr(params.layers[0], kind)
    a, ac = ring_artifacts()
    adj = {"temporal": None, "spatial": a, "cycle": ac}[kind]
    h = Tensor(np.random.default_rng(4).standard_normal((2, 5, 6, cfg.d_h)))
    y = gated_block(h, kind, adj, blk)
    z = _gelu_ref(_layer_norm_ref(h.data) @ blk.u_w.data + blk.u_b.data)
    np.testing.assert_allclose(y.data, z[..., : cfg.d_h] @ blk.v_w.data + blk.v_b.data, atol=1e-12)


def test_cycle_block_on_acyclic_graph():
    cfg = ModelConfig(d_f=4, d_t=2, d_a=8, tiny_attention=False)
    params = init_params(cfg, 5, 0, np.float64)
    blk = params.layers[0].cycle
    rng = np.random.default_rng(5)
    blk.gate_w.data = rng.standard_normal(blk.gate_w.shape) * 0.1
    tree = build_graph(5, [(0, 1, 1), (1, 2, 1), (2, 3, 1), (3, 4, 1)])
    ac = clique_adjacency(tree, cycle_basis_paton(tree))
    h = Tensor(rng.standard_normal((1, 3, 5, cfg.d_h)))
    y = gated_block(h, "cycle", ac, blk)
    z = _gelu_ref(_layer_norm_ref(h.data) @ blk.u_w.data + blk.u_b.data)
    z1, z2 = z[..., : cfg.d_h], z[..., cfg.d_h :]
    gate = z2 @ blk.gate_w.data + blk.gate_b.data
    np.testing.assert_allclose(y.data, (z1 * gate) @ blk.v_w.data + blk.v_b.data, atol=1e-12)


def test_spatial_block_hand_computed():
    # d_h = 2, two connected nodes, one time step, every weight set by hand
    cfg = ModelConfig(d_f=2, d_t=0, d_a=0, tiny_attention=False)
    params = init_params(cfg, 2, 0, np.float64)
    blk = params.layers[0].spatial
    blk.u_w.data = np.array([[1.0, 0.0, 0.5, -1.0], [0.0, 1.0, 1.0, 0.0]])
    blk.u_b.data = np.zeros(4)
    blk.gate_w.data = np.array([[1.0, 0.0], [0.0, 2.0]])
    blk.gate_b.data = np.array([1.0, 1.0])
    blk.v_w.data = np.array([[1.0, 1.0], [0.0, 1.0]])
    blk.v_b.data = np.zeros(2)
    h = Tensor(np.array([[[[3.0, 1.0], [0.0, 2.0]]]]))
    a = AdjacencyMatrix(np.array([[0.0, 1.0], [1.0, 0.0]]), "standard")
    y = gated_block(h, "spatial", a, blk)

    # layer norm of a two-vector (p, q) is (+-1) * |p-q| / sqrt((p-q)^2 + 4 eps) ...
    s0 = 2.0 / math.sqrt(4.0 + 4e-5)  # node 0: (3, 1) -> (s0, -s0)
    s1 = 2.0 / math.sqrt(4.0 + 4e-5)  # node 1: (0, 2) -> (-s1, s1)
    n0, n1 = [s0, -s0], [-s1, s1]

    def phi(v):
        return 0.5 * v * (1 + math.erf(v / math.sqrt(2)))

    def proj(n):
        return [n[0], n[1], 0.5 * n[0] + n[1], -n[0]]

    z0 = [phi(v) for v in proj(n0)]
    z1 = [phi(v) for v in proj(n1)]
    # both nodes have one neighbor, so aggregation is the plain mean
    agg = [(z0[2] + z1[2]) / 2, (z0[3] + z1[3]) / 2]
    gate = [agg[0] * 1.0 + 1.0, agg[1] * 2.0 + 1.0]
    out = []
    for z in (z0, z1):
        g0, g1 = z[0] * gate[0], z[1] * gate[1]
        out.append([g0, g0 + g1])
    np.testing.assert_allclose(y.data[0, 0], np.array(out), atol=1e-12)


def test_block_adjacency_kind_checks():
    params = init_params(TOY, 6, 0)
    a, ac = ring_artifacts()
    h = Tensor(np.zeros((1, 4, 6, TOY.d_h), dtype=np.float32))
    with pytest.raises(AdjacencyKindMismatch):
        gated_block(h, "spatial", ac, params.layers[0].spatial)
    with pytest.raises(AdjacencyKindMismatch):
        gated_block(h, "cycle", a, params.layers[0].cycle)
    with pytest.raises(AdjacencyKindMismatch):
        gated_block(h, "cycle", None, params.layers[0].cycle)


def test_near_identity_init_variance():
    cfg = ModelConfig(d_f=8, d_t=4, d_a=16, tiny_attention=False)
    params = init_params(cfg, 6, 1, np.float64)
    a, ac = ring_artifacts()
    h = Tensor(np.random.default_rng(6).standard_normal((4, 12, 6, cfg.d_h)))
    for kind, adj in (("temporal", None), ("spatial", a), ("cycle", ac)):
        blk = getattr(params.layers[0], kind)
        y = gated_block(h, kind, adj, blk).data
        z = _gelu_ref(_layer_norm_ref(h.data) @ blk.u_w.data + blk.u_b.data)
        mlp = z[..., : cfg.d_h] @ blk.v_w.data + blk.v_b.data
        ratio = y.var() / mlp.var()
        assert 0.5 <= ratio <= 2.0


def test_cycle_gate_equivariant_without_cycles():
    rng = np.random.default_rng(7)
    w, b = Tensor(rng.standard_normal((5, 5))), Tensor(rng.standard_normal(5))
    zero = AdjacencyMatrix(np.zeros((6, 6)), "clique")
    z2 = rng.standard_normal((3, 6, 5))
    perm = rng.permutation(6)
    np.testing.assert_allclose(mpnn(Tensor(z2[:, perm]), zero, w, b).data, mpnn(Tensor(z2), zero, w, b).data[:, perm])


# --- tiny attention -----------------------------------------------------------------


def test_attention_single_node():
    params = init_params(ModelConfig(d_f=4, d_t=2, d_a=8, d_tiny=3), 1, 0, np.float64)
    attn = params.layers[0].temporal.attn
    x = Tensor(np.random.default_rng(8).standard_normal((2, 1, 16)))
    np.testing.assert_allclose(attention_weights(x, attn).data, 1.0)
    np.testing.assert_allclose(tiny_attention(x, attn).data, x.data @ attn.v_w.data @ attn.o_w.data)


def test_attention_uniform_nodes_and_row_sums():
    params = init_params(ModelConfig(d_f=4, d_t=2, d_a=8, d_tiny=3), 5, 0, np.float64)
    attn = params.layers[0].spatial.attn
    same = Tensor(np.tile(np.random.default_rng(9).standard_normal(16), (2, 5, 1)))
    out = tiny_attention(same, attn).data
    np.testing.assert_allclose(out, np.broadcast_to(out[:, :1], out.shape), atol=1e-12)
    x = Tensor(np.random.default_rng(10).standard_normal((3, 2, 5, 16)))
    w = attention_weights(x, attn).data
    assert w.shape == (3, 2, 5, 5)
    np.testing.assert_allclose(w.sum(-1), 1.0, atol=1e-6)


# --- layers, head, forward --------------------------------------------------------------


def test_encoder_layer_shape_and_residual():
    cfg = ModelConfig(d_f=24, d_t=24, d_a=80, tiny_attention=True)
    params = init_params(cfg, 20, 0)
    a, ac = ring_artifacts(20)
    h = Tensor(np.random.default_rng(11).standard_normal((1, 12, 20, 152)).astype(np.float32))
    layer = params.layers[0]
    assert encoder_layer(h, a, ac, layer).shape == (1, 12, 20, 152)
    layer.fusion_w.data[:] = 0
    np.testing.assert_array_equal(encoder_layer(h, a, ac, layer).data, h.data)


def test_stacked_layers_stay_finite():
    cfg = ModelConfig(num_layers=3, d_f=8, d_t=4, d_a=16, d_tiny=8)
    params = init_params(cfg, 10, 0, np.float64)
    a, ac = ring_artifacts(10)
    h = Tensor(np.random.default_rng(12).standard_normal((2, 12, 10, cfg.d_h)))
    for layer in params.layers:
        h = encoder_layer(h, a, ac, layer)
        assert h.shape == (2, 12, 10, cfg.d_h)
        assert np.isfinite(h.data).all()


@pytest.mark.parametrize("T, T_prime, n", [(12, 12, 307), (6, 1, 20)])
def test_output_head_shapes(T, T_prime, n):
    cfg = ModelConfig(T=T, T_prime=T_prime)
    params = init_params(cfg, n, 0)
    y = Tensor(np.random.default_rng(0).standard_normal((1, T, n, 152)).astype(np.float32))
    assert output_head(y, params.head, T_prime, 1).shape == (1, T_prime, n, 1)
    params.head.w.data[:] = 0
    assert not output_head(y, params.head, T_prime, 1).data.any()


def test_forward_smoke_and_determinism():
    cfg = ModelConfig(num_layers=2, d_f=4, d_t=2, d_a=8, d_tiny=4, T=4, T_prime=4, dropout=0.3)
    assert cfg.d_h == 16
    params = init_params(cfg, 6, 0)
    a, ac = ring_artifacts()
    rng = np.random.default_rng(13)
    x = rng.standard_normal((4, 6, 1))
    tod, dow = np.arange(4), np.zeros(4, int)
    y1 = forward(x, tod, dow, a, ac, params)
    y2 = forward(x, tod, dow, a, ac, params)
    assert y1.shape == (4, 6, 1)
    assert np.isfinite(y1.data).all()
    assert np.array_equal(y1.data, y2.data)


def toy_grad_check(seed, n_samples=20):
    """Relative error between tape and finite-difference gradients of an MAE loss."""
    rng = np.random.default_rng(seed)
    params = init_params(TOY, 6, seed, np.float64)
    randomize(params, rng)
    a, ac = ring_artifacts()
    x, tod, dow = toy_inputs(rng)
    target = rng.standard_normal((2, TOY.T_prime, 6, 1)) * 2

    with Tape() as tape:
        loss = ad.mae_loss(forward(x, tod, dow, a, ac, params), target)
        tape.backward(loss)

    named = list(params.named_parameters())
    picks = []
    for _ in range(n_samples):
        name, t = named[rng.integers(len(named))]
        picks.append((t, tuple(int(rng.integers(s)) for s in t.shape)))

    def loss_value():
        return float(ad.mae_loss(forward(x, tod, dow, a, ac, params), target).data)

    analytic, numeric = [], []
    for t, idx in picks:
        box = [np.array([t.data[idx]])]

        def f(v, t=t, idx=idx):
            old = t.data[idx]
            t.data[idx] = v[0]
            out = loss_value()
            t.data[idx] = old
            return out

        numeric.append(numeric_grad(f, box, 0)[0])
        analytic.append(t.grad[idx])
    return rel_error(np.array(analytic), np.array(numeric))


def test_full_model_gradient_check():
    assert toy_grad_check(0) <= 1e-6


def test_checkpoint_roundtrip(tmp_path):
    params = init_params(TOY, 6, 3)
    save_params(params, tmp_path / "ckpt")
    manifest = (tmp_path / "ckpt" / "manifest.txt").read_text().splitlines()
    assert manifest[0] == f"embedding.feat_w 1 {TOY.d_f}"
    loaded = load_params(tmp_path / "ckpt", TOY, 6)
    for (k1, t1), (k2, t2) in zip(params.named_parameters(), loaded.named_parameters()):
        assert k1 == k2
        np.testing.assert_array_equal(t1.data, t2.data)
    with pytest.raises(ConfigMismatch):
        load_params(tmp_path / "ckpt", TOY, 7)
    with pytest.raises(ConfigMismatch):
        load_params(tmp_path / "ckpt", ModelConfig(num_layers=3, d_f=4, d_t=2, d_a=8, d_tiny=4, T=4, T_prime=4), 6)
