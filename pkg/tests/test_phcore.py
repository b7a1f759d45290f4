import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from igns import autodiff as ad
from igns import phcore as ph
from igns.autodiff import Value
from igns.graphdata import build_grid_graph, build_path_graph
from igns.verify import random_hamiltonian


def dense_hamiltonian(P, q, p, graph):
    """Per-node loop oracle for the ln-cosh energy."""
    total = 0.0
    for x, W, V, b in ((q, P.Wq, P.Vq, P.bq), (p, P.Wp, P.Vp, P.bp)):
        for i in range(graph.n_nodes):
            z = W.data @ x[i] + b.data[0]
            for j in graph.neighbors(i):
                z = z + V.data @ x[j]
            total += np.sum(np.log(np.cosh(z)))
    return total


@settings(max_examples=30, deadline=None)
@given(st.integers(2, 6), st.integers(1, 4), st.integers(0, 2**31 - 1))
def test_energy_matches_loop_oracle(n, h, seed):
    rng = np.random.default_rng(seed)
    g = build_path_graph(n)
    P = random_hamiltonian(rng, h)
    q, p = rng.standard_normal((n, h)), rng.standard_normal((n, h))
    assert ph.hamiltonian(P, q, p, g).item() == pytest.approx(dense_hamiltonian(P, q, p, g), rel=1e-12)


def test_closed_form_gradient_matches_tape(rng):
    g = build_grid_graph(3, 3)
    P = random_hamiltonian(rng, 3)
    q = Value(rng.standard_normal((9, 3)), requires_grad=True)
    p = Value(rng.standard_normal((9, 3)), requires_grad=True)
    with ad.Tape() as tape:
        H = ph.hamiltonian(P, q, p, g)
    grads = tape.backward(H)
    gq, gp = ph.grad_hamiltonian(P, q.data, p.data, g)
    np.testing.assert_allclose(gq.data, grads[q.id], rtol=1e-12, atol=1e-12)
    np.testing.assert_allclose(gp.data, grads[p.id], rtol=1e-12, atol=1e-12)


def test_zero_weights_flat_energy():
    g = build_path_graph(3)
    z = Value(np.zeros((2, 2)))
    P = ph.HamiltonianParams(z, z, z, z, Value(np.zeros((1, 2))), Value(np.zeros((1, 2))))
    q = np.ones((3, 2))
    assert ph.hamiltonian(P, q, q, g).item() == 0.0
    gq, _ = ph.grad_hamiltonian(P, q, q, g)
    assert not gq.data.any()


def test_separable_mixed_hessian_zero(rng):
    g = build_path_graph(4)
    P = random_hamiltonian(rng, 2)
    q, p = rng.standard_normal((4, 2)), rng.standard_normal((4, 2))
    gq0 = ph.grad_hamiltonian(P, q, p, g)[0].data
    gq1 = ph.grad_hamiltonian(P, q, p + rng.standard_normal(p.shape), g)[0].data
    np.testing.assert_array_equal(gq0, gq1)


def test_symplectic_step_quadratic_hand():
    H = ph.QuadraticHamiltonian(1.0, 1.0)
    s = ph.symplectic_step(H, ph.LatentState(Value([[1.0]]), Value([[0.0]])), 0.1)
    assert s.p.item() == pytest.approx(-0.1)
    assert s.q.item() == pytest.approx(0.99)
    assert s.t_index == 1


def test_symplectic_step_with_damping_and_force_hand():
    H = ph.QuadraticHamiltonian(2.0, 1.0)
    s0 = ph.LatentState(Value([[1.0]]), Value([[1.0]]))
    s = ph.symplectic_step(H, s0, 0.5, damping=Value([[0.5]]), force=Value([[1.0]]))
    p1 = 1.0 + 0.5 * (-2.0 - 0.5 * 1.0 + 1.0)
    assert s.p.item() == pytest.approx(p1)
    assert s.q.item() == pytest.approx(1.0 + 0.5 * p1)


def test_zero_dt_is_identity(rng):
    g = build_path_graph(5)
    H = ph.LnCoshHamiltonian(random_hamiltonian(rng, 2), ph.GraphOps(g))
    s0 = ph.LatentState(Value(rng.standard_normal((5, 2))), Value(rng.standard_normal((5, 2))))
    s = ph.symplectic_step(H, s0, 0.0)
    np.testing.assert_array_equal(s.q.data, s0.q.data)
    np.testing.assert_array_equal(s.p.data, s0.p.data)
    with pytest.raises(ValueError):
        ph.symplectic_step(H, s0, -0.1)


def test_state_shape_mismatch():
    with pytest.raises(ValueError):
        ph.LatentState(Value(np.zeros((3, 2))), Value(np.zeros((3, 3))))


def test_time_embedding_layout():
    e = ph.time_embedding(0, 50)
    assert e.shape == (1, ph.TIME_EMBED_DIM)
    np.testing.assert_array_equal(e[0, :8], 0.0)
    np.testing.assert_array_equal(e[0, 8:], 1.0)
    with pytest.raises(ValueError):
        ph.time_embedding(1, 10, dim=5)


def _block(rng, h, te=ph.TIME_EMBED_DIM, ch=5):
    def net():
        return ph.CoefficientNet(Value(rng.standard_normal((te, ch))), Value(rng.standard_normal((1, ch))),
                                 Value(rng.standard_normal((ch, h))), Value(rng.standard_normal((1, h))))
    return ph.TimeVaryingBlock(*(Value(rng.standard_normal((h, h))) for _ in range(3)), net(), net())


def test_time_varying_block_matches_dense_reference(rng):
    block = _block(rng, 4)
    emb = ph.time_embedding(7, 50)
    np.testing.assert_allclose(block.assemble(emb).data, ph.dense_weight_reference(block, emb), rtol=1e-12, atol=1e-12)


def test_time_varying_block_structure(rng):
    block = _block(rng, 3)
    emb = ph.time_embedding(3, 10)
    S = block.symmetric(block.gamma(emb)).data
    A = block.skew(block.tau(emb)).data
    np.testing.assert_allclose(S, S.T, atol=1e-14)
    np.testing.assert_allclose(A, -A.T, atol=1e-14)


def test_coefficient_net_dim_check(rng):
    block = _block(rng, 2, te=8)
    with pytest.raises(ValueError, match="time embedding"):
        block.assemble(ph.time_embedding(0, 5, dim=16))


def test_assemble_static_passthrough(rng):
    P = random_hamiltonian(rng, 2)
    assert ph.assemble_weights(P, 3, 10) is P


def _forcing(rng, h, L, edge_dim):
    layers = [ph.ForcingLayer(Value(rng.standard_normal((h, h))), Value(rng.standard_normal((h, h))),
                              Value(rng.standard_normal((edge_dim, h)))) for _ in range(L)]
    return ph.ForcingParams(layers, Value(rng.standard_normal((h, h))) if L else None)


def test_forcing_one_layer_loop_oracle(rng):
    g = build_grid_graph(2, 3)
    F = _forcing(rng, 2, 1, g.edge_dim)
    q = rng.standard_normal((6, 2))
    lay = F.layers[0]
    want = np.zeros((6, 2))
    for i in range(6):
        pre = q[i] @ lay.node_w.data
        for e in np.flatnonzero(g.dst == i):
            j = g.src[e]
            pre = pre + (q[j] - q[i]) @ lay.edge_w.data + g.edge_attr[e] @ lay.edge_proj.data
        want[i] = np.tanh(pre) @ F.out_w.data
    np.testing.assert_allclose(ph.forcing(F, Value(q), g).data, want, rtol=1e-12, atol=1e-12)


def test_forcing_zero_layers_is_none(rng):
    g = build_path_graph(3)
    assert ph.forcing(ph.ForcingParams([]), Value(np.zeros((3, 2))), g) is None


def test_forcing_edge_dim_mismatch(rng):
    g = build_path_graph(3)
    F = _forcing(rng, 2, 1, 5)
    with pytest.raises(ValueError, match="edge feature"):
        ph.forcing(F, Value(np.zeros((3, 2))), g)


def test_damping_positive():
    d = ph.damping_matrix(Value([[-30.0, 0.0, 5.0]])).data
    assert (d > 0).all()


def test_warmup_freezes_time(rng):
    H = ph.QuadraticHamiltonian()
    seen = []

    def step(s):
        seen.append(s.t_index)
        return ph.symplectic_step(H, s, 0.1)

    s = ph.warmup(step, ph.LatentState(Value([[1.0]]), Value([[0.0]]), t_index=4), 3)
    assert seen == [4, 4, 4] and s.t_index == 4
    with pytest.raises(ValueError):
        ph.warmup(step, s, -1)


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_nonfinite_state_aborts():
    H = ph.QuadraticHamiltonian(1.0, 1.0)
    big = ph.LatentState(Value([[1e308]]), Value([[1e308]]))
    with pytest.raises(ad.NonFiniteError):
        with ad.strict_mode(False):
            ph.symplectic_step(H, big, 10.0)


def test_receptive_radius_values():
    assert [ph.receptive_radius(L) for L in range(5)] == [4, 4, 4, 5, 6]


def test_explicit_euler_step_hand():
    s = ph.explicit_euler_step(ph.QuadraticHamiltonian(), ph.LatentState(Value([[1.0]]), Value([[0.0]])), 0.1)
    assert s.q.item() == 1.0 and s.p.item() == pytest.approx(-0.1)


def _unit_params():
    one, zero = Value([[1.0]]), Value([[0.0]])
    return ph.HamiltonianParams(one, one, one, one, zero, zero)


def test_single_node_energy_and_gradient_hand():
    from igns.graphdata import Graph
    g = Graph.from_edges(1, [], np.zeros((1, 1)))
    P = _unit_params()
    assert ph.hamiltonian(P, np.array([[1.0]]), np.array([[0.0]]), g).item() == pytest.approx(0.43378, abs=1e-5)
    gq, gp = ph.grad_hamiltonian(P, np.array([[1.0]]), np.array([[0.0]]), g)
    assert gq.item() == pytest.approx(0.76159, abs=1e-5) and gp.item() == 0.0


def test_two_node_path_energy_hand():
    g = build_path_graph(2)
    q = np.full((2, 1), 0.5)
    assert ph.hamiltonian(_unit_params(), q, np.zeros((2, 1)), g).item() == pytest.approx(0.86756, abs=1e-5)


def test_unit_damping_step_hand():
    s0 = ph.LatentState(Value([[0.0]]), Value([[1.0]]))
    s = ph.symplectic_step(ph.QuadraticHamiltonian(), s0, 0.1, damping=Value([[1.0]]))
    assert s.p.item() == pytest.approx(0.9) and s.q.item() == pytest.approx(0.09)


def test_warmup_energy_per_step(rng):
    g = build_path_graph(6)
    H = ph.LnCoshHamiltonian(random_hamiltonian(rng, 3), ph.GraphOps(g))
    s = ph.LatentState(Value(rng.standard_normal((6, 3))), Value(rng.standard_normal((6, 3))))
    e0 = H.energy(s.q, s.p).item()
    prev = e0
    for _ in range(50):
        s = ph.warmup(lambda st: ph.symplectic_step(H, st, 1e-2), s, 1)
        e = H.energy(s.q, s.p).item()
        assert abs(e - prev) <= 1e-3 * abs(e0)
        prev = e


def test_cross_block_weight_gradients_zero(rng):
    g = build_path_graph(4)
    P = random_hamiltonian(rng, 2)
    for w in (P.Wq, P.Wp, P.Vq, P.Vp):
        w.requires_grad = True
    q = rng.standard_normal((4, 2))
    with ad.Tape() as tape:
        gq, _ = ph.grad_hamiltonian(P, q, rng.standard_normal((4, 2)), g)
        loss = ad.sum_all(gq)
    grads = tape.backward(loss, wrt=[P.Wp, P.Vp])
    # the q gradient never touches the p blocks
    assert not grads[P.Wp.id].any() and not grads[P.Vp.id].any()


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_forcing_permutation_equivariant(seed):
    rng = np.random.default_rng(seed)
    g = build_grid_graph(3, 3)
    F = _forcing(rng, 3, 2, g.edge_dim)
    q = rng.standard_normal((9, 3))
    perm = rng.permutation(9)
    qp = np.empty_like(q)
    qp[perm] = q
    a = ph.forcing(F, Value(q), g).data
    b = ph.forcing(F, Value(qp), g.permute(perm)).data
    # neighbour sums are reordered by the relabeling, so agreement is to rounding
    np.testing.assert_allclose(b[perm], a, rtol=1e-12, atol=1e-12)
