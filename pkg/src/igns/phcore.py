"""Port-Hamiltonian latent dynamics on graphs.

Node states are rows: ``q`` and ``p`` are (n, h) matrices with ``h = d/2``.
The Hamiltonian is

    H = sum_i lncosh(W x_i + sum_{j in N_i} V x_j + b) . 1

with block-diagonal ``W = diag(W_q, W_p)`` and ``V = diag(V_q, V_p)``, so it
splits into a q part and a p part. In row form ``Z_q = q W_q^T + A q V_q^T + b_q``
where ``A`` sums neighbor rows, and the state gradient is

    dH/dq = tanh(Z_q) W_q + A^T tanh(Z_q) V_q.

All arithmetic runs through :mod:`igns.autodiff` so training differentiates
through the closed-form gradient.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Value
from .graphdata import Graph

TIME_EMBED_DIM = 16


def receptive_radius(forcing_layers: int) -> int:
    """Hop radius one port-Hamiltonian step can reach.

    The p update reads q through dH/dq (two hops: a node's own pre-activation
    and those of its neighbors) and through the forcing stack (L hops). The q
    update then reads the new momenta two hops away through dH/dp.
    """
    return 2 + max(2, forcing_layers)


class GraphOps:
    """Neighbor sums on a fixed graph, recorded as gather + scatter pairs."""

    def __init__(self, graph: Graph, dtype=np.float64):
        self.graph = graph
        self.n = graph.n_nodes
        self.src = graph.src
        self.dst = graph.dst
        self.degree = Value(graph.in_degree.astype(dtype))

    def agg(self, x: Value) -> Value:
        """Row i becomes the sum of x_j over neighbors j of i."""
        return ad.scatter_sum(ad.gather(x, self.src), self.dst, self.n)

    def agg_t(self, x: Value) -> Value:
        """Adjoint of :meth:`agg`: row k sums x_i over nodes i that list k as neighbor."""
        return ad.scatter_sum(ad.gather(x, self.dst), self.src, self.n)


@dataclass
class LatentState:
    q: Value
    p: Value | None
    t_index: int = 0

    def __post_init__(self):
        if self.p is not None and self.q.shape != self.p.shape:
            raise ValueError(f"q shape {self.q.shape} and p shape {self.p.shape} differ")


@dataclass
class HamiltonianParams:
    """Blocks of W and V plus biases, all (h, h) / (1, h)."""

    Wq: Value
    Wp: Value
    Vq: Value
    Vp: Value
    bq: Value
    bp: Value

    def __post_init__(self):
        self._t = None

    def transposed(self):
        if self._t is None:
            self._t = tuple(ad.transpose(m) for m in (self.Wq, self.Wp, self.Vq, self.Vp))
        return self._t


def time_embedding(t_index: int, horizon: int, dim: int = TIME_EMBED_DIM, dtype=np.float64) -> np.ndarray:
    """Sinusoidal features of normalized time ``t_index / horizon``, shape (1, dim)."""
    if dim % 2:
        raise ValueError("embedding dim must be even")
    s = t_index / max(horizon, 1)
    freqs = np.pi * np.geomspace(1.0, 64.0, dim // 2)
    return np.concatenate([np.sin(freqs * s), np.cos(freqs * s)])[None, :].astype(dtype)


@dataclass
class CoefficientNet:
    """Two-layer perceptron from the time embedding to h coefficients."""

    A1: Value
    c1: Value
    A2: Value
    c2: Value

    def __call__(self, emb) -> Value:
        if emb.shape[1] != self.A1.shape[0]:
            raise ValueError(f"time embedding dim {emb.shape[1]} != network input {self.A1.shape[0]}")
        hid = ad.tanh(ad.add(ad.matmul(emb, self.A1), self.c1))
        return ad.add(ad.matmul(hid, self.A2), self.c2)


@dataclass
class TimeVaryingBlock:
    """Learned bases for one ``h x h`` matrix: ``U_s diag(g) U_s^T + U_a diag(t) P_a^T - P_a diag(t) U_a^T``."""

    Us: Value
    Ua: Value
    Pa: Value
    gamma: CoefficientNet
    tau: CoefficientNet

    def symmetric(self, g: Value) -> Value:
        return ad.matmul(ad.mul(self.Us, g), ad.transpose(self.Us))

    def skew(self, tau: Value) -> Value:
        return ad.sub(ad.matmul(ad.mul(self.Ua, tau), ad.transpose(self.Pa)),
                      ad.matmul(ad.mul(self.Pa, tau), ad.transpose(self.Ua)))

    def assemble(self, emb) -> Value:
        return ad.add(self.symmetric(self.gamma(emb)), self.skew(self.tau(emb)))


@dataclass
class TimeVaryingBases:
    Wq: TimeVaryingBlock
    Wp: TimeVaryingBlock
    Vq: TimeVaryingBlock
    Vp: TimeVaryingBlock
    bq: Value
    bp: Value


def assemble_weights(weights, t_index: int = 0, horizon: int = 1, embed_dim: int = TIME_EMBED_DIM) -> HamiltonianParams:
    """Hamiltonian blocks at step ``t_index``.

    Static :class:`HamiltonianParams` are returned unchanged; for
    :class:`TimeVaryingBases` each block is rebuilt from its bases and the
    coefficient networks evaluated on the time embedding.
    """
    if isinstance(weights, HamiltonianParams):
        return weights
    h = weights.bq.shape[1]
    if weights.Wq.Us.shape != (h, h):
        raise ValueError("basis shape disagrees with half latent dim")
    emb = time_embedding(t_index, horizon, embed_dim, dtype=weights.bq.dtype)
    return HamiltonianParams(
        Wq=weights.Wq.assemble(emb), Wp=weights.Wp.assemble(emb),
        Vq=weights.Vq.assemble(emb), Vp=weights.Vp.assemble(emb),
        bq=weights.bq, bp=weights.bp,
    )


def dense_weight_reference(block: TimeVaryingBlock, emb: np.ndarray) -> np.ndarray:
    """Straight-line numpy assembly of a time-varying block, entry by entry."""

    def mlp(net):
        hid = np.tanh(emb @ net.A1.data + net.c1.data)
        return (hid @ net.A2.data + net.c2.data)[0]

    g, t = mlp(block.gamma), mlp(block.tau)
    Us, Ua, Pa = block.Us.data, block.Ua.data, block.Pa.data
    h = Us.shape[0]
    out = np.zeros((h, h))
    for i in range(h):
        for j in range(h):
            acc = 0.0
            for k in range(h):
                acc += Us[i, k] * g[k] * Us[j, k]
                acc += Ua[i, k] * t[k] * Pa[j, k] - Pa[i, k] * t[k] * Ua[j, k]
            out[i, j] = acc
    return out


# ------------------------------------------------------------------ Hamiltonians

class LnCoshHamiltonian:
    """The learned Hamiltonian with activation tanh and antiderivative lncosh."""

    def __init__(self, params: HamiltonianParams, ops: GraphOps):
        self.params = params
        self.ops = ops

    def _pre(self, x, W_T, V_T, b):
        return ad.add(ad.add(ad.matmul(x, W_T), ad.matmul(self.ops.agg(x), V_T)), b)

    def _grad(self, x, W, V, W_T, V_T, b):
        s = ad.tanh(self._pre(x, W_T, V_T, b))
        return ad.add(ad.matmul(s, W), ad.matmul(self.ops.agg_t(s), V))

    def energy(self, q: Value, p: Value) -> Value:
        P = self.params
        WqT, WpT, VqT, VpT = P.transposed()
        hq = ad.sum_all(ad.lncosh(self._pre(q, WqT, VqT, P.bq)))
        hp = ad.sum_all(ad.lncosh(self._pre(p, WpT, VpT, P.bp)))
        out = ad.add(hq, hp)
        if not np.isfinite(out.data).all():
            raise ad.NonFiniteError("non-finite Hamiltonian")
        return out

    def grad_q(self, q: Value, p: Value) -> Value:
        P = self.params
        WqT, _, VqT, _ = P.transposed()
        return self._grad(q, P.Wq, P.Vq, WqT, VqT, P.bq)

    def grad_p(self, q: Value, p: Value) -> Value:
        P = self.params
        _, WpT, _, VpT = P.transposed()
        return self._grad(p, P.Wp, P.Vp, WpT, VpT, P.bp)


class QuadraticHamiltonian:
    """``H = 1/2 (k_q |q|^2 + k_p |p|^2)``, used for reductions and tests."""

    def __init__(self, k_q: float = 1.0, k_p: float = 1.0):
        self.k_q = float(k_q)
        self.k_p = float(k_p)

    def energy(self, q, p):
        return ad.add(ad.scale(ad.sum_all(ad.square(q)), 0.5 * self.k_q),
                      ad.scale(ad.sum_all(ad.square(p)), 0.5 * self.k_p))

    def grad_q(self, q, p):
        return ad.scale(q, self.k_q)

    def grad_p(self, q, p):
        return ad.scale(p, self.k_p)


def hamiltonian(params: HamiltonianParams, q, p, graph_or_ops) -> Value:
    ops = graph_or_ops if isinstance(graph_or_ops, GraphOps) else GraphOps(graph_or_ops)
    return LnCoshHamiltonian(params, ops).energy(_v(q), _v(p))


def grad_hamiltonian(params: HamiltonianParams, q, p, graph_or_ops) -> tuple[Value, Value]:
    ops = graph_or_ops if isinstance(graph_or_ops, GraphOps) else GraphOps(graph_or_ops)
    H = LnCoshHamiltonian(params, ops)
    q, p = _v(q), _v(p)
    gq, gp = H.grad_q(q, p), H.grad_p(q, p)
    if not (np.isfinite(gq.data).all() and np.isfinite(gp.data).all()):
        raise ad.NonFiniteError("non-finite Hamiltonian gradient")
    return gq, gp


def _v(x):
    return x if isinstance(x, Value) else Value(x)


# ---------------------------------------------------------------------- damping

def damping_matrix(raw: Value) -> Value:
    """Diagonal of the damping matrix, ``softplus(raw)``, shape (1, h)."""
    return ad.softplus(raw)


# ---------------------------------------------------------------------- forcing

@dataclass
class ForcingLayer:
    node_w: Value   # (h, h), applied as q @ node_w
    edge_w: Value   # (h, h), applied to q_j - q_i
    edge_proj: Value  # (edge_dim, h), projects static edge features


@dataclass
class ForcingParams:
    layers: list
    out_w: Value | None = None

    @property
    def n_layers(self) -> int:
        return len(self.layers)


def static_edge_terms(params: ForcingParams, graph: Graph, ops: GraphOps) -> list:
    """Per layer ``sum_j proj(e_ij)``; edge features never change, so compute once per rollout."""
    if params.n_layers and graph.edge_attr.shape[1] != params.layers[0].edge_proj.shape[0]:
        raise ValueError("edge feature dim disagrees with forcing projection")
    E = Value(graph.edge_attr.astype(ops.degree.dtype))
    return [ad.scatter_sum(ad.matmul(E, lay.edge_proj), graph.dst, graph.n_nodes) for lay in params.layers]


def forcing(params: ForcingParams, q: Value, graph: Graph, ops: GraphOps | None = None, edge_terms=None) -> Value | None:
    """Geometric forcing ``r(q)``; returns ``None`` when there are no layers."""
    if params.n_layers == 0:
        return None
    if graph.edge_attr is None or graph.edge_attr.size == 0 and graph.n_edges:
        raise ValueError("forcing requires edge features")
    ops = ops or GraphOps(graph, dtype=q.dtype)
    if edge_terms is None:
        edge_terms = static_edge_terms(params, graph, ops)
    h = q
    for lay, eterm in zip(params.layers, edge_terms):
        diff = ad.sub(ops.agg(h), ad.mul(ops.degree, h))
        pre = ad.add(ad.add(ad.matmul(h, lay.node_w), ad.matmul(diff, lay.edge_w)), eterm)
        h = ad.tanh(pre)
    return ad.matmul(h, params.out_w) if params.out_w is not None else h


# -------------------------------------------------------------------- integrator

def symplectic_step(H, state: LatentState, dt: float, damping: Value | None = None,
                    force: Value | None = None, advance: bool = True) -> LatentState:
    """One symplectic Euler step of the port-Hamiltonian system.

    ``p' = p + dt (-dH/dq(q, p) - D dH/dp(q, p) + r)`` then
    ``q' = q + dt dH/dp(q, p')``. ``H`` supplies ``grad_q`` and ``grad_p``.
    """
    if dt < 0:
        raise ValueError("dt must be non-negative")
    q, p = state.q, state.p
    gq = H.grad_q(q, p)
    rate = ad.neg(gq)
    if damping is not None:
        rate = ad.sub(rate, ad.mul(damping, H.grad_p(q, p)))
    if force is not None:
        rate = ad.add(rate, force)
    p_new = ad.add(p, ad.scale(rate, dt))
    q_new = ad.add(q, ad.scale(H.grad_p(q, p_new), dt))
    if not (np.isfinite(p_new.data).all() and np.isfinite(q_new.data).all()):
        raise ad.NonFiniteError(f"non-finite latent state after step {state.t_index}")
    return LatentState(q_new, p_new, state.t_index + (1 if advance else 0))


def explicit_euler_step(H, state: LatentState, dt: float) -> LatentState:
    """Forward Euler on the conservative system; a non-symplectic control."""
    q, p = state.q, state.p
    gq, gp = H.grad_q(q, p), H.grad_p(q, p)
    return LatentState(ad.add(q, ad.scale(gp, dt)), ad.sub(p, ad.scale(gq, dt)), state.t_index + 1)


def warmup(step_fn, state: LatentState, n_steps: int) -> LatentState:
    """Apply ``n_steps`` updates without advancing time.

    ``step_fn(state)`` must evaluate the dynamics at ``state.t_index`` and
    return a state with the same index.
    """
    if n_steps < 0:
        raise ValueError("warmup steps must be non-negative")
    t0 = state.t_index
    for _ in range(n_steps):
        state = step_fn(state)
        state.t_index = t0
    return state
