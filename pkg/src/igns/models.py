"""Simulators built on the port-Hamiltonian core, plus two baselines.

Variants
--------
``igns``      time-varying Hamiltonian weights, damping and geometric forcing
``igns_ti``   the same with static weights
``graphcon``  ``q'' + alpha q' + gamma q = tanh(R(q))`` via symplectic Euler
``gcn``       first-order residual update ``x' = x + dt g(x)`` with GCN+LayerNorm layers
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import phcore as ph
from .autodiff import Value
from .graphdata import DataFormatError, Graph

VARIANTS = ("igns", "igns_ti", "graphcon", "gcn")
CKPT_MAGIC = b"IGNSCKPT"


@dataclass
class ModelConfig:
    variant: str = "igns_ti"
    latent_dim: int = 128
    hidden: int = 128
    forcing_layers: int = 1
    warmup: int = 0
    dt: float = 0.1
    damping: bool = True
    alpha: float = 1.0
    gamma: float = 1.0
    gcn_layers: int = 2
    time_embed_dim: int = ph.TIME_EMBED_DIM
    coef_hidden: int = 16
    in_dim: int = 0
    out_dim: int = 0
    edge_dim: int = 3
    horizon: int = 50
    precision: int = 64
    seed: int = 0

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}; choose from {VARIANTS}")
        if self.latent_dim % 2:
            raise ValueError("latent_dim must be even")
        if self.forcing_layers < 0 or self.warmup < 0:
            raise ValueError("forcing_layers and warmup must be non-negative")
        if self.variant == "graphcon" and (self.alpha < 0 or self.gamma < 0):
            raise ValueError("alpha and gamma must be non-negative")
        if self.precision not in (32, 64):
            raise ValueError("precision must be 32 or 64")

    @property
    def dtype(self):
        return np.float64 if self.precision == 64 else np.float32

    @classmethod
    def from_dict(cls, obj: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(obj) - known
        if unknown:
            raise ValueError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**obj)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class MLP:
    """``relu(x A1 + b1) A2 + b2``."""

    A1: Value
    b1: Value
    A2: Value
    b2: Value

    def __call__(self, x) -> Value:
        hid = ad.relu(ad.add(ad.matmul(x, self.A1), self.b1))
        return ad.add(ad.matmul(hid, self.A2), self.b2)


# ---------------------------------------------------------------- baseline steps

def graphcon_step(state: ph.LatentState, dt: float, alpha: float, gamma: float, force: Value | None,
                  advance: bool = True) -> ph.LatentState:
    """Symplectic Euler for ``q'' + alpha q' + gamma q = f``; ``force`` is ``tanh(R(q))`` or None.

    The arithmetic mirrors :func:`igns.phcore.symplectic_step` with the
    quadratic Hamiltonian ``1/2 (gamma |q|^2 + |p|^2)`` and ``D = alpha I``.
    """
    if alpha < 0 or gamma < 0:
        raise ValueError("alpha and gamma must be non-negative")
    q, p = state.q, state.p
    rate = ad.sub(ad.neg(ad.scale(q, gamma)), ad.mul(Value(np.full((1, p.shape[1]), alpha, dtype=p.dtype)), ad.scale(p, 1.0)))
    if force is not None:
        rate = ad.add(rate, force)
    p_new = ad.add(p, ad.scale(rate, dt))
    q_new = ad.add(q, ad.scale(ad.scale(p_new, 1.0), dt))
    if not (np.isfinite(p_new.data).all() and np.isfinite(q_new.data).all()):
        raise ad.NonFiniteError(f"non-finite state after step {state.t_index}")
    return ph.LatentState(q_new, p_new, state.t_index + (1 if advance else 0))


class GCNConv:
    """Symmetric-normalized graph convolution ``D^-1/2 (A + I) D^-1/2``."""

    def __init__(self, graph: Graph, dtype=np.float64):
        deg = graph.in_degree[:, 0] + 1.0
        self.graph = graph
        self.self_w = Value((1.0 / deg)[:, None].astype(dtype))
        self.edge_w = Value((1.0 / np.sqrt(deg[graph.src] * deg[graph.dst]))[:, None].astype(dtype))

    def __call__(self, h: Value) -> Value:
        g = self.graph
        msg = ad.mul(ad.gather(h, g.src), self.edge_w)
        return ad.add(ad.mul(h, self.self_w), ad.scatter_sum(msg, g.dst, g.n_nodes))


def gcn_step(x: Value, dt: float, layers, conv: GCNConv) -> Value:
    """``x' = x + dt g(x)`` with ``g`` a stack of ``tanh(LN(conv(h) W + b) * s + c)`` layers."""
    h = x
    for W, b, s, c in layers:
        h = ad.tanh(ad.add(ad.mul(ad.layernorm(ad.add(ad.matmul(conv(h), W), b)), s), c))
    out = ad.add(x, ad.scale(h, dt))
    if not np.isfinite(out.data).all():
        raise ad.NonFiniteError("non-finite state in gcn_step")
    return out


# ------------------------------------------------------------------- simulator

@dataclass
class RolloutResult:
    outputs: list                 # per frame (n, out_dim) Values, physical units
    states: list = field(default_factory=list)
    energies: list = field(default_factory=list)


class Simulator:
    """Encoder, latent dynamics and decoder for one model variant.

    ``params`` maps stable names to leaf :class:`Value` objects; the
    structured views below share those objects.
    """

    def __init__(self, config: ModelConfig, out_mean=None, out_std=None, params: dict | None = None):
        if config.in_dim <= 0 or config.out_dim <= 0:
            raise ValueError("config.in_dim and config.out_dim must be set")
        self.config = config
        dt = config.dtype
        self.out_mean = np.zeros((1, config.out_dim), dt) if out_mean is None else np.asarray(out_mean, dt).reshape(1, -1)
        self.out_std = np.ones((1, config.out_dim), dt) if out_std is None else np.asarray(out_std, dt).reshape(1, -1)
        self.params = params if params is not None else init_params(config)
        self._build_views()

    # -- structure
    def _p(self, name):
        return self.params[name]

    def _mlp(self, prefix):
        return MLP(*(self._p(f"{prefix}.{k}") for k in ("A1", "b1", "A2", "b2")))

    def _build_views(self):
        c = self.config
        self.encoder = self._mlp("enc")
        self.decoder = self._mlp("dec")
        self.weights = None
        self.damping_raw = None
        self.forcing_params = ph.ForcingParams([])
        self.gcn_layers = []
        if c.variant in ("igns", "igns_ti", "graphcon"):
            layers = [ph.ForcingLayer(self._p(f"force.{k}.node_w"), self._p(f"force.{k}.edge_w"),
                                      self._p(f"force.{k}.edge_proj")) for k in range(c.forcing_layers)]
            out_w = self._p("force.out_w") if c.forcing_layers else None
            self.forcing_params = ph.ForcingParams(layers, out_w)
        if c.variant == "igns_ti":
            self.weights = ph.HamiltonianParams(*(self._p(f"ham.{k}") for k in ("Wq", "Wp", "Vq", "Vp", "bq", "bp")))
        elif c.variant == "igns":
            blocks = {}
            for k in ("Wq", "Wp", "Vq", "Vp"):
                nets = [ph.CoefficientNet(*(self._p(f"ham.{k}.{net}.{w}") for w in ("A1", "c1", "A2", "c2")))
                        for net in ("gamma", "tau")]
                blocks[k] = ph.TimeVaryingBlock(self._p(f"ham.{k}.Us"), self._p(f"ham.{k}.Ua"),
                                                self._p(f"ham.{k}.Pa"), *nets)
            self.weights = ph.TimeVaryingBases(**blocks, bq=self._p("ham.bq"), bp=self._p("ham.bp"))
        elif c.variant == "gcn":
            self.gcn_layers = [tuple(self._p(f"gcn.{k}.{w}") for w in ("W", "b", "s", "c")) for k in range(c.gcn_layers)]
        if c.variant in ("igns", "igns_ti") and c.damping:
            self.damping_raw = self._p("damp.raw")

    @property
    def n_parameters(self) -> int:
        return int(sum(v.data.size for v in self.params.values()))

    def parameters(self):
        return list(self.params.values())

    # -- pieces
    def encode(self, inputs) -> ph.LatentState:
        inputs = inputs if isinstance(inputs, Value) else Value(np.asarray(inputs, dtype=self.config.dtype))
        if inputs.shape[1] != self.config.in_dim:
            raise ValueError(f"encoder expects {self.config.in_dim} channels, got {inputs.shape[1]}")
        z = self.encoder(inputs)
        if self.config.variant == "gcn":
            return ph.LatentState(z, None, 0)
        h = self.config.latent_dim // 2
        return ph.LatentState(ad.slice_(z, cols=slice(0, h)), ad.slice_(z, cols=slice(h, 2 * h)), 0)

    def decode(self, state: ph.LatentState, physical: bool = True) -> Value:
        z = state.q if state.p is None else ad.concat([state.q, state.p], axis=1)
        out = self.decoder(z)
        if physical:
            out = ad.add(ad.mul(out, self.out_std), self.out_mean)
        return out

    def _context(self, graph: Graph):
        ops = ph.GraphOps(graph, dtype=self.config.dtype)
        ctx = {"ops": ops, "graph": graph}
        if self.forcing_params.n_layers:
            ctx["edge_terms"] = ph.static_edge_terms(self.forcing_params, graph, ops)
        if self.damping_raw is not None:
            ctx["damping"] = ph.damping_matrix(self.damping_raw)
        if self.config.variant == "gcn":
            ctx["conv"] = GCNConv(graph, self.config.dtype)
        return ctx

    def hamiltonian_at(self, t_index: int, ctx) -> ph.LnCoshHamiltonian:
        cached = ctx.get("static_H")
        if cached is not None:
            return cached
        params = ph.assemble_weights(self.weights, t_index, self.config.horizon, self.config.time_embed_dim)
        H = ph.LnCoshHamiltonian(params, ctx["ops"])
        if self.config.variant == "igns_ti":
            ctx["static_H"] = H
        return H

    def step(self, state: ph.LatentState, ctx, advance: bool = True) -> ph.LatentState:
        c = self.config
        if c.variant == "gcn":
            x = gcn_step(state.q, c.dt, self.gcn_layers, ctx["conv"])
            return ph.LatentState(x, None, state.t_index + (1 if advance else 0))
        r = ph.forcing(self.forcing_params, state.q, ctx["graph"], ctx["ops"], ctx.get("edge_terms"))
        if c.variant == "graphcon":
            return graphcon_step(state, c.dt, c.alpha, c.gamma, None if r is None else ad.tanh(r), advance)
        H = self.hamiltonian_at(state.t_index, ctx)
        return ph.symplectic_step(H, state, c.dt, ctx.get("damping"), r, advance)

    def energy(self, state: ph.LatentState, ctx) -> float | None:
        if self.config.variant not in ("igns", "igns_ti"):
            return None
        with _no_tape():
            return self.hamiltonian_at(state.t_index, ctx).energy(Value(state.q.data), Value(state.p.data)).item()

    def rollout(self, graph: Graph, inputs, T: int, t0: int = 0, warmup: int | None = None,
                keep_states: bool = False, track_energy: bool = False) -> RolloutResult:
        """Encode, warm up, take ``T`` steps and decode every step (physical units)."""
        if T < 1:
            raise ValueError("rollout length T must be >= 1")
        n_warm = self.config.warmup if warmup is None else warmup
        ctx = self._context(graph)
        state = self.encode(inputs)
        state.t_index = t0
        state = ph.warmup(lambda s: self.step(s, ctx, advance=False), state, n_warm)
        res = RolloutResult([])
        for k in range(T):
            try:
                state = self.step(state, ctx)
            except ad.NonFiniteError as exc:
                raise ad.NonFiniteError(f"rollout diverged at step {k + 1}: {exc}") from exc
            res.outputs.append(self.decode(state))
            if keep_states:
                res.states.append(state)
            if track_energy:
                res.energies.append(self.energy(state, ctx))
        return res


class _no_tape:
    """Temporarily hide active tapes so evaluation is not recorded."""

    def __enter__(self):
        self._saved = list(ad._TAPES)
        ad._TAPES.clear()

    def __exit__(self, *exc):
        ad._TAPES.extend(self._saved)


# ---------------------------------------------------------------- initialization

def _glorot(rng, fan_in, fan_out, dtype):
    lim = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-lim, lim, size=(fan_in, fan_out)).astype(dtype)


def init_params(config: ModelConfig) -> dict:
    """Seeded parameter initialization; names are stable for checkpoints."""
    rng = np.random.default_rng(config.seed)
    dt = config.dtype
    d, h, hid = config.latent_dim, config.latent_dim // 2, config.hidden
    out: dict[str, Value] = {}

    def put(name, arr):
        out[name] = Value(np.asarray(arr, dtype=dt), requires_grad=True)

    def mlp(prefix, n_in, n_hid, n_out):
        put(f"{prefix}.A1", _glorot(rng, n_in, n_hid, dt))
        put(f"{prefix}.b1", np.zeros((1, n_hid)))
        put(f"{prefix}.A2", _glorot(rng, n_hid, n_out, dt))
        put(f"{prefix}.b2", np.zeros((1, n_out)))

    mlp("enc", config.in_dim, hid, d)
    mlp("dec", d, hid, config.out_dim)
    v = config.variant
    if v in ("igns", "igns_ti", "graphcon"):
        edge_dim = config.edge_dim
        for k in range(config.forcing_layers):
            put(f"force.{k}.node_w", _glorot(rng, h, h, dt))
            put(f"force.{k}.edge_w", 0.5 * _glorot(rng, h, h, dt))
            put(f"force.{k}.edge_proj", 0.1 * rng.standard_normal((edge_dim, h)))
        if config.forcing_layers:
            put("force.out_w", _glorot(rng, h, h, dt))
    if v == "igns_ti":
        for k in ("Wq", "Wp"):
            put(f"ham.{k}", _glorot(rng, h, h, dt))
        for k in ("Vq", "Vp"):
            put(f"ham.{k}", 0.5 * _glorot(rng, h, h, dt))
        put("ham.bq", np.zeros((1, h)))
        put("ham.bp", np.zeros((1, h)))
    elif v == "igns":
        te, ch = config.time_embed_dim, config.coef_hidden
        for k in ("Wq", "Wp", "Vq", "Vp"):
            sc = 1.0 if k[0] == "W" else 0.5
            for b in ("Us", "Ua", "Pa"):
                put(f"ham.{k}.{b}", sc * _glorot(rng, h, h, dt))
            for net, bias in (("gamma", 1.0), ("tau", 0.5)):
                put(f"ham.{k}.{net}.A1", _glorot(rng, te, ch, dt))
                put(f"ham.{k}.{net}.c1", np.zeros((1, ch)))
                put(f"ham.{k}.{net}.A2", 0.1 * _glorot(rng, ch, h, dt))
                put(f"ham.{k}.{net}.c2", np.full((1, h), bias))
        put("ham.bq", np.zeros((1, h)))
        put("ham.bp", np.zeros((1, h)))
    elif v == "gcn":
        for k in range(config.gcn_layers):
            put(f"gcn.{k}.W", _glorot(rng, d, d, dt))
            put(f"gcn.{k}.b", np.zeros((1, d)))
            put(f"gcn.{k}.s", np.ones((1, d)))
            put(f"gcn.{k}.c", np.zeros((1, d)))
    if v in ("igns", "igns_ti") and config.damping:
        put("damp.raw", np.full((1, h), -3.0))
    return out


# ------------------------------------------------------------------ checkpoints

def save_checkpoint(path, model: Simulator, step: int = 0, extra: dict | None = None) -> Path:
    """Binary checkpoint: magic, u64 header length, UTF-8 JSON header, LE float payload."""
    path = Path(path)
    code = "<f8" if model.config.precision == 64 else "<f4"
    entries, chunks, offset = [], [], 0
    for name, v in model.params.items():
        arr = np.ascontiguousarray(v.data, dtype=code)
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset})
        offset += arr.size
        chunks.append(arr.tobytes())
    header = {
        "format_version": 1,
        "config": model.config.to_dict(),
        "step": int(step),
        "dtype": "float64" if code == "<f8" else "float32",
        "n_parameters": model.n_parameters,
        "out_mean": model.out_mean.ravel().tolist(),
        "out_std": model.out_std.ravel().tolist(),
        "params": entries,
        "extra": extra or {},
    }
    hb = json.dumps(header).encode("utf-8")
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<Q", len(hb)))
        fh.write(hb)
        for c in chunks:
            fh.write(c)
    tmp.replace(path)
    return path


def load_checkpoint(path) -> tuple[Simulator, dict]:
    raw = Path(path).read_bytes()
    if raw[:8] != CKPT_MAGIC:
        raise DataFormatError("not a checkpoint file")
    (hlen,) = struct.unpack("<Q", raw[8:16])
    header = json.loads(raw[16:16 + hlen].decode("utf-8"))
    cfg = ModelConfig.from_dict(header["config"])
    code = "<f8" if header["dtype"] == "float64" else "<f4"
    payload = np.frombuffer(raw[16 + hlen:], dtype=code)
    params = {}
    for e in header["params"]:
        size = int(np.prod(e["shape"]))
        arr = payload[e["offset"]:e["offset"] + size].reshape(e["shape"]).astype(cfg.dtype)
        params[e["name"]] = Value(arr, requires_grad=True)
    model = Simulator(cfg, header["out_mean"], header["out_std"], params=params)
    expect = init_params_names(cfg)
    if list(params) != expect:
        raise DataFormatError("checkpoint parameters disagree with config")
    return model, header


def init_params_names(config: ModelConfig) -> list:
    probe = ModelConfig.from_dict({**config.to_dict()})
    return list(init_params(probe).keys())
