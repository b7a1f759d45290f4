"""Graphs, trajectories and the on-disk dataset format.

A dataset is a directory::

    manifest.json        schema-versioned description (format_version 1)
    traj_<id>.bin        (T+1) x n x (q + v) little-endian floats, time-major
    cond_<id>.bin        n x cond per-trajectory static node conditions (optional)

Element ``c`` of node ``i`` at frame ``t`` sits at flat index
``((t * n) + i) * channels + c``.
"""

from __future__ import annotations

import json
import os
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

FORMAT_VERSION = 1
NODE_TYPES = ("interior", "boundary", "source")
_DTYPES = {"float32": "<f4", "float64": "<f8"}


class DataFormatError(ValueError):
    """Malformed manifest or payload that disagrees with it."""


def edge_features(pos: np.ndarray, src: np.ndarray, dst: np.ndarray) -> np.ndarray:
    """Per-edge ``[pos_dst - pos_src, |pos_dst - pos_src|]``.

    For an edge carrying a message from ``src`` (neighbor j) into ``dst``
    (receiver i) the displacement is ``pos_j - pos_i``.
    """
    s = pos[src] - pos[dst]
    d = np.sqrt(np.sum(s * s, axis=1, keepdims=True))
    return np.concatenate([s, d], axis=1)


@dataclass(frozen=True, eq=False)
class Graph:
    """Static directed graph with mesh positions and precomputed edge features.

    Edge ``e`` sends a message from ``src[e]`` into ``dst[e]``, so the
    neighbors of node ``i`` are ``src[dst == i]``. Edges are sorted by
    ``(dst, src)``.
    """

    n_nodes: int
    src: np.ndarray
    dst: np.ndarray
    pos: np.ndarray
    node_attr: np.ndarray
    edge_attr: np.ndarray
    in_degree: np.ndarray = field(repr=False)

    @classmethod
    def from_edges(cls, n_nodes: int, edges, pos, node_attr=None) -> "Graph":
        edges = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
        pos = np.asarray(pos, dtype=np.float64)
        if pos.ndim == 1:
            pos = pos[:, None]
        if pos.shape[0] != n_nodes or not 1 <= pos.shape[1] <= 3:
            raise ValueError("positions must be n_nodes x {1,2,3}")
        if edges.size and (edges.min() < 0 or edges.max() >= n_nodes):
            raise ValueError("edge index out of range")
        order = np.lexsort((edges[:, 0], edges[:, 1]))
        edges = edges[order]
        if len(edges) > 1 and np.any(np.all(edges[1:] == edges[:-1], axis=1)):
            raise ValueError("duplicate edges")
        src = np.ascontiguousarray(edges[:, 0])
        dst = np.ascontiguousarray(edges[:, 1])
        if node_attr is None:
            node_attr = np.zeros((n_nodes, len(NODE_TYPES)))
            node_attr[:, 0] = 1.0
        node_attr = np.asarray(node_attr, dtype=np.float64).reshape(n_nodes, -1)
        deg = np.bincount(dst, minlength=n_nodes).astype(np.float64)[:, None]
        return cls(n_nodes, src, dst, pos, node_attr, edge_features(pos, src, dst), deg)

    @property
    def n_edges(self) -> int:
        return int(self.src.shape[0])

    @property
    def edge_dim(self) -> int:
        return int(self.edge_attr.shape[1])

    def neighbors(self, i: int) -> np.ndarray:
        return self.src[self.dst == i]

    def validate(self) -> None:
        if self.src.size and (self.src.min() < 0 or self.src.max() >= self.n_nodes
                              or self.dst.min() < 0 or self.dst.max() >= self.n_nodes):
            raise DataFormatError("edge index out of range")
        key = self.dst * self.n_nodes + self.src
        if np.any(np.diff(key) <= 0):
            raise DataFormatError("edges not sorted by (dst, src)")
        if not np.array_equal(self.edge_attr, edge_features(self.pos, self.src, self.dst)):
            raise DataFormatError("edge features disagree with positions")

    def permute(self, perm) -> "Graph":
        """Relabel node ``i`` as ``perm[i]``."""
        perm = np.asarray(perm, dtype=np.int64)
        inv = np.empty_like(perm)
        inv[perm] = np.arange(perm.size)
        edges = np.stack([perm[self.src], perm[self.dst]], axis=1)
        return Graph.from_edges(self.n_nodes, edges, self.pos[inv], self.node_attr[inv])

    def hop_distances(self) -> np.ndarray:
        """All-pairs shortest path length on the undirected graph (-1 if unreachable)."""
        adj = [[] for _ in range(self.n_nodes)]
        for s, d in zip(self.src.tolist(), self.dst.tolist()):
            adj[s].append(d)
            adj[d].append(s)
        out = np.full((self.n_nodes, self.n_nodes), -1, dtype=np.int64)
        for root in range(self.n_nodes):
            out[root, root] = 0
            queue = deque([root])
            while queue:
                u = queue.popleft()
                for w in adj[u]:
                    if out[root, w] < 0:
                        out[root, w] = out[root, u] + 1
                        queue.append(w)
        return out

    def to_json(self) -> dict:
        return {
            "n_nodes": self.n_nodes,
            "src": self.src.tolist(),
            "dst": self.dst.tolist(),
            "pos": self.pos.tolist(),
            "node_attr": self.node_attr.tolist(),
            "edge_attr": self.edge_attr.tolist(),
        }

    @classmethod
    def from_json(cls, obj: dict) -> "Graph":
        try:
            n = int(obj["n_nodes"])
            edges = np.stack([np.asarray(obj["src"], dtype=np.int64),
                              np.asarray(obj["dst"], dtype=np.int64)], axis=1)
            g = cls.from_edges(n, edges, np.asarray(obj["pos"]), np.asarray(obj["node_attr"]))
            stored = np.asarray(obj["edge_attr"], dtype=np.float64).reshape(g.edge_attr.shape)
        except (KeyError, TypeError, ValueError) as exc:
            raise DataFormatError(f"malformed graph record: {exc}") from exc
        if not np.array_equal(stored, g.edge_attr):
            raise DataFormatError("stored edge features disagree with positions")
        return g


def disjoint_union(graphs) -> Graph:
    """Block-diagonal union of graphs, used to batch several samples."""
    edges, pos, attr, off = [], [], [], 0
    for g in graphs:
        edges.append(np.stack([g.src + off, g.dst + off], axis=1))
        pos.append(g.pos)
        attr.append(g.node_attr)
        off += g.n_nodes
    return Graph.from_edges(off, np.concatenate(edges), np.concatenate(pos), np.concatenate(attr))


def build_grid_graph(rows: int, cols: int, connectivity: int = 4) -> Graph:
    """Bidirectional lattice graph on unit-spaced positions.

    Node ``r * cols + c`` sits at ``(c, r)``. Outermost nodes are typed as
    boundary.
    """
    if rows < 2 or cols < 2:
        raise ValueError("grid needs at least 2 rows and 2 columns")
    if connectivity not in (4, 8):
        raise ValueError("connectivity must be 4 or 8")
    steps = [(0, 1), (1, 0)] + ([(1, 1), (1, -1)] if connectivity == 8 else [])
    edges = []
    for r in range(rows):
        for c in range(cols):
            for dr, dc in steps:
                rr, cc = r + dr, c + dc
                if 0 <= rr < rows and 0 <= cc < cols:
                    a, b = r * cols + c, rr * cols + cc
                    edges += [(a, b), (b, a)]
    rr, cc = np.divmod(np.arange(rows * cols), cols)
    pos = np.stack([cc, rr], axis=1).astype(np.float64)
    boundary = (rr == 0) | (rr == rows - 1) | (cc == 0) | (cc == cols - 1)
    attr = np.zeros((rows * cols, len(NODE_TYPES)))
    attr[~boundary, 0] = 1.0
    attr[boundary, 1] = 1.0
    return Graph.from_edges(rows * cols, edges, pos, attr)


def build_path_graph(n: int) -> Graph:
    """Bidirectional path 0 - 1 - ... - (n-1) on the unit-spaced line."""
    if n < 2:
        raise ValueError("path needs at least 2 nodes")
    edges = [(i, i + 1) for i in range(n - 1)] + [(i + 1, i) for i in range(n - 1)]
    attr = np.zeros((n, len(NODE_TYPES)))
    attr[:, 0] = 1.0
    attr[[0, n - 1]] = [0.0, 1.0, 0.0]
    return Graph.from_edges(n, edges, np.arange(n, dtype=np.float64)[:, None], attr)


# ------------------------------------------------------------------ trajectories

@dataclass
class Trajectory:
    """Ground-truth node states, frames ``0..T``.

    ``q`` has shape (T+1, n, cq); ``v`` (optional) the same leading shape.
    ``cond`` holds per-trajectory static node conditions, shape (n, cc).
    """

    q: np.ndarray
    dt: float
    v: np.ndarray | None = None
    cond: np.ndarray | None = None

    def __post_init__(self):
        if self.q.ndim != 3 or self.q.shape[0] < 2:
            raise ValueError("q must have shape (T+1, n, channels) with T >= 1")
        if not self.dt > 0:
            raise ValueError("dt must be positive")
        if self.v is not None and self.v.shape[:2] != self.q.shape[:2]:
            raise ValueError("velocity frames must match q frames")
        for name in ("q", "v", "cond"):
            a = getattr(self, name)
            if a is not None and not np.isfinite(a).all():
                raise ValueError(f"non-finite entries in {name}")

    @property
    def horizon(self) -> int:
        return self.q.shape[0] - 1

    @property
    def n_nodes(self) -> int:
        return self.q.shape[1]

    def state(self) -> np.ndarray:
        """q and v channels concatenated, shape (T+1, n, cq + cv)."""
        return self.q if self.v is None else np.concatenate([self.q, self.v], axis=2)


@dataclass
class DatasetManifest:
    name: str
    n_trajectories: int
    horizon: int
    window: int
    dt: float
    q_dim: int
    v_dim: int
    cond_dim: int
    attr_dim: int
    edge_dim: int
    splits: dict
    mean: list
    std: list
    graph: Graph
    lagrangian: bool = False
    dtype: str = "float32"
    generator: dict = field(default_factory=dict)

    _REQUIRED = ("format_version", "name", "n_trajectories", "horizon", "window", "dt",
                 "node_dims", "edge_dims", "splits", "normalization", "graph")

    def __post_init__(self):
        ids = [i for k in ("train", "val", "test") for i in self.splits.get(k, [])]
        if len(ids) != len(set(ids)):
            raise DataFormatError("splits overlap")
        if any(i < 0 or i >= self.n_trajectories for i in ids):
            raise DataFormatError("split id out of range")
        if any(s <= 0 for s in self.std):
            raise DataFormatError("normalization std must be positive")
        if self.dtype not in _DTYPES:
            raise DataFormatError(f"unsupported dtype {self.dtype}")
        if not 1 <= self.window <= self.horizon:
            raise DataFormatError("window must lie in [1, horizon]")

    @property
    def state_dim(self) -> int:
        return self.q_dim + self.v_dim

    def to_json(self) -> dict:
        return {
            "format_version": FORMAT_VERSION,
            "name": self.name,
            "n_trajectories": self.n_trajectories,
            "horizon": self.horizon,
            "window": self.window,
            "dt": self.dt,
            "dtype": self.dtype,
            "lagrangian": self.lagrangian,
            "node_dims": {"q": self.q_dim, "v": self.v_dim, "cond": self.cond_dim, "attr": self.attr_dim},
            "edge_dims": self.edge_dim,
            "splits": {k: list(map(int, v)) for k, v in self.splits.items()},
            "normalization": {"mean": [float(x) for x in self.mean], "std": [float(x) for x in self.std]},
            "graph": self.graph.to_json(),
            "generator": self.generator,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "DatasetManifest":
        missing = [k for k in cls._REQUIRED if k not in obj]
        if missing:
            raise DataFormatError(f"manifest missing fields: {missing}")
        if obj["format_version"] != FORMAT_VERSION:
            raise DataFormatError(f"unsupported format_version {obj['format_version']}")
        try:
            dims = obj["node_dims"]
            m = cls(
                name=str(obj["name"]),
                n_trajectories=int(obj["n_trajectories"]),
                horizon=int(obj["horizon"]),
                window=int(obj["window"]),
                dt=float(obj["dt"]),
                q_dim=int(dims["q"]),
                v_dim=int(dims.get("v", 0)),
                cond_dim=int(dims.get("cond", 0)),
                attr_dim=int(dims.get("attr", 0)),
                edge_dim=int(obj["edge_dims"]),
                splits={k: [int(i) for i in v] for k, v in obj["splits"].items()},
                mean=[float(x) for x in obj["normalization"]["mean"]],
                std=[float(x) for x in obj["normalization"]["std"]],
                graph=Graph.from_json(obj["graph"]),
                lagrangian=bool(obj.get("lagrangian", False)),
                dtype=str(obj.get("dtype", "float32")),
                generator=dict(obj.get("generator", {})),
            )
        except (KeyError, TypeError) as exc:
            raise DataFormatError(f"malformed manifest: {exc}") from exc
        if m.graph.edge_dim != m.edge_dim or m.graph.node_attr.shape[1] != m.attr_dim:
            raise DataFormatError("graph dimensions disagree with manifest")
        n_feat = m.q_dim + m.v_dim + m.cond_dim + (m.graph.pos.shape[1] if m.lagrangian else 0)
        if len(m.mean) != n_feat or len(m.std) != n_feat:
            raise DataFormatError("normalization length disagrees with feature channels")
        return m


def write_dataset(manifest: DatasetManifest, trajectories, directory) -> Path:
    """Write manifest and trajectories; returns the directory path."""
    directory = Path(directory)
    if len(trajectories) != manifest.n_trajectories:
        raise DataFormatError("trajectory count disagrees with manifest")
    out_dtype = _DTYPES[manifest.dtype]
    for k, tr in enumerate(trajectories):
        _check_traj(manifest, tr, k)
    directory.mkdir(parents=True, exist_ok=True)
    for k, tr in enumerate(trajectories):
        _atomic_write(directory / f"traj_{k}.bin", np.ascontiguousarray(tr.state(), dtype=out_dtype).tobytes())
        if manifest.cond_dim:
            _atomic_write(directory / f"cond_{k}.bin", np.ascontiguousarray(tr.cond, dtype=out_dtype).tobytes())
    text = json.dumps(manifest.to_json(), indent=1)
    _atomic_write(directory / "manifest.json", text.encode("utf-8"))
    return directory


def read_manifest(directory) -> DatasetManifest:
    path = Path(directory) / "manifest.json"
    if not path.is_file():
        raise FileNotFoundError(f"no manifest.json in {directory}")
    try:
        obj = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise DataFormatError(f"manifest is not valid JSON: {exc}") from exc
    return DatasetManifest.from_json(obj)


def read_dataset(directory, ids=None) -> tuple[DatasetManifest, list[Trajectory]]:
    """Load a dataset directory. ``ids`` restricts which trajectories are read."""
    directory = Path(directory)
    m = read_manifest(directory)
    ids = range(m.n_trajectories) if ids is None else ids
    dtype = np.dtype(_DTYPES[m.dtype])
    n, cs = m.graph.n_nodes, m.state_dim
    trajs = []
    for k in ids:
        raw = _read_array(directory / f"traj_{k}.bin", dtype)
        expect = (m.horizon + 1) * n * cs
        if raw.size != expect:
            raise DataFormatError(
                f"traj_{k}.bin holds {raw.size} values, manifest implies {expect} "
                f"({m.horizon + 1} frames x {n} nodes x {cs} channels)")
        state = raw.reshape(m.horizon + 1, n, cs)
        cond = None
        if m.cond_dim:
            cond = _read_array(directory / f"cond_{k}.bin", dtype)
            if cond.size != n * m.cond_dim:
                raise DataFormatError(f"cond_{k}.bin size disagrees with manifest")
            cond = cond.reshape(n, m.cond_dim)
        if not np.isfinite(state).all() or (cond is not None and not np.isfinite(cond).all()):
            raise DataFormatError(f"non-finite payload in trajectory {k}")
        v = state[:, :, m.q_dim:] if m.v_dim else None
        trajs.append(Trajectory(q=state[:, :, :m.q_dim], v=v, dt=m.dt, cond=cond))
    return m, trajs


def _read_array(path: Path, dtype) -> np.ndarray:
    if not path.is_file():
        raise DataFormatError(f"missing payload file {path.name}")
    return np.frombuffer(path.read_bytes(), dtype=dtype).astype(dtype.newbyteorder("="))


def _check_traj(m: DatasetManifest, tr: Trajectory, k: int):
    if tr.q.shape != (m.horizon + 1, m.graph.n_nodes, m.q_dim):
        raise DataFormatError(f"trajectory {k}: q shape {tr.q.shape} disagrees with manifest")
    vd = 0 if tr.v is None else tr.v.shape[2]
    if vd != m.v_dim:
        raise DataFormatError(f"trajectory {k}: velocity channels {vd} != {m.v_dim}")
    cd = 0 if tr.cond is None else tr.cond.shape[1]
    if cd != m.cond_dim:
        raise DataFormatError(f"trajectory {k}: cond channels {cd} != {m.cond_dim}")


def _atomic_write(path: Path, payload: bytes):
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(payload)
    os.replace(tmp, path)


# ----------------------------------------------------------------- normalization

def finite_difference_velocity(q: np.ndarray, dt: float) -> np.ndarray:
    """Backward differences along axis 0; frame 0 takes the forward difference."""
    if dt <= 0:
        raise ValueError("dt must be positive")
    q = np.asarray(q)
    if q.shape[0] < 2:
        raise ValueError("need at least two frames")
    out = np.empty_like(q)
    out[1:] = (q[1:] - q[:-1]) / dt
    out[0] = out[1]
    return out


def feature_frames(tr: Trajectory, lagrangian: bool = False, pos: np.ndarray | None = None) -> np.ndarray:
    """Per-frame encoder feature channels: q, v (finite-differenced if absent), cond, pos."""
    v = tr.v if tr.v is not None else finite_difference_velocity(tr.q, tr.dt)
    parts = [tr.q, v]
    frames = tr.q.shape[0]
    if tr.cond is not None:
        parts.append(np.broadcast_to(tr.cond, (frames,) + tr.cond.shape))
    if lagrangian:
        parts.append(np.broadcast_to(pos, (frames,) + pos.shape))
    return np.concatenate(parts, axis=2)


def compute_normalization(train_trajectories, lagrangian: bool = False, pos=None):
    """Channel mean and std over all nodes and frames of the training split.

    Std is clamped below at 1e-8; channels with zero variance get std 1.
    """
    trajs = list(train_trajectories)
    if not trajs:
        raise ValueError("training split is empty")
    blocks = [feature_frames(t, lagrangian, pos) for t in trajs]
    feats = np.concatenate([b.reshape(-1, b.shape[2]) for b in blocks]).astype(np.float64)
    mean = feats.mean(axis=0)
    var = feats.var(axis=0)
    std = np.maximum(np.sqrt(var), 1e-8)
    std[var == 0] = 1.0
    return mean, std


def normalize(x, mean, std):
    return (x - mean) / std


def unnormalize(x, mean, std):
    return x * std + mean


def split_ids(count: int, fractions=(0.70, 0.15, 0.15)) -> dict:
    n_train = int(round(fractions[0] * count))
    n_val = int(round(fractions[1] * count))
    n_val = min(n_val, count - n_train)
    ids = list(range(count))
    return {"train": ids[:n_train], "val": ids[n_train:n_train + n_val], "test": ids[n_train + n_val:]}
