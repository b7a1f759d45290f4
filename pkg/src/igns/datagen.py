"""Reference solvers and synthetic dataset generators.

Three tasks are available: ``wave_balls_mini`` (a 2-D wave equation driven
by moving Gaussian sources), ``mass_spring_lattice`` (a pinned plate of
masses and springs under static point loads) and ``diffusion_contrast`` (a
first-order heat equation). Every solver runs five substeps per stored frame.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .graphdata import (DatasetManifest, Trajectory, build_grid_graph, compute_normalization,
                        split_ids, write_dataset)

TASKS = ("wave_balls_mini", "mass_spring_lattice", "diffusion_contrast")
FORCE_CLAMP = 1e-12


class SolverError(ValueError):
    pass


# ------------------------------------------------------------------- grid stencil

def grid_laplacian(u: np.ndarray, h: float, boundary: str) -> np.ndarray:
    """5-point Laplacian of a (rows, cols) field; axes of length 1 are skipped.

    ``fixed`` treats the outermost nodes as Dirichlet (their Laplacian is
    zeroed). ``zero-flux`` copies edge values into ghost cells.
    """
    out = np.zeros_like(u)
    for ax in (0, 1):
        if u.shape[ax] < 2:
            continue
        pad = [(0, 0), (0, 0)]
        pad[ax] = (1, 1)
        up = np.pad(u, pad, mode="edge")
        lo = np.take(up, range(0, u.shape[ax]), axis=ax)
        hi = np.take(up, range(2, u.shape[ax] + 2), axis=ax)
        out += lo + hi - 2.0 * u
    out /= h * h
    if boundary == "fixed":
        out[boundary_mask(u.shape)] = 0.0
    return out


def boundary_mask(shape) -> np.ndarray:
    m = np.zeros(shape, dtype=bool)
    for ax in (0, 1):
        if shape[ax] < 2:
            continue
        idx = [slice(None), slice(None)]
        idx[ax] = 0
        m[tuple(idx)] = True
        idx[ax] = -1
        m[tuple(idx)] = True
    return m


def grid_gradient_energy(u: np.ndarray, h: float) -> float:
    """``sum over grid edges of (du / h)^2``."""
    e = 0.0
    for ax in (0, 1):
        if u.shape[ax] > 1:
            e += float(np.sum((np.diff(u, axis=ax) / h) ** 2))
    return e


# ----------------------------------------------------------------------- wave

@dataclass
class GaussianSource:
    x: float
    y: float
    vx: float = 0.0
    vy: float = 0.0
    amplitude: float = 1.0
    width: float = 1.5

    def field(self, X, Y, t: float) -> np.ndarray:
        cx, cy = self.x + self.vx * t, self.y + self.vy * t
        g = self.amplitude * np.exp(-((X - cx) ** 2 + (Y - cy) ** 2) / (2.0 * self.width ** 2))
        g[np.abs(g) < FORCE_CLAMP] = 0.0
        return g


@dataclass
class WaveConfig:
    rows: int = 16
    cols: int = 16
    c: float = 1.0
    dt: float = 0.5              # stored frame interval
    horizon: int = 50
    damping: float = 0.0
    boundary: str = "fixed"
    spacing: float = 1.0
    substeps: int = 5
    sources: list = field(default_factory=list)
    u0: np.ndarray | None = None
    v0: np.ndarray | None = None

    def __post_init__(self):
        if self.boundary not in ("fixed", "zero-flux"):
            raise ValueError("boundary must be 'fixed' or 'zero-flux'")
        if self.rows < 1 or self.cols < 1 or self.rows * self.cols < 2:
            raise ValueError("grid too small")
        if self.dt <= 0 or self.substeps < 1 or self.spacing <= 0:
            raise ValueError("dt, spacing and substeps must be positive")
        if self.cfl > 1.0 / np.sqrt(2.0) + 1e-12:
            raise SolverError(f"CFL number {self.cfl:.4f} exceeds 1/sqrt(2)")
        self.sources = [s if isinstance(s, GaussianSource) else GaussianSource(**s) for s in self.sources]

    @property
    def cfl(self) -> float:
        return self.c * (self.dt / self.substeps) / self.spacing

    def coordinates(self):
        rr, cc = np.meshgrid(np.arange(self.rows), np.arange(self.cols), indexing="ij")
        return cc * self.spacing, rr * self.spacing

    def echo(self) -> dict:
        d = asdict(self)
        d.pop("u0"), d.pop("v0")
        return d


def wave_energy(u, v, c, h) -> float:
    return 0.5 * float(np.sum(v * v)) + 0.5 * c * c * grid_gradient_energy(u, h)


def simulate_wave(config: WaveConfig) -> Trajectory:
    """Leapfrog (velocity Verlet) integration of ``u_tt = c^2 lap u + f - damping u_t``.

    Damping uses the half-step velocity. Returns frames of ``u`` and ``u_t``
    flattened row-major, matching :func:`igns.graphdata.build_grid_graph`.
    """
    cfg = config
    shape = (cfg.rows, cfg.cols)
    X, Y = cfg.coordinates()
    u = np.zeros(shape) if cfg.u0 is None else np.array(cfg.u0, dtype=np.float64).reshape(shape)
    v = np.zeros(shape) if cfg.v0 is None else np.array(cfg.v0, dtype=np.float64).reshape(shape)
    fixed = boundary_mask(shape) if cfg.boundary == "fixed" else None
    if fixed is not None:
        u[fixed] = 0.0
        v[fixed] = 0.0
    h = cfg.dt / cfg.substeps
    c2 = cfg.c ** 2

    def accel(u, t, v_half):
        a = c2 * grid_laplacian(u, cfg.spacing, cfg.boundary)
        for s in cfg.sources:
            a += s.field(X, Y, t)
        if cfg.damping:
            a -= cfg.damping * v_half
        if fixed is not None:
            a[fixed] = 0.0
        return a

    us, vs = [u.copy()], [v.copy()]
    t = 0.0
    a = accel(u, t, v)
    for _ in range(cfg.horizon):
        for _ in range(cfg.substeps):
            v_half = v + 0.5 * h * a
            u = u + h * v_half
            t += h
            a = accel(u, t, v_half)
            v = v_half + 0.5 * h * a
        if not (np.isfinite(u).all() and np.isfinite(v).all()):
            raise SolverError("non-finite wave field")
        us.append(u.copy())
        vs.append(v.copy())
    n = cfg.rows * cfg.cols
    return Trajectory(q=np.stack(us).reshape(-1, n, 1), v=np.stack(vs).reshape(-1, n, 1), dt=cfg.dt)


# ----------------------------------------------------------------- mass-spring

def lattice_stiffness(rows: int, cols: int, k: float = 1.0, ground: float = 0.0) -> np.ndarray:
    g = build_grid_graph(rows, cols)
    n = g.n_nodes
    K = np.zeros((n, n))
    np.add.at(K, (g.dst, g.src), -k)
    K[np.diag_indices(n)] = k * g.in_degree[:, 0] + ground
    return K


def system_matrix(M, K) -> np.ndarray:
    """First-order form ``[[0, I], [-M^-1 K, 0]]`` of the undamped oscillator."""
    M, K = np.atleast_2d(M), np.atleast_2d(K)
    n = K.shape[0]
    A = np.zeros((2 * n, 2 * n))
    A[:n, n:] = np.eye(n)
    A[n:, :n] = -np.linalg.solve(M, K)
    return A


@dataclass
class MassSpringConfig:
    """Masses on a lattice joined by springs; stiffness is built from the graph Laplacian.

    ``K`` and ``M`` may be given directly (then ``rows``/``cols`` only
    label the graph). ``pinned`` freezes boundary nodes.
    """

    rows: int = 8
    cols: int = 8
    mass: float | np.ndarray = 1.0
    k: float = 1.0
    ground: float = 0.0
    damping: float | np.ndarray = 0.05
    pinned: bool = True
    dt: float = 0.1
    horizon: int = 40
    substeps: int = 5
    q0: np.ndarray | None = None
    v0: np.ndarray | None = None
    forces: np.ndarray | None = None
    K: np.ndarray | None = None

    def __post_init__(self):
        n = self.n
        m = np.broadcast_to(np.asarray(self.mass, dtype=np.float64), (n,))
        if not (m > 0).all():
            raise SolverError("masses must be positive")
        d = np.broadcast_to(np.asarray(self.damping, dtype=np.float64), (n,))
        if (d < 0).any():
            raise SolverError("damping must be non-negative")
        if self.dt <= 0 or self.substeps < 1:
            raise ValueError("dt and substeps must be positive")
        if not self.pinned and self.ground <= 0 and self.K is None:
            raise SolverError("stiffness is singular: pin the boundary or add ground springs")

    @property
    def n(self) -> int:
        return self.K.shape[0] if self.K is not None else self.rows * self.cols

    def matrices(self):
        n = self.n
        K = self.K if self.K is not None else lattice_stiffness(self.rows, self.cols, self.k, self.ground)
        m = np.broadcast_to(np.asarray(self.mass, dtype=np.float64), (n,)).copy()
        d = np.broadcast_to(np.asarray(self.damping, dtype=np.float64), (n,)).copy()
        free = np.ones(n, dtype=bool)
        if self.pinned and self.K is None:
            free = ~boundary_mask((self.rows, self.cols)).ravel()
        return m, np.asarray(K, dtype=np.float64), d, free

    def echo(self) -> dict:
        return {k: (v.tolist() if isinstance(v, np.ndarray) else v) for k, v in asdict(self).items()
                if k not in ("q0", "v0", "forces", "K")}


def spring_energy(q, v, m, K) -> float:
    return 0.5 * float(np.sum(m * v * v)) + 0.5 * float(q @ K @ q)


def simulate_mass_spring(config: MassSpringConfig, return_energy: bool = False):
    """Semi-implicit Euler on ``M q'' = -K q - D q' + r``: velocity first, then position."""
    cfg = config
    m, K, d, free = cfg.matrices()
    n = cfg.n
    q = np.zeros(n) if cfg.q0 is None else np.array(cfg.q0, dtype=np.float64).ravel()
    v = np.zeros(n) if cfg.v0 is None else np.array(cfg.v0, dtype=np.float64).ravel()
    r = np.zeros(n) if cfg.forces is None else np.array(cfg.forces, dtype=np.float64).ravel()
    q[~free] = 0.0
    v[~free] = 0.0
    h = cfg.dt / cfg.substeps
    qs, vs, es = [q.copy()], [v.copy()], [spring_energy(q, v, m, K)]
    for _ in range(cfg.horizon):
        for _ in range(cfg.substeps):
            v = v + h * (-(K @ q) - d * v + r) / m
            v[~free] = 0.0
            q = q + h * v
            if return_energy:
                es.append(spring_energy(q, v, m, K))
        if not (np.isfinite(q).all() and np.isfinite(v).all()):
            raise SolverError("non-finite mass-spring state")
        qs.append(q.copy())
        vs.append(v.copy())
    cond = r[:, None] if cfg.forces is not None else None
    tr = Trajectory(q=np.stack(qs)[:, :, None], v=np.stack(vs)[:, :, None], dt=cfg.dt, cond=cond)
    return (tr, np.array(es)) if return_energy else tr


# ------------------------------------------------------------------ diffusion

@dataclass
class DiffusionConfig:
    rows: int = 16
    cols: int = 16
    kappa: float = 1.0
    dt: float = 0.25
    horizon: int = 50
    spacing: float = 1.0
    substeps: int = 5
    boundary: str = "zero-flux"
    u0: np.ndarray | None = None

    def __post_init__(self):
        if self.kappa * (self.dt / self.substeps) / self.spacing ** 2 > 0.25 + 1e-12:
            raise SolverError("explicit heat step violates kappa dt / h^2 <= 1/4")

    def echo(self) -> dict:
        d = asdict(self)
        d.pop("u0")
        return d


def simulate_diffusion(config: DiffusionConfig) -> Trajectory:
    """Explicit Euler heat equation; emits ``u`` and its rate ``kappa lap u``."""
    cfg = config
    shape = (cfg.rows, cfg.cols)
    u = np.zeros(shape) if cfg.u0 is None else np.array(cfg.u0, dtype=np.float64).reshape(shape)
    h = cfg.dt / cfg.substeps
    us, rs = [u.copy()], [cfg.kappa * grid_laplacian(u, cfg.spacing, cfg.boundary)]
    for _ in range(cfg.horizon):
        for _ in range(cfg.substeps):
            u = u + h * cfg.kappa * grid_laplacian(u, cfg.spacing, cfg.boundary)
        us.append(u.copy())
        rs.append(cfg.kappa * grid_laplacian(u, cfg.spacing, cfg.boundary))
    n = cfg.rows * cfg.cols
    return Trajectory(q=np.stack(us).reshape(-1, n, 1), v=np.stack(rs).reshape(-1, n, 1), dt=cfg.dt)


# ------------------------------------------------------------------- datasets

def _sample_wave(rng, rows, cols, horizon, dt):
    span = horizon * dt
    sources = []
    for _ in range(3):
        x0 = rng.uniform(1.0, 0.3 * (cols - 1))
        y0 = rng.uniform(2.0, rows - 3.0)
        vx = rng.uniform(0.3, 0.6) * (cols - 1) / span
        vy = rng.uniform(-0.1, 0.1) * (rows - 1) / span
        sources.append(GaussianSource(x0, y0, vx, vy, 1.0, 1.5))
    return sources


def _wave_cond(cfg: WaveConfig) -> np.ndarray:
    """Per-node source field at t=0 plus its velocity-weighted copies."""
    X, Y = cfg.coordinates()
    f = np.zeros_like(X, dtype=np.float64)
    fx, fy = f.copy(), f.copy()
    for s in cfg.sources:
        g = s.field(X, Y, 0.0)
        f += g
        fx += s.vx * g
        fy += s.vy * g
    return np.stack([f.ravel(), fx.ravel(), fy.ravel()], axis=1)


def _sample_forces(rng, rows, cols, n_loads=3):
    interior = np.flatnonzero(~boundary_mask((rows, cols)).ravel())
    idx = rng.choice(interior, size=n_loads, replace=False)
    r = np.zeros(rows * cols)
    r[idx] = rng.uniform(-1.0, 1.0, size=n_loads)
    return r


def _sample_bumps(rng, rows, cols, n=3):
    rr, cc = np.meshgrid(np.arange(rows), np.arange(cols), indexing="ij")
    u = np.zeros((rows, cols))
    for _ in range(n):
        y, x = rng.uniform(0, rows - 1), rng.uniform(0, cols - 1)
        u += rng.uniform(-1, 1) * np.exp(-((cc - x) ** 2 + (rr - y) ** 2) / (2 * rng.uniform(1.0, 2.5) ** 2))
    return u


def validate_trajectory(task: str, tr: Trajectory, cfg) -> None:
    """Re-check solver invariants on a generated trajectory."""
    if not (np.isfinite(tr.q).all() and np.isfinite(tr.v).all()):
        raise SolverError("non-finite trajectory")
    if task == "wave_balls_mini" and cfg.cfl > 1.0 / np.sqrt(2.0) + 1e-12:
        raise SolverError("CFL violated")
    if task == "diffusion_contrast":
        u0 = tr.q[0]
        if tr.q.max() > u0.max() + 1e-9 or tr.q.min() < u0.min() - 1e-9:
            raise SolverError("maximum principle violated")
    if task == "mass_spring_lattice" and cfg.forces is None:
        _, e = simulate_mass_spring(cfg, return_energy=True)
        if (np.diff(e) > 1e-12 * max(1.0, e[0])).any():
            raise SolverError("damped energy increased")


def generate_dataset(task: str, count: int, seed: int, out, dtype: str = "float32", **overrides) -> Path:
    """Simulate ``count`` randomized trajectories of ``task`` and write a dataset directory."""
    if task not in TASKS:
        raise ValueError(f"unknown task {task!r}; choose from {TASKS}")
    if count < 3:
        raise ValueError("count must be at least 3 to fill train/val/test")
    rng = np.random.default_rng(seed)
    trajs, lagrangian = [], False
    if task == "wave_balls_mini":
        base = dict(rows=16, cols=16, horizon=50, dt=0.5, c=1.0)
        base.update(overrides)
        for _ in range(count):
            cfg = WaveConfig(**base, sources=_sample_wave(rng, base["rows"], base["cols"], base["horizon"], base["dt"]))
            tr = simulate_wave(cfg)
            tr.cond = _wave_cond(cfg)
            validate_trajectory(task, tr, cfg)
            trajs.append(tr)
        echo = WaveConfig(**base).echo()
        rows, cols = base["rows"], base["cols"]
    elif task == "mass_spring_lattice":
        base = dict(rows=8, cols=8, horizon=40, dt=0.1, k=1.0, damping=0.05, pinned=True)
        base.update(overrides)
        lagrangian = True
        for _ in range(count):
            cfg = MassSpringConfig(**base, forces=_sample_forces(rng, base["rows"], base["cols"]))
            tr = simulate_mass_spring(cfg)
            validate_trajectory(task, tr, cfg)
            trajs.append(tr)
        echo = MassSpringConfig(**base).echo()
        rows, cols = base["rows"], base["cols"]
    else:
        base = dict(rows=16, cols=16, horizon=50, dt=0.25, kappa=1.0)
        base.update(overrides)
        for _ in range(count):
            cfg = DiffusionConfig(**base, u0=_sample_bumps(rng, base["rows"], base["cols"]))
            tr = simulate_diffusion(cfg)
            validate_trajectory(task, tr, cfg)
            trajs.append(tr)
        echo = DiffusionConfig(**base).echo()
        rows, cols = base["rows"], base["cols"]

    graph = build_grid_graph(rows, cols)
    splits = split_ids(count)
    mean, std = compute_normalization([trajs[i] for i in splits["train"]], lagrangian, graph.pos)
    tr0 = trajs[0]
    manifest = DatasetManifest(
        name=task, n_trajectories=count, horizon=tr0.horizon, window=tr0.horizon, dt=tr0.dt,
        q_dim=tr0.q.shape[2], v_dim=tr0.v.shape[2], cond_dim=0 if tr0.cond is None else tr0.cond.shape[1],
        attr_dim=graph.node_attr.shape[1], edge_dim=graph.edge_dim, splits=splits,
        mean=mean.tolist(), std=std.tolist(), graph=graph, lagrangian=lagrangian, dtype=dtype,
        generator={"task": task, "count": count, "seed": seed, "config": echo},
    )
    return write_dataset(manifest, trajs, out)
