"""Multi-step training: windows, loss, Adam, and the loop that ties them together."""

from __future__ import annotations

import json
import logging
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Value
from .graphdata import (DataFormatError, DatasetManifest, Graph, disjoint_union, feature_frames,
                        finite_difference_velocity, read_dataset)
from .models import ModelConfig, Simulator, save_checkpoint

log = logging.getLogger(__name__)


class TrainingDivergedError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    lr: float = 5e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    window: int = 10
    batch_size: int = 4
    iterations: int = 1000
    eval_every: int = 100
    noise_std: float = 1e-2
    seed: int = 0
    precision: int = 64
    p_weight: float = 1.0
    clip_norm: float = 1.0
    max_val_trajectories: int | None = None

    def __post_init__(self):
        if self.window < 1:
            raise ValueError("window must be >= 1")
        if not self.lr >= 0:
            raise ValueError("lr must be non-negative")
        if self.batch_size < 1 or self.iterations < 0 or self.eval_every < 1:
            raise ValueError("batch_size and eval_every must be positive, iterations non-negative")
        if self.precision not in (32, 64):
            raise ValueError("precision must be 32 or 64")

    @classmethod
    def from_dict(cls, obj: dict) -> "TrainConfig":
        unknown = set(obj) - {f.name for f in fields(cls)}
        if unknown:
            raise ValueError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**obj)

    def to_dict(self) -> dict:
        return asdict(self)


# ------------------------------------------------------------------------ loss

def finite_difference_momenta(q, dt: float) -> np.ndarray:
    """Backward-difference rates ``(q_t - q_{t-1}) / dt``; frame 0 repeats the forward difference."""
    return finite_difference_velocity(q, dt)


def multi_step_loss(predictions, targets, q_dim: int | None = None, p_weight: float = 1.0,
                    batch: int = 1) -> Value:
    """Squared error summed over frames, nodes and channels, divided by ``batch``.

    ``predictions`` are Values and ``targets`` arrays, one (n, channels) pair
    per frame. Channels from ``q_dim`` on are momentum-like and weighted by
    ``p_weight``.
    """
    if len(predictions) != len(targets):
        raise ValueError(f"{len(predictions)} predicted frames vs {len(targets)} targets")
    if not predictions:
        raise ValueError("empty prediction window")
    total = None
    weight = None
    for pred, tgt in zip(predictions, targets):
        tgt = np.asarray(tgt, dtype=pred.dtype)
        if pred.shape != tgt.shape:
            raise ValueError(f"prediction shape {pred.shape} vs target {tgt.shape}")
        sq = ad.square(ad.sub(pred, Value(tgt)))
        if q_dim is not None and p_weight != 1.0:
            if weight is None:
                w = np.ones((1, pred.shape[1]), dtype=pred.dtype)
                w[0, q_dim:] = p_weight
                weight = Value(w)
            sq = ad.mul(sq, weight)
        term = ad.sum_all(sq)
        total = term if total is None else ad.add(total, term)
    return ad.scale(total, 1.0 / batch)


# ------------------------------------------------------------------------- Adam

@dataclass
class OptimState:
    m: list
    v: list
    step: int = 0

    @classmethod
    def zeros_like(cls, params) -> "OptimState":
        return cls([np.zeros_like(p.data) for p in params], [np.zeros_like(p.data) for p in params])


def adam_step(params, grads, state: OptimState, config: TrainConfig):
    """Bias-corrected Adam; updates ``params`` in place and returns them."""
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ValueError("params, grads and optimizer state are misaligned")
    for g in grads:
        if ad._STRICT[-1] and not np.isfinite(g).all():
            raise ad.NonFiniteError("non-finite gradient passed to adam_step")
    state.step += 1
    b1, b2 = config.beta1, config.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if g.shape != p.data.shape:
            raise ValueError(f"gradient shape {g.shape} != parameter shape {p.data.shape}")
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p.data -= (config.lr * (m / c1) / (np.sqrt(v / c2) + config.eps)).astype(p.data.dtype)
    return params


def clip_global_norm(grads, max_norm: float):
    norm = float(np.sqrt(sum(float(np.sum(g * g)) for g in grads)))
    if max_norm and norm > max_norm:
        f = max_norm / norm
        grads = [g * f for g in grads]
    return grads, norm


# -------------------------------------------------------------------- sampling

class WindowSampler:
    """Shuffled epochs over every (trajectory, start) pair.

    Windows cover frames ``start .. start + window``; the first is the input.
    """

    def __init__(self, n_trajectories: int, horizon: int, window: int, seed: int = 0):
        if n_trajectories < 1:
            raise ValueError("no trajectories to sample from")
        if window > horizon:
            raise ValueError(f"window {window} exceeds horizon {horizon}")
        self.pairs = [(k, s) for k in range(n_trajectories) for s in range(horizon - window + 1)]
        self.rng = np.random.default_rng(seed)
        self._queue: list = []
        self.epochs = 0

    def epoch(self) -> list:
        order = self.rng.permutation(len(self.pairs))
        self.epochs += 1
        return [self.pairs[i] for i in order]

    def next_batch(self, size: int) -> list:
        out = []
        while len(out) < size:
            if not self._queue:
                self._queue = self.epoch()
            out.append(self._queue.pop(0))
        return out


# ------------------------------------------------------------------------- data

@dataclass
class PreparedData:
    """Encoder inputs (normalized) and physical targets for every trajectory."""

    manifest: DatasetManifest
    inputs: list            # per trajectory (T+1, n, in_dim)
    targets: list           # per trajectory (T+1, n, out_dim)
    ids: list
    n_dynamic: int          # leading input channels that receive training noise

    @property
    def graph(self) -> Graph:
        return self.manifest.graph


def _attr_onehot(graph: Graph) -> np.ndarray:
    if graph.node_attr is None:
        return np.zeros((graph.n_nodes, 0))
    return np.asarray(graph.node_attr, dtype=np.float64)


def prepare(manifest: DatasetManifest, trajectories, ids) -> PreparedData:
    mean = np.asarray(manifest.mean, dtype=np.float64)
    std = np.asarray(manifest.std, dtype=np.float64)
    pos = manifest.graph.pos
    attr = _attr_onehot(manifest.graph)
    n_out = manifest.q_dim + (manifest.v_dim or manifest.q_dim)
    inputs, targets = [], []
    for tr in trajectories:
        feats = feature_frames(tr, manifest.lagrangian, pos).astype(np.float64)
        if feats.shape[2] != mean.size:
            raise DataFormatError(f"feature channels {feats.shape[2]} disagree with normalization ({mean.size})")
        x = (feats - mean) / std
        x = np.concatenate([x, np.broadcast_to(attr, (x.shape[0],) + attr.shape)], axis=2)
        inputs.append(x)
        targets.append(feats[:, :, :n_out])
    return PreparedData(manifest, inputs, targets, list(ids), n_out)


def model_config_for(manifest: DatasetManifest, base: ModelConfig | dict) -> ModelConfig:
    """Fill dataset-dependent widths into a model config."""
    d = base.to_dict() if isinstance(base, ModelConfig) else dict(base)
    n_out = manifest.q_dim + (manifest.v_dim or manifest.q_dim)
    attr = 0 if manifest.graph.node_attr is None else manifest.graph.node_attr.shape[1]
    d.update(in_dim=len(manifest.mean) + attr, out_dim=n_out, edge_dim=manifest.graph.edge_dim,
             horizon=manifest.horizon)
    return ModelConfig.from_dict(d)


def output_stats(manifest: DatasetManifest):
    n_out = manifest.q_dim + (manifest.v_dim or manifest.q_dim)
    return np.asarray(manifest.mean[:n_out]), np.asarray(manifest.std[:n_out])


class _BatchGraphs:
    def __init__(self, graph: Graph):
        self.graph = graph
        self._cache = {1: graph}

    def __call__(self, b: int) -> Graph:
        if b not in self._cache:
            self._cache[b] = disjoint_union([self.graph] * b)
        return self._cache[b]


# ------------------------------------------------------------------- evaluation

def predict(model: Simulator, data: PreparedData, which, T: int | None = None, warmup: int | None = None,
            batch: int = 8, track_energy: bool = False):
    """Full rollouts from frame 0 for trajectory positions ``which``; returns (k, T, n, C) and energies."""
    T = data.manifest.horizon if T is None else T
    n = data.graph.n_nodes
    graphs = _BatchGraphs(data.graph)
    outs, energies = [], []
    with ad.strict_mode(True):
        for s in range(0, len(which), batch):
            chunk = list(which[s:s + batch])
            x0 = np.concatenate([data.inputs[k][0] for k in chunk])
            res = model.rollout(graphs(len(chunk)), x0, T, warmup=warmup, track_energy=track_energy)
            arr = np.stack([o.data for o in res.outputs])            # (T, b*n, C)
            outs.append(arr.reshape(T, len(chunk), n, -1).transpose(1, 0, 2, 3))
            if track_energy:
                energies.append(res.energies)
    return np.concatenate(outs), energies


def rollout_errors(pred: np.ndarray, truth: np.ndarray) -> dict:
    """MSE summaries of (k, T, n, C) predictions against matching ground truth."""
    if pred.shape != truth.shape:
        raise DataFormatError(f"prediction shape {pred.shape} vs ground truth {truth.shape}")
    per_step = ((pred - truth) ** 2).mean(axis=(0, 2, 3))
    return {"mse": float(per_step.mean()), "mse10": float(per_step[:10].sum()), "per_step": per_step.tolist()}


def evaluate(model: Simulator, data: PreparedData, which=None, warmup: int | None = None,
             oracle: bool = False, batch: int = 8) -> dict:
    which = range(len(data.inputs)) if which is None else which
    which = list(which)
    truth = np.stack([data.targets[k][1:] for k in which])
    if oracle:
        pred, energies = truth.copy(), []
    else:
        pred, energies = predict(model, data, which, warmup=warmup, batch=batch, track_energy=True)
    out = rollout_errors(pred, truth)
    e = energies[0][:] if energies and energies[0] and energies[0][0] is not None else []
    out["energy"] = e[: data.manifest.horizon] if e else []
    out["n_trajectories"] = len(which)
    out["predictions"] = pred
    return out


# ------------------------------------------------------------------------ train

@dataclass
class TrainResult:
    model: Simulator
    metrics: list
    losses: list = field(default_factory=list)
    best_val: float = float("inf")
    out_dir: Path | None = None


def _window_batch(data: PreparedData, pairs, K, rng, noise):
    xs, tg = [], [[] for _ in range(K)]
    for k, s in pairs:
        x = data.inputs[k][s].copy()
        if noise > 0:
            x[:, :data.n_dynamic] += noise * rng.standard_normal((x.shape[0], data.n_dynamic))
        xs.append(x)
        for j in range(K):
            tg[j].append(data.targets[k][s + 1 + j])
    return np.concatenate(xs), [np.concatenate(t) for t in tg]


def train(dataset_dir, model_config: ModelConfig | dict, train_config: TrainConfig,
          out_dir=None, model: Simulator | None = None) -> TrainResult:
    """Train on the dataset's ``train`` split, validating on ``val``.

    ``val_loss`` is the mean squared error per frame of full-horizon rollouts
    on the validation split, in physical units. Batches of windows share the
    dataset graph, so a batch rolls out as one disjoint union.
    """
    tc = train_config
    manifest, _ = read_dataset(dataset_dir, ids=[])
    train_ids, val_ids = manifest.splits.get("train", []), manifest.splits.get("val", [])
    if not train_ids or not val_ids:
        raise DataFormatError("dataset needs non-empty train and val splits")
    if tc.max_val_trajectories:
        val_ids = val_ids[:tc.max_val_trajectories]
    _, tr_traj = read_dataset(dataset_dir, ids=train_ids)
    _, va_traj = read_dataset(dataset_dir, ids=val_ids)
    tr, va = prepare(manifest, tr_traj, train_ids), prepare(manifest, va_traj, val_ids)

    if model is None:
        cfg = model_config_for(manifest, model_config)
        cfg = ModelConfig.from_dict({**cfg.to_dict(), "precision": tc.precision})
        mean, std = output_stats(manifest)
        model = Simulator(cfg, mean, std)
    K = tc.window
    sampler = WindowSampler(len(tr.inputs), manifest.horizon, K, seed=tc.seed)
    noise_rng = np.random.default_rng(tc.seed + 1)
    graphs = _BatchGraphs(manifest.graph)
    params = model.parameters()
    opt = OptimState.zeros_like(params)
    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        metrics_path = out_dir / "metrics.jsonl"
        metrics_path.write_text("")
    res = TrainResult(model, [], out_dir=out_dir)
    window_losses = []
    t_start = time.perf_counter()

    def log_metrics(it):
        val = evaluate(model, va, batch=8)["mse"]
        rec = {"iter": it, "train_loss": float(np.mean(window_losses)) if window_losses else None,
               "val_loss": val, "wall_ms": int((time.perf_counter() - t_start) * 1000)}
        window_losses.clear()
        res.metrics.append(rec)
        if out_dir is not None:
            with open(metrics_path, "a") as fh:
                fh.write(json.dumps(rec) + "\n")
            if val < res.best_val:
                save_checkpoint(out_dir / "best.ckpt", model, it, {"val_loss": val})
        res.best_val = min(res.best_val, val)
        log.info("iter %d train %.4g val %.4g", it, rec["train_loss"] or float("nan"), val)

    for it in range(1, tc.iterations + 1):
        pairs = sampler.next_batch(tc.batch_size)
        B = len(pairs)
        x0, targets = _window_batch(tr, pairs, K, noise_rng, tc.noise_std)
        t0 = pairs[0][1]
        try:
            with ad.strict_mode(True), ad.Tape() as tape:
                if len({s for _, s in pairs}) == 1 or model.config.variant != "igns":
                    roll = model.rollout(graphs(B), x0, K, t0=t0)
                    loss = multi_step_loss(roll.outputs, targets, manifest.q_dim, tc.p_weight, B)
                else:
                    loss = _per_window_loss(model, tr, pairs, x0, targets, K, manifest, tc)
            grads_map = tape.backward(loss, wrt=params)
        except ad.NonFiniteError as exc:
            raise TrainingDivergedError(f"iteration {it}: {exc}") from exc
        lv = loss.item()
        if not np.isfinite(lv):
            raise TrainingDivergedError(f"iteration {it}: loss is {lv}")
        grads, _ = clip_global_norm([grads_map[p.id] for p in params], tc.clip_norm)
        adam_step(params, grads, opt, tc)
        res.losses.append(lv)
        window_losses.append(lv)
        if it == 1 or it % tc.eval_every == 0 or it == tc.iterations:
            log_metrics(it)
    if tc.iterations == 0:
        log_metrics(0)
    if out_dir is not None:
        save_checkpoint(out_dir / "last.ckpt", model, tc.iterations)
        if not (out_dir / "best.ckpt").exists():
            save_checkpoint(out_dir / "best.ckpt", model, tc.iterations)
    return res


def _per_window_loss(model, data, pairs, x0, targets, K, manifest, tc):
    """Time-varying models need each window's own start time, so windows roll out separately."""
    n = data.graph.n_nodes
    total = None
    for b, (_, s) in enumerate(pairs):
        rows = slice(b * n, (b + 1) * n)
        roll = model.rollout(data.graph, x0[rows], K, t0=s)
        term = multi_step_loss(roll.outputs, [t[rows] for t in targets], manifest.q_dim, tc.p_weight, len(pairs))
        total = term if total is None else ad.add(total, term)
    return total
