"""Command-line entry point: ``igns {gen,train,eval,rollout,verify}``.

Exit codes: 0 success, 1 usage error, 2 data error, 3 failed check.
"""

from __future__ import annotations

import argparse
import contextlib
import json
import logging
import shutil
import sys
import tempfile
from pathlib import Path

import numpy as np

from . import datagen, training, verify
from .autodiff import NonFiniteError
from .graphdata import DataFormatError, DatasetManifest, Trajectory, read_dataset, read_manifest, write_dataset
from .models import VARIANTS, ModelConfig, Simulator, load_checkpoint

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_CHECK = 0, 1, 2, 3
log = logging.getLogger("igns")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _load_json(path, what) -> dict:
    if path is None:
        return {}
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"{what} file not found: {p}")
    try:
        obj = json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise UsageError(f"{what} is not valid JSON: {exc}") from exc
    if not isinstance(obj, dict):
        raise UsageError(f"{what} must be a JSON object")
    return obj


@contextlib.contextmanager
def atomic_dir(out, force: bool = False):
    """Yield a scratch directory that is renamed onto ``out`` on success."""
    out = Path(out)
    if out.exists() and any(out.iterdir()) and not force:
        raise UsageError(f"output directory {out} exists and is not empty (use --force)")
    out.parent.mkdir(parents=True, exist_ok=True)
    tmp = Path(tempfile.mkdtemp(prefix=f".{out.name}.", dir=out.parent))
    try:
        yield tmp
    except BaseException:
        shutil.rmtree(tmp, ignore_errors=True)
        raise
    if out.exists():
        shutil.rmtree(out)
    tmp.rename(out)


def _require_dataset(path) -> Path:
    p = Path(path)
    if not (p / "manifest.json").is_file():
        raise DataFormatError(f"no dataset at {p} (manifest.json missing)")
    return p


# ------------------------------------------------------------------ commands

def cmd_gen(args) -> int:
    dtype = "float64" if args.precision == 64 else "float32"
    with atomic_dir(args.out, args.force) as tmp:
        datagen.generate_dataset(args.task, args.count, args.seed, tmp, dtype=dtype)
    m = read_manifest(args.out)
    print(json.dumps({"out": str(args.out), "task": m.name, "n_trajectories": m.n_trajectories,
                      "horizon": m.horizon, "splits": {k: len(v) for k, v in m.splits.items()}}))
    return EXIT_OK


def cmd_train(args) -> int:
    data = _require_dataset(args.data)
    mcfg = _load_json(args.model_config, "model config")
    tcfg = _load_json(args.train_config, "train config")
    if args.variant:
        mcfg["variant"] = args.variant
    if args.seed is not None:
        mcfg["seed"] = args.seed
        tcfg["seed"] = args.seed
    if args.precision is not None:
        tcfg["precision"] = args.precision
    try:
        tc = training.TrainConfig.from_dict(tcfg)
        mc = training.model_config_for(read_manifest(data), ModelConfig.from_dict(mcfg))
    except (TypeError, ValueError) as exc:
        if isinstance(exc, DataFormatError):
            raise
        raise UsageError(str(exc)) from exc
    with atomic_dir(args.out, args.force) as tmp:
        res = training.train(data, mc, tc, out_dir=tmp)
        echo = {"model": res.model.config.to_dict(), "train": tc.to_dict(),
                "n_parameters": res.model.n_parameters, "best_val": res.best_val}
        (tmp / "config.json").write_text(json.dumps(echo, indent=1))
    print(json.dumps({"out": str(args.out), "n_parameters": echo["n_parameters"], "best_val": res.best_val}))
    return EXIT_OK


def _load_eval_inputs(args):
    model, header = load_checkpoint(args.checkpoint)
    data = _require_dataset(args.data)
    m = read_manifest(data)
    ids = m.splits.get(args.split, [])
    if not ids:
        raise DataFormatError(f"split {args.split!r} is empty")
    cfg = model.config
    expect = training.model_config_for(m, cfg)
    if (expect.in_dim, expect.out_dim, expect.edge_dim) != (cfg.in_dim, cfg.out_dim, cfg.edge_dim):
        raise DataFormatError("checkpoint channels disagree with dataset manifest")
    _, trajs = read_dataset(data, ids)
    return model, m, training.prepare(m, trajs, ids)


def dump_rollout(manifest: DatasetManifest, prepared, pred: np.ndarray, out: Path, which) -> Path:
    """Write predictions in the dataset format; frame 0 is the ground-truth initial state."""
    q_dim = manifest.q_dim
    trajs = []
    for row, k in zip(pred, which):
        first = prepared.targets[k][:1]
        full = np.concatenate([first, row])
        cond = None
        if manifest.cond_dim:
            off = q_dim + (manifest.v_dim or q_dim)
            sl = slice(off, off + manifest.cond_dim)
            cond = prepared.inputs[k][0, :, sl] * np.asarray(manifest.std[sl]) + np.asarray(manifest.mean[sl])
        v = full[:, :, q_dim:] if manifest.v_dim else None
        trajs.append(Trajectory(q=full[:, :, :q_dim], v=v, dt=manifest.dt, cond=cond))
    n = len(trajs)
    m = DatasetManifest(**{**manifest.__dict__, "n_trajectories": n,
                           "splits": {"test": list(range(n))}, "dtype": "float64",
                           "generator": {"rollout_of": manifest.name,
                                         "source_ids": [int(prepared.ids[k]) for k in which]}})
    return write_dataset(m, trajs, out)


def cmd_eval(args) -> int:
    model, m, prepared = _load_eval_inputs(args)
    res = training.evaluate(model, prepared, warmup=args.warmup_override, oracle=args.oracle)
    pred = res.pop("predictions")
    report = {"split": args.split, "warmup": model.config.warmup if args.warmup_override is None
              else args.warmup_override, **res}
    with atomic_dir(args.out, args.force) as tmp:
        (tmp / "metrics.json").write_text(json.dumps(report, indent=1))
        dump_rollout(m, prepared, pred, tmp / "rollout", list(range(len(prepared.inputs))))
    print(json.dumps({k: report[k] for k in ("split", "mse", "mse10", "n_trajectories")}))
    return EXIT_OK


def cmd_rollout(args) -> int:
    model, m, prepared = _load_eval_inputs(args)
    if not 0 <= args.index < len(prepared.inputs):
        raise UsageError(f"--index must lie in [0, {len(prepared.inputs)})")
    steps = args.steps or m.horizon
    pred, _ = training.predict(model, prepared, [args.index], T=steps, warmup=args.warmup_override)
    with atomic_dir(args.out, args.force) as tmp:
        if steps == m.horizon:
            dump_rollout(m, prepared, pred, tmp, [args.index])
        else:
            np.ascontiguousarray(pred[0], dtype="<f8").tofile(tmp / "rollout.bin")
            (tmp / "rollout.json").write_text(json.dumps({"shape": list(pred[0].shape), "dtype": "float64"}))
    print(json.dumps({"out": str(args.out), "steps": steps}))
    return EXIT_OK


def cmd_verify(args) -> int:
    results = verify.run_suite(args.precision, fault=args.fault, quick=args.quick)
    print(f"verify: precision {args.precision}" + (f", fault {args.fault}" if args.fault else ""))
    for r in results:
        print(r.line())
    failed = [r.name for r in results if not r.passed]
    if failed:
        print("FAILED: " + ", ".join(failed))
        return EXIT_CHECK
    print(f"all {len(results)} checks passed")
    return EXIT_OK


# --------------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="igns", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp, out_required=True):
        sp.add_argument("--seed", type=int, default=None)
        sp.add_argument("--precision", type=int, choices=(32, 64), default=None)
        sp.add_argument("--out", type=Path, required=out_required)
        sp.add_argument("--force", action="store_true", help="replace a non-empty output directory")

    g = sub.add_parser("gen", help="generate a synthetic dataset")
    g.add_argument("--task", required=True, choices=datagen.TASKS)
    g.add_argument("--count", type=int, required=True)
    common(g)
    g.set_defaults(func=cmd_gen)

    t = sub.add_parser("train", help="train a simulator")
    t.add_argument("--data", type=Path, required=True)
    t.add_argument("--model-config", type=Path)
    t.add_argument("--train-config", type=Path)
    t.add_argument("--variant", choices=VARIANTS)
    common(t)
    t.set_defaults(func=cmd_train)

    for name, fn, hlp in (("eval", cmd_eval, "evaluate a checkpoint on a split"),
                          ("rollout", cmd_rollout, "export one rollout")):
        e = sub.add_parser(name, help=hlp)
        e.add_argument("--checkpoint", type=Path, required=True)
        e.add_argument("--data", type=Path, required=True)
        e.add_argument("--split", choices=("train", "val", "test"), default="test")
        e.add_argument("--warmup-override", type=int, default=None)
        common(e)
        e.set_defaults(func=fn)
        if name == "eval":
            e.add_argument("--oracle", action="store_true", help="score ground truth against itself")
        else:
            e.add_argument("--index", type=int, default=0, help="trajectory position within the split")
            e.add_argument("--steps", type=int, default=None)

    v = sub.add_parser("verify", help="run the property suite")
    v.add_argument("--precision", type=int, choices=(32, 64), default=64)
    v.add_argument("--fault", choices=verify.FAULTS, default=None, help="inject a known defect (test hook)")
    v.add_argument("--quick", action="store_true", help="skip the slow multi-step gradient check")
    v.set_defaults(func=cmd_verify)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    if getattr(args, "seed", None) is None and args.command == "gen":
        args.seed = 0
    if args.command == "gen" and args.precision is None:
        args.precision = 32
    if getattr(args, "warmup_override", None) is not None and args.warmup_override < 0:
        parser.error("--warmup-override must be non-negative")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"igns: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataFormatError, FileNotFoundError, NonFiniteError, training.TrainingDivergedError) as exc:
        print(f"igns: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except ValueError as exc:
        print(f"igns: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
