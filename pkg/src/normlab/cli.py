"""Command-line interface: ``normlab <subcommand> [options]``.

A ``--config`` YAML file may hold ``model``, ``task``, ``train`` and
``experiment`` sections; explicit flags override it.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict
from pathlib import Path

import yaml

from . import checkpoint, experiments as ex, task as tk, trainer as tr
from .model import MODEL_PRESETS, ModelState, model_preset
from .attention import STRATEGIES

log = logging.getLogger("normlab")

# Model preset -> dataset preset family.
DATA_FAMILY = {"baseline": "baseline", "alternate": "baseline", "large": "large", "desk": "desk"}


def load_config(path: str | None) -> dict:
    if not path:
        return {}
    with open(path) as fh:
        data = yaml.safe_load(fh) or {}
    if not isinstance(data, dict):
        raise SystemExit(f"config {path} must be a mapping")
    return data


def _task(spec, family: str, split: str, seed: int) -> tk.TaskConfig:
    if spec is None:
        return tk.preset(f"{family}-{split}", seed)
    if isinstance(spec, str):
        return tk.preset(spec, seed)
    return tk.TaskConfig(tuple(spec["N_choices"]), tuple(spec["L_choices"]), spec.get("seed", seed))


def _out(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=1, default=ex._json_default) + "\n")


def _load_model(args, cfg) -> tuple[ModelState, dict]:
    path = args.checkpoint or cfg.get("checkpoint")
    if not path:
        raise SystemExit("--checkpoint is required")
    return checkpoint.load_with_extra(path)


def _dataset(args, cfg, extra) -> tk.TaskConfig:
    family = extra.get("family", DATA_FAMILY.get(args.preset, "desk"))
    name = args.dataset or cfg.get("experiment", {}).get("dataset")
    seed = args.seed if args.seed is not None else 0
    if name:
        return tk.preset(name, seed + 1_000_003)
    return tr.eval_task(tk.preset(f"{family}-train", seed))


def _ints(text: str) -> list[int]:
    return [int(v) for v in text.split(",")]


def cmd_gen_data(args, cfg):
    spec = args.dataset or cfg.get("task")
    if args.N or args.L:
        spec = {"N_choices": _ints(args.N or "1"), "L_choices": _ints(args.L or "1")}
    task = _task(spec, DATA_FAMILY[args.preset], "train", args.seed or 0)
    out = _out(args)
    with open(out / "data.jsonl", "w") as fh:
        n = tk.write_jsonl(tk.stream(task, 0, args.n), fh)
    print(f"wrote {n} samples to {out / 'data.jsonl'}")


def cmd_train(args, cfg):
    model_cfg = dict(cfg.get("model", {}))
    if args.strategy:
        model_cfg["strategy"] = args.strategy
    if args.seed is not None:
        model_cfg["seed"] = args.seed
    mcfg = model_preset(args.preset, **model_cfg)
    family = DATA_FAMILY[args.preset]
    task = _task(cfg.get("task"), family, "train", args.seed or 0)
    base = tr.train_preset(args.preset if args.preset in tr.TRAIN_PRESETS else "baseline")
    train_cfg = {**asdict(base), **cfg.get("train", {})}
    for flag in ("lr", "epochs", "batches_per_epoch", "batch_size", "wall_clock", "target_accuracy"):
        v = getattr(args, flag)
        if v is not None:
            train_cfg[flag] = v
    if args.seed is not None:
        train_cfg["seed"] = args.seed
    tcfg = tr.TrainConfig(**train_cfg)
    evals = {"train": tr.eval_task(task)}
    if family in ("baseline", "large"):
        evals["ood-interp"] = tk.preset(f"{family}-ood-interp", task.seed + 2)
    elif family == "desk":
        evals["ood-interp"] = tk.preset("desk-ood-interp", task.seed + 2)
    out = _out(args)
    state = tr.prepare(mcfg, task, tcfg)
    with open(out / "metrics.jsonl", "w") as fh:
        for rec in tr.train_iter(state, task, tcfg, evals, log=log.info):
            fh.write(json.dumps({"schema_version": ex.SCHEMA_VERSION, **rec.to_dict()}) + "\n")
            fh.flush()
    checkpoint.save(state, out / "model.nckt", extra={"family": family, "task": task.__dict__})
    print(f"saved {out / 'model.nckt'}")


def cmd_eval(args, cfg):
    state, extra = _load_model(args, cfg)
    ds = _dataset(args, cfg, extra)
    r = tr.evaluate(state, ds, args.n_points)
    res = {"schema_version": ex.SCHEMA_VERSION, "accuracy": r.accuracy, "stderr": r.stderr, "tokens": r.total}
    if args.autoregressive:
        samples = [tk.sample(ds, i) for i in range(min(args.n_points, 256))]
        from .model import greedy_answers

        answers = greedy_answers(state, samples)
        res["answer_accuracy"] = sum(a == tk.render_int(s.answer_value) for a, s in zip(answers, samples)) / len(samples)
    print(json.dumps(res))
    if args.out:
        _write_json(_out(args) / "eval.json", res)


def _grid(args, default):
    return [float(g) for g in args.grid.split(",")] if args.grid else list(default)


def cmd_perturb(args, cfg):
    state, extra = _load_model(args, cfg)
    ds = _dataset(args, cfg, extra)
    out = _out(args)
    rows, records = [], []
    targets = tuple(args.targets.split(","))
    for filt in args.head_filter.split(","):
        spec = ex.NoiseSpec(0.0, targets, filt, seed=args.seed or 0)
        curve = ex.accuracy_vs_noise(state, ds, _grid(args, ex.DEFAULT_GRID), spec, args.n_points, args.noise_seeds)
        records.append(curve.to_dict())
        rows += curve.csv_rows(f"accuracy_{filt}")
    ex.write_jsonl(records, out / "perturb.jsonl")
    ex.write_csv(rows, out / "perturb.csv")
    for rms, metric, v, e in rows:
        print(f"{metric:28s} rms={rms:<6g} {v:.4f} ± {e:.4f}")


def cmd_collapse(args, cfg):
    state, extra = _load_model(args, cfg)
    rep = ex.collapse_probability(state, _dataset(args, cfg, extra), _grid(args, ex.COLLAPSE_GRID),
                                  args.n_points, args.seed or 0)
    out = _out(args)
    ex.write_jsonl([rep.to_dict()], out / "collapse.jsonl")
    ex.write_csv(rep.csv_rows(), out / "collapse.csv")
    for lv in rep.levels:
        print(f"rms={lv.rms:<6g} sparse={lv.n_sparse} p={lv.probability:.4f} strict={lv.strict_probability:.4f}")
    if rep.note:
        print(rep.note)


def cmd_spread(args, cfg):
    state, extra = _load_model(args, cfg)
    rep = ex.embedding_spread(state, _dataset(args, cfg, extra), args.n_points)
    ex.write_jsonl([rep.to_dict()], _out(args) / "spread.jsonl")
    print(f"mean central-90% half-width over layers: {rep.mean_half_width():.4f}")


def cmd_sparsity(args, cfg):
    state, extra = _load_model(args, cfg)
    edges = None
    if args.bins:
        import numpy as np

        edges = np.linspace(0.0, 1.0, args.bins + 1)
    h = ex.sparsity_histogram(state, _dataset(args, cfg, extra), edges, args.n_points)
    ex.write_jsonl([h.to_dict()], _out(args) / "sparsity.jsonl")
    print(f"fraction of distributions with max >= 0.95: {h.fraction_sparse:.4f}")


def cmd_attn_dump(args, cfg):
    state, _ = _load_model(args, cfg)
    texts = args.text or ["[12+N7-3=2"]
    _write_json(_out(args) / "attention.json", ex.attn_dump(state, texts))
    print(f"wrote {Path(args.out) / 'attention.json'}")


def cmd_verify_theory(args, cfg):
    out = Path(args.out) if args.out else None
    if args.replay:
        record = json.loads(Path(args.replay).read_text())
        err = ex.replay_instance(record)
        tol = ex.PROPERTIES[record["property"]][2]
        print(f"{record['property']}: error {err:.3e} (recorded {record['error']:.3e}, tolerance {tol:g})")
        return 0 if err <= tol else 1
    rep = ex.verify_theory(args.trials, args.seed or 0)
    for r in rep.results:
        print(f"{'PASS' if r.passed else 'FAIL'}  {r.name:40s} worst={r.worst_error:.3e} tol={r.tolerance:g} n={r.instances}")
    print(f"runtime {rep.runtime:.1f}s")
    if out:
        out.mkdir(parents=True, exist_ok=True)
        ex.write_jsonl([rep.to_dict()], out / "verify_theory.jsonl")
        for r in rep.results:
            for f in r.failures:
                (out / f"failure-{f['property']}-{f['index']}.json").write_text(json.dumps(f))
    return 0 if rep.passed else 1


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "eval": cmd_eval,
    "perturb": cmd_perturb,
    "collapse": cmd_collapse,
    "spread": cmd_spread,
    "sparsity": cmd_sparsity,
    "attn-dump": cmd_attn_dump,
    "verify-theory": cmd_verify_theory,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML config file")
    common.add_argument("--seed", type=int)
    common.add_argument("--out", default="out")
    common.add_argument("--strategy", choices=STRATEGIES)
    common.add_argument("--preset", choices=sorted(MODEL_PRESETS), default="desk")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="normlab", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)
    s = sub.add_parser("gen-data", parents=[common], help="write samples as JSONL")
    s.add_argument("--n", type=int, default=1000)
    s.add_argument("--dataset", help="dataset preset name")
    s.add_argument("--N", help="comma-separated integer counts per sum, e.g. 2,3")
    s.add_argument("--L", help="comma-separated digit lengths, e.g. 1,2")

    s = sub.add_parser("train", parents=[common], help="train a model")
    s.add_argument("--lr", type=float)
    s.add_argument("--epochs", type=int)
    s.add_argument("--batches-per-epoch", type=int)
    s.add_argument("--batch-size", type=int)
    s.add_argument("--wall-clock", type=float)
    s.add_argument("--target-accuracy", type=float)

    for name in ("eval", "perturb", "collapse", "spread", "sparsity", "attn-dump"):
        s = sub.add_parser(name, parents=[common])
        s.add_argument("--checkpoint")
        s.add_argument("--dataset", help="dataset preset name (default: held-out training distribution)")
        s.add_argument("--n-points", type=int, default=512)
        if name == "eval":
            s.add_argument("--autoregressive", action="store_true", help="also report greedy-decoded answer accuracy")
        if name in ("perturb", "collapse"):
            s.add_argument("--grid", help="comma-separated rms values")
        if name == "perturb":
            s.add_argument("--targets", default="q,k,m")
            s.add_argument("--head-filter", default="all,sparse,nonsparse")
            s.add_argument("--noise-seeds", type=int, default=3)
        if name == "sparsity":
            s.add_argument("--bins", type=int)
        if name == "attn-dump":
            s.add_argument("--text", action="append", help="input prefix such as '[12+N7-3=2'")

    s = sub.add_parser("verify-theory", parents=[common], help="run the perturbation-theory battery")
    s.add_argument("--trials", type=int, default=100)
    s.add_argument("--replay", help="re-run a serialized failing instance")
    s.set_defaults(out=None)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    cfg = load_config(args.config)
    rc = COMMANDS[args.command](args, cfg)
    return int(rc or 0)


if __name__ == "__main__":
    sys.exit(main())
