"""Command-line entry point: ``tit {train,eval,params,gradcheck,gen-data}``.

Exit codes: 0 success, 2 usage or configuration error, 3 numeric failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import fields

from . import checkpoint
from .adapter import PRESETS, accounting_rows, count_adapter_params, count_mix_params, \
    enumerate_counts, format_rows
from .data import SceneSpec, dump_dataset
from .errors import ConfigError, NumericError
from .model import ModelConfig, TITModel, nyud_tasks
from .train import TrainConfig, TrainingAborted, delta_m, delta_m_table, evaluate, \
    format_param_report, param_report, train, write_jsonl

log = logging.getLogger("tit")

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC = 0, 2, 3

MODEL_KEYS = {"H", "W", "C", "depths", "heads", "alpha", "m_ratio", "k", "c_t", "mlp_ratio",
              "embed_upsample", "num_classes"}
TRAIN_KEYS = {f.name for f in fields(TrainConfig)} - {"seed"}
DATA_KEYS = {"min_primitives", "max_primitives", "noise"}
EVAL_KEYS = {"num_samples", "offset", "batch_size"}
GEN_KEYS = {"count", "offset"}

DEFAULTS = {
    "seed": 0,
    "model.H": 64, "model.W": 64, "model.C": 16, "model.depths": [1, 1, 2, 1],
    "model.heads": [2, 2, 4, 4], "model.alpha": 0.25, "model.m_ratio": 0.5, "model.k": 64,
    "model.c_t": 16, "model.mlp_ratio": 4, "model.embed_upsample": "nearest",
    "model.num_classes": 5,
    "train.steps": 200, "train.batch_size": 8, "train.lr": 1e-4, "train.weight_decay": 1e-4,
    "train.num_samples": 8, "train.augment": False, "train.schedule": "round-robin",
    "data.min_primitives": 2, "data.max_primitives": 5, "data.noise": 0.02,
    "eval.num_samples": 8, "eval.offset": 0, "eval.batch_size": 8,
    "gen.count": 4, "gen.offset": 0,
}
_SECTIONS = {"model": MODEL_KEYS, "train": TRAIN_KEYS, "data": DATA_KEYS, "eval": EVAL_KEYS,
             "gen": GEN_KEYS}


class UsageError(Exception):
    pass


def _check_key(key):
    if key == "seed":
        return
    section, _, name = key.partition(".")
    if section not in _SECTIONS or name not in _SECTIONS[section]:
        raise UsageError(f"unknown config key {key!r}")


def _parse_value(text):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def load_config(path=None, overrides=(), seed=None):
    """Flat dotted-key JSON merged over defaults, then ``k=v`` overrides."""
    cfg = dict(DEFAULTS)
    if path is not None:
        try:
            with open(path, encoding="utf-8") as fh:
                user = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise UsageError(f"cannot read config {path}: {exc}") from None
        if not isinstance(user, dict):
            raise UsageError(f"config {path} must be a JSON object")
        for k, v in user.items():
            _check_key(k)
            cfg[k] = v
    for item in overrides:
        key, sep, val = item.partition("=")
        if not sep:
            raise UsageError(f"override {item!r} is not key=value")
        _check_key(key)
        cfg[key] = _parse_value(val)
    if seed is not None:
        cfg["seed"] = seed
    return cfg


def build(cfg):
    m = {k.split(".", 1)[1]: v for k, v in cfg.items() if k.startswith("model.")}
    K = m.pop("num_classes")
    try:
        mcfg = ModelConfig(tasks=nyud_tasks(K), **m)
        data = SceneSpec(seed=cfg["seed"], H=mcfg.H, W=mcfg.W, K=K,
                         **{k: cfg[f"data.{k}"] for k in DATA_KEYS})
        tcfg = TrainConfig(seed=cfg["seed"], **{k: cfg[f"train.{k}"] for k in TRAIN_KEYS})
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid configuration: {exc}") from None
    return mcfg, data, tcfg


# ---------------------------------------------------------------------------
# commands


def cmd_train(args):
    cfg = load_config(args.config, args.override, args.seed)
    mcfg, data, tcfg = build(cfg)
    os.makedirs(args.out, exist_ok=True)
    model = TITModel(mcfg, seed=cfg["seed"])
    hist_path = os.path.join(args.out, "history.jsonl")
    try:
        history = train(model, data, tcfg)
    except TrainingAborted as exc:
        print(f"error: training aborted at step {exc.step} (task {exc.task}): {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    write_jsonl(history, hist_path)
    with open(os.path.join(args.out, "config.json"), "w", encoding="utf-8") as fh:
        json.dump(cfg, fh, indent=1, sort_keys=True)
    checkpoint.save(model, os.path.join(args.out, "checkpoint"), extra={"run_config": cfg})
    print(f"trained {tcfg.steps} steps; final losses: "
          + ", ".join(f"{r['task']}={r['loss']:.4f}" for r in history[-mcfg.n_tasks:]))
    print(f"wrote {args.out}/checkpoint and {hist_path}")
    return EXIT_OK


def _checkpoint_path(args):
    return args.checkpoint or os.path.join(args.out, "checkpoint")


def cmd_eval(args):
    path = _checkpoint_path(args)
    if not os.path.isfile(os.path.join(path, checkpoint.MANIFEST)):
        raise UsageError(f"no checkpoint at {path}")
    model = checkpoint.load(path)
    cfg = load_config(args.config, args.override, args.seed)
    _, data, _ = build(cfg)
    data = SceneSpec(seed=data.seed, H=model.cfg.H, W=model.cfg.W,
                     K=model.cfg.tasks[0].out_channels, min_primitives=data.min_primitives,
                     max_primitives=data.max_primitives, noise=data.noise)
    start = cfg["eval.offset"]
    idx = range(start, start + cfg["eval.num_samples"])
    baseline = None
    if args.baseline:
        try:
            with open(args.baseline, encoding="utf-8") as fh:
                baseline = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise UsageError(f"cannot read baseline {args.baseline}: {exc}") from None
        names = [t.name for t in model.cfg.tasks]
        if not isinstance(baseline, dict) or sorted(baseline) != sorted(names):
            got = sorted(baseline) if isinstance(baseline, dict) else baseline
            raise UsageError(f"baseline tasks {got} do not match model tasks {names}")
    metrics = evaluate(model, data, list(idx), batch_size=cfg["eval.batch_size"])
    records = [{"task": t.name, "metric": t.metric, "value": metrics[t.name]}
               for t in model.cfg.tasks]
    for r in records:
        print(json.dumps(r))
    if any(v != v for v in metrics.values()):
        print("error: non-finite metric", file=sys.stderr)
        return EXIT_NUMERIC
    if baseline is not None:
        tasks = model.cfg.tasks
        single = [float(baseline[t.name]) for t in tasks]
        multi = [metrics[t.name] for t in tasks]
        try:
            dm = delta_m(multi, single, [t.polarity for t in tasks])
        except ZeroDivisionError as exc:
            raise UsageError(f"baseline: {exc}") from None
        records.append({"metric": "delta_m", "value": dm})
        print(json.dumps({"metric": "delta_m", "value": dm}))
        print(delta_m_table([("model", multi)], single, tasks))
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        write_jsonl(records, os.path.join(args.out, "metrics.jsonl"))
    return EXIT_OK


M_RATIOS = (("m=n/8", 0.125), ("m=n/4", 0.25), ("m=n/2", 0.5))


def params_summary(dims, depths, sites_per_block, n_tasks, alpha):
    out = []
    variants = [("adapter", None)] + list(M_RATIOS)
    for label, ratio in variants:
        with_bias = accounting_rows(dims, depths, sites_per_block, alpha, n_tasks, ratio, True)
        no_bias = accounting_rows(dims, depths, sites_per_block, alpha, n_tasks, ratio, False)
        if ratio is None:
            closed = sum(count_adapter_params(r.d, alpha, n_tasks) for r in no_bias)
        else:
            closed = sum(count_mix_params(r.d, alpha, ratio, n_tasks) for r in no_bias)
        out.append({
            "module": label, "m_ratio": ratio, "n_tasks": n_tasks,
            "total": sum(r.total for r in with_bias),
            "total_no_bias": sum(r.total for r in no_bias),
            "closed_form_no_bias": closed,
            "enumerated_no_bias": enumerate_counts(dims, depths, sites_per_block, alpha, n_tasks,
                                                   ratio, include_bias=False),
            "per_task": sum(r.per_task for r in with_bias),
            "rows": [r.as_dict() for r in with_bias],
        })
    return out


def cmd_params(args):
    if args.preset:
        if args.preset not in PRESETS:
            raise UsageError(f"unknown preset {args.preset!r}; known: {sorted(PRESETS)}")
        p = dict(PRESETS[args.preset])
        for item in args.override:
            key, sep, val = item.partition("=")
            if not sep or key not in p:
                raise UsageError(f"bad preset override {item!r}; keys: {sorted(p)}")
            p[key] = _parse_value(val)
        summary = params_summary(tuple(p["dims"]), tuple(p["depths"]), p["sites_per_block"],
                                 p["n_tasks"], p["alpha"])
        print(f"{'module':<10}{'params':>12}{'(M)':>8}{'no-bias':>12}{'closed form':>13}"
              f"{'enumerated':>12}")
        for s in summary:
            print(f"{s['module']:<10}{s['total']:>12}{s['total'] / 1e6:>8.2f}"
                  f"{s['total_no_bias']:>12}{s['closed_form_no_bias']:>13}"
                  f"{s['enumerated_no_bias']:>12}")
        if args.out:
            os.makedirs(args.out, exist_ok=True)
            recs = []
            for s in summary:
                recs += [dict(r, module=s["module"]) for r in s["rows"]]
            write_jsonl(recs, os.path.join(args.out, "params_rows.jsonl"))
            with open(os.path.join(args.out, "params.txt"), "w", encoding="utf-8") as fh:
                for s in summary:
                    fh.write(format_rows(accounting_rows(
                        tuple(p["dims"]), tuple(p["depths"]), p["sites_per_block"], p["alpha"],
                        p["n_tasks"], s["m_ratio"]), title=s["module"]) + "\n\n")
        return EXIT_OK
    cfg = load_config(args.config, args.override, args.seed)
    mcfg, _, _ = build(cfg)
    model = TITModel(mcfg, seed=cfg["seed"])
    rep = param_report(model)
    print(format_param_report(rep))
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        with open(os.path.join(args.out, "param_report.json"), "w", encoding="utf-8") as fh:
            json.dump(rep, fh, indent=1)
    return EXIT_OK


def cmd_gradcheck(args):
    from .gradcheck import TOLERANCE, format_rows as fmt, run_suite, tiny_config

    if args.config or args.override:
        cfg = load_config(args.config, args.override, args.seed)
        mcfg, _, _ = build(cfg)
    else:
        mcfg = tiny_config()
    try:
        rows = run_suite(mcfg, seed=args.seed or 0)
    except NumericError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    print(fmt(rows))
    bad = [k for k, v in rows.items() if not v < TOLERANCE]
    if bad:
        print(f"gradient check failed for: {', '.join(bad)}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


def cmd_gen_data(args):
    cfg = load_config(args.config, args.override, args.seed)
    _, data, _ = build(cfg)
    out = args.out
    start, count = cfg["gen.offset"], cfg["gen.count"]
    dump_dataset(data, range(start, start + count), out)
    print(f"wrote {count} samples to {out}")
    return EXIT_OK


COMMANDS = {"train": cmd_train, "eval": cmd_eval, "params": cmd_params,
            "gradcheck": cmd_gradcheck, "gen-data": cmd_gen_data}


def make_parser():
    ap = argparse.ArgumentParser(prog="tit", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="flat JSON config with dotted keys")
        p.add_argument("--seed", type=int)
        p.add_argument("--out", default=None if name in ("eval", "params") else f"runs/{name}")
        p.add_argument("--override", action="append", default=[], metavar="KEY=VALUE")
        if name == "eval":
            p.add_argument("--checkpoint")
            p.add_argument("--baseline")
        if name == "params":
            p.add_argument("--preset")
    return ap


def main(argv=None):
    ap = make_parser()
    try:
        args = ap.parse_args(argv)
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else EXIT_USAGE
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.command == "eval" and not (args.checkpoint or args.out):
        print("error: eval needs --checkpoint or --out", file=sys.stderr)
        return EXIT_USAGE
    try:
        return COMMANDS[args.command](args)
    except (UsageError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
