"""Command-line entry point: ``gen-data``, ``train``, ``evaluate`` and ``recommend``.

Exit status: 0 success, 2 configuration error, 3 training divergence,
4 input/output error.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import logging
import sys
from datetime import datetime, timezone
from pathlib import Path

from . import __version__
from .datagen import GenConfig, InfeasibleConfigError, generate
from .evaluation import HIT_RATE_NS, build_filter, evaluate, hit_rate_curve, hit_rate_rows
from .graph import GraphError, atomic_write_text, load_dataset, save_dataset
from .infer import recommend
from .model import load_model, save_model
from .seeding import derive_seed
from .train import DivergenceError, TrainConfig, train, write_logs_csv

EXIT_OK, EXIT_CONFIG, EXIT_DIVERGED, EXIT_IO = 0, 2, 3, 4

log = logging.getLogger("fedrule")


class ConfigError(ValueError):
    """Bad configuration file or flag combination."""


# ------------------------------------------------------------------ helpers

def sha256_file(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def write_manifest(path, command: str, config: dict, seeds: dict, inputs: dict, outputs: dict,
                   started: str) -> None:
    doc = {
        "command": command,
        "version": f"fedrule {__version__}",
        "config": config,
        "seeds": seeds,
        "inputs": {k: {"path": str(v), "sha256": sha256_file(v)} for k, v in inputs.items()},
        "outputs": {k: {"path": str(v), "sha256": sha256_file(v)} for k, v in outputs.items()},
        "started": started,
        "finished": _now(),
    }
    atomic_write_text(path, json.dumps(doc, indent=2, sort_keys=True) + "\n")


def read_config(path) -> dict:
    if path is None:
        return {}
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file {path} is not valid JSON: {exc}") from None
    if not isinstance(doc, dict):
        raise ConfigError("config file must hold a JSON object")
    return doc


def build_config(cls, file_values: dict, overrides: dict):
    """Dataclass from config-file values with non-``None`` flag overrides on top."""
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = set(file_values) - known
    if unknown:
        raise ConfigError(f"unknown config keys for {cls.__name__}: {sorted(unknown)}")
    values = dict(file_values)
    values.update({k: v for k, v in overrides.items() if v is not None})
    try:
        return cls(**values)
    except TypeError as exc:
        raise ConfigError(str(exc)) from None


def _vocab_path(dataset: Path, vocab) -> Path:
    return Path(vocab) if vocab else dataset.with_name("vocab.txt")


def _load(args):
    dataset = Path(args.dataset)
    return load_dataset(dataset, _vocab_path(dataset, args.vocab), seed=args.seed)


def _check_dims(params, dataset) -> None:
    T, R = dataset.vocab.n_entity_types, dataset.vocab.n_rule_types
    if (params.n_types, params.n_rules) != (T, R):
        raise ConfigError(f"model expects {params.n_types} entity types and {params.n_rules} rule types, "
                          f"dataset has {T} and {R}")


def _parse_ns(text: str) -> list[int]:
    ns = []
    for part in text.split(","):
        part = part.strip()
        if "-" in part:
            lo, hi = part.split("-")
            ns.extend(range(int(lo), int(hi) + 1))
        elif part:
            ns.append(int(part))
    if not ns or min(ns) < 1:
        raise argparse.ArgumentTypeError("N values must be positive integers")
    return ns


# ----------------------------------------------------------------- commands

def cmd_gen_data(args) -> int:
    started = _now()
    overrides = {"n_users": args.n_users, "seed": args.seed, "alpha": args.alpha, "n_clusters": args.clusters}
    cfg = build_config(GenConfig, read_config(args.config), overrides)
    out = Path(args.out)
    ds = generate(cfg)
    data, vocab = out / "dataset.jsonl", out / "vocab.txt"
    save_dataset(ds, data, vocab)
    write_manifest(out / "manifest.json", "gen-data", cfg.to_dict(), {"seed": cfg.seed},
                   {}, {"dataset": data, "vocab": vocab}, started)
    print(f"wrote {len(ds)} users to {data}")
    return EXIT_OK


def _train_overrides(args) -> dict:
    lam_t = args.lambda_theta if args.lambda_theta is not None else args.lam
    lam_p = args.lambda_phi if args.lambda_phi is not None else args.lam
    return {"mode": args.mode, "rounds": args.rounds, "local_steps": args.local_steps, "lr_theta": args.lr_theta,
            "lr_phi": args.lr_phi, "lambda_theta": lam_t, "lambda_phi": lam_p, "optimizer": args.optimizer,
            "neg_ratio": args.neg_ratio, "seed": args.seed, "participation": args.participation,
            "hidden": args.hidden, "workers": args.workers, "eval_every": args.eval_every,
            "record_timing": False if args.no_timing else None}


def cmd_train(args) -> int:
    started = _now()
    cfg = build_config(TrainConfig, read_config(args.config), _train_overrides(args))
    dataset_path = Path(args.dataset)
    vocab_path = _vocab_path(dataset_path, args.vocab)
    ds = load_dataset(dataset_path, vocab_path, seed=cfg.seed)
    out = Path(args.out)
    model_path, metrics_path = out / "model.json", out / "metrics.csv"
    seeds = {"seed": cfg.seed, "model": derive_seed(cfg.seed, "model"), "eval": derive_seed(cfg.seed, "eval")}
    try:
        params, logs = train(ds, cfg)
    except DivergenceError as err:
        log.error("%s", err)
        print(f"diverged at round {err.round} (loss {err.loss})", file=sys.stderr)
        write_logs_csv(err.logs, metrics_path)
        write_manifest(out / "manifest.json", "train", cfg.to_dict(), seeds,
                       {"dataset": dataset_path, "vocab": vocab_path}, {"metrics": metrics_path}, started)
        return EXIT_DIVERGED
    save_model(params, model_path)
    write_logs_csv(logs, metrics_path)
    write_manifest(out / "manifest.json", "train", cfg.to_dict(), seeds,
                   {"dataset": dataset_path, "vocab": vocab_path}, {"model": model_path, "metrics": metrics_path},
                   started)
    if logs:
        last = logs[-1]
        print(f"{cfg.mode}: {len(logs)} rounds, train loss {last.train_loss:.4f}, test loss {last.test_loss:.4f}, "
              f"test AUC {last.test_auc:.4f}")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    started = _now()
    params = load_model(args.model)
    ds = _load(args)
    _check_dims(params, ds)
    filt = build_filter(ds) if args.filter else None
    eval_seed = derive_seed(args.seed, "eval")
    report = evaluate(params, ds, seed=eval_seed, ns=args.n, filt=filt, remove_train=args.remove_train)
    sys.stdout.write(report.to_json())
    if args.out:
        out = Path(args.out)
        curve = hit_rate_curve(params, ds, HIT_RATE_NS, filt)
        atomic_write_text(out / "report.json", report.to_json())
        atomic_write_text(out / "report.csv", report.to_csv())
        atomic_write_text(out / "hit_rate_curve.csv", hit_rate_rows(curve))
        if args.train_curve:
            atomic_write_text(out / "hit_rate_curve_train.csv",
                              hit_rate_rows(hit_rate_curve(params, ds, HIT_RATE_NS, filt, target="train")))
        outputs = {"report_json": out / "report.json", "report_csv": out / "report.csv",
                   "hit_rate_curve": out / "hit_rate_curve.csv"}
        dataset_path = Path(args.dataset)
        cfg = {"remove_train": args.remove_train, "filter": args.filter, "n": args.n}
        write_manifest(out / "manifest.json", "evaluate", cfg, {"seed": args.seed, "eval": eval_seed},
                       {"model": args.model, "dataset": dataset_path, "vocab": _vocab_path(dataset_path, args.vocab)},
                       outputs, started)
    return EXIT_OK


def cmd_recommend(args) -> int:
    params = load_model(args.model)
    ds = _load(args)
    _check_dims(params, ds)
    try:
        user = ds.users[ds.user_index(args.user)]
    except KeyError:
        raise ConfigError(f"unknown user {args.user!r}") from None
    filt = build_filter(ds) if args.filter else None
    recs = recommend(params, user, ds.vocab, args.top_n, filt)
    if args.json:
        doc = {"user_id": args.user, "recommendations": recs.to_rows(), "n_candidates": recs.n_candidates,
               "truncated": recs.truncated}
        sys.stdout.write(json.dumps(doc, indent=2) + "\n")
        return EXIT_OK
    print(f"{'rank':>4}  {'src':<12} {'rule':<20} {'dst':<12} prob.")
    for row in recs.to_rows():
        print(f"{row['rank']:>4}  {row['src']:<12} {row['rule']:<20} {row['dst']:<12} {row['probability']:.4f}")
    if recs.truncated:
        print(f"note: only {recs.n_candidates} candidate rules exist; fewer than the {args.top_n} requested")
    return EXIT_OK


# ------------------------------------------------------------------- parser

def _add_data_args(p) -> None:
    p.add_argument("--dataset", required=True, help="dataset JSON lines file")
    p.add_argument("--vocab", help="vocabulary file (default: vocab.txt next to the dataset)")
    p.add_argument("--seed", type=int, default=0, help="top-level seed")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fedrule", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"fedrule {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate a synthetic dataset")
    g.add_argument("--config", help="JSON file with generator settings")
    g.add_argument("--out", required=True, help="output directory")
    g.add_argument("--seed", type=int)
    g.add_argument("--n-users", type=int)
    g.add_argument("--alpha", type=float, help="cluster concentration")
    g.add_argument("--clusters", type=int, help="number of user clusters")
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train a model")
    t.add_argument("--dataset", required=True)
    t.add_argument("--vocab")
    t.add_argument("--config", help="JSON file with training settings; flags override it")
    t.add_argument("--out", required=True, help="output directory")
    t.add_argument("--mode", choices=("central", "fedavg", "fedrule"))
    t.add_argument("--rounds", type=int)
    t.add_argument("--local-steps", type=int)
    t.add_argument("--lr-theta", type=float)
    t.add_argument("--lr-phi", type=float)
    t.add_argument("--lambda", dest="lam", type=float, help="control weight for both halves")
    t.add_argument("--lambda-theta", type=float)
    t.add_argument("--lambda-phi", type=float)
    t.add_argument("--optimizer", choices=("adam", "sgd"))
    t.add_argument("--neg-ratio", type=float)
    t.add_argument("--seed", type=int)
    t.add_argument("--participation", type=float)
    t.add_argument("--hidden", type=int)
    t.add_argument("--workers", type=int, help="threads for client updates within a round")
    t.add_argument("--eval-every", type=int)
    t.add_argument("--no-timing", action="store_true", help="write 0 for elapsed_ms so metrics are reproducible")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("evaluate", help="compute test metrics")
    e.add_argument("--model", required=True)
    _add_data_args(e)
    e.add_argument("--remove-train", action=argparse.BooleanOptionalAction, default=True,
                   help="also report mean rank without rules already in training")
    e.add_argument("--filter", action="store_true", help="apply the valid-rule filter to hit rates")
    e.add_argument("--n", type=_parse_ns, default=[1, 5, 10, 20, 40], help="hit-rate N list, e.g. 1,5,10 or 1-40")
    e.add_argument("--out", help="directory for report and hit-rate curve files")
    e.add_argument("--train-curve", action="store_true", help="also export the hit-rate curve on training rules")
    e.set_defaults(func=cmd_evaluate)

    r = sub.add_parser("recommend", help="recommend rules for one user")
    r.add_argument("--model", required=True)
    _add_data_args(r)
    r.add_argument("--user", required=True)
    r.add_argument("--top-n", type=int, default=10)
    r.add_argument("--filter", action="store_true")
    r.add_argument("--json", action="store_true", help="machine-readable output")
    r.set_defaults(func=cmd_recommend)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, InfeasibleConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (OSError, GraphError, json.JSONDecodeError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
