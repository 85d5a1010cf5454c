"""``graphgames`` command line: generate | train | eval | report.

Exit codes: 0 success, 1 usage or configuration error, 2 runtime failure.
Train options accept comma-separated lists; every combination becomes one
run directory named ``<game>-<repr>-K<k>-V<v>-L<l>-seed<s>``.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import itertools
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import fields
from pathlib import Path

import numpy as np
import yaml

from graphgames import engine, metrics, worldgen
from graphgames.engine import TrainConfig

log = logging.getLogger("graphgames")

OUT_ENV = "GRAPHGAMES_OUT"
DATASET_FILE = "dataset.jsonl"
MANIFEST_FILE = "manifest.json"


class UsageError(Exception):
    pass


class ArgumentParser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def default_out() -> Path:
    return Path(os.environ.get(OUT_ENV, "runs"))


def int_list(text: str) -> list[int]:
    return [int(v) for v in str(text).split(",") if v != ""]


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def write_json(path, obj) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


# -- generate ------------------------------------------------------------------


def cmd_generate(args) -> int:
    sizes = int_list(args.sizes)
    if len(sizes) != 3 or min(sizes) < 0:
        raise UsageError("--sizes takes three non-negative counts: train,valid,test")
    rng = np.random.default_rng(args.seed)
    if args.game == "g1":
        if not args.dims:
            raise UsageError("game g1 needs --dims")
        try:
            spec = worldgen.PerceptualSpec(tuple(int_list(args.dims)))
        except ValueError as e:
            raise UsageError(str(e)) from e
        ds = worldgen.build_game1_dataset(spec.dims, sizes, rng, ood_fraction=args.ood_fraction,
                                          ood_size=args.ood_size)
    else:
        if args.num_nodes < 1:
            raise UsageError("game g2 needs --num-nodes >= 1")
        ds = worldgen.build_game2_dataset(args.num_nodes, sizes, rng, ood_fraction=args.ood_fraction)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    ds.save(out / DATASET_FILE)
    manifest = {
        "params": ds.params,
        "seed": args.seed,
        "sizes": sizes,
        "ood_fraction": args.ood_fraction,
        "counts": ds.counts(),
        "distinct": {s: len(ds.pool(s)) for s in worldgen.SPLITS},
        "sha256": sha256_file(out / DATASET_FILE),
    }
    write_json(out / MANIFEST_FILE, manifest)
    print(f"wrote {sum(ds.counts().values())} items to {out / DATASET_FILE}")
    return 0


def load_dataset(data_dir) -> worldgen.Dataset:
    data_dir = Path(data_dir)
    manifest = json.loads((data_dir / MANIFEST_FILE).read_text())
    return worldgen.Dataset.load(data_dir / DATASET_FILE, manifest["params"])


# -- train ---------------------------------------------------------------------

# flag name -> TrainConfig field
TRAIN_FLAGS = {
    "repr": "repr",
    "distractors": "distractors",
    "vocab": "vocab_size",
    "msg_len": "msg_len",
    "layers": "num_layers",
    "hidden": "hidden_size",
    "embedding": "embedding_size",
    "lr": "learning_rate",
    "temperature": "temperature",
    "batch_size": "batch_size",
    "max_episodes": "max_episodes",
    "seed": "seed",
    "eval_every": "eval_every",
    "eval_episodes": "eval_episodes",
    "patience": "patience",
    "graph_layer": "graph_layer",
    "aggregator": "sage_aggregator",
    "pooling": "pooling",
}
FIELD_TYPES = {f.name: f.type for f in fields(TrainConfig)}


def _coerce(name: str, value):
    kind = FIELD_TYPES[name]
    if kind == "bool":
        if isinstance(value, str):
            return value.lower() in ("1", "true", "yes")
        return bool(value)
    return {"int": int, "float": float, "str": str}[kind](value)


def _axis(name: str, value) -> list:
    if isinstance(value, list):
        vals = value
    elif isinstance(value, str) and "," in value:
        vals = [v for v in value.split(",") if v != ""]
    else:
        vals = [value]
    try:
        return [_coerce(name, v) for v in vals]
    except ValueError as e:
        raise UsageError(f"bad value for {name}: {value!r}") from e


def resolve_axes(args) -> dict[str, list]:
    """Merge defaults < config file < flags into one list of values per field."""
    merged: dict = {}
    if args.config:
        loaded = yaml.safe_load(Path(args.config).read_text()) or {}
        if not isinstance(loaded, dict):
            raise UsageError(f"{args.config}: expected a flat key/value mapping")
        for key, value in loaded.items():
            key = TRAIN_FLAGS.get(key, key)
            if key not in FIELD_TYPES:
                raise UsageError(f"{args.config}: unknown key {key!r}")
            merged[key] = value
    for flag, name in TRAIN_FLAGS.items():
        value = getattr(args, flag)
        if value is not None:
            merged[name] = value
    if args.game is not None:
        merged["game"] = args.game
    if args.no_self_loops:
        merged["self_loops"] = False
    return {name: _axis(name, value) for name, value in merged.items()}


def expand(axes: dict[str, list]) -> list[TrainConfig]:
    names = list(axes)
    return [TrainConfig(**dict(zip(names, combo))) for combo in itertools.product(*(axes[n] for n in names))]


def run_name(cfg: TrainConfig) -> str:
    return f"{cfg.game}-{cfg.repr}-K{cfg.distractors}-V{cfg.vocab_size}-L{cfg.msg_len}-seed{cfg.seed}"


def fingerprint(cfg: TrainConfig) -> str:
    d = cfg.to_dict()
    d.pop("seed")
    return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:12]


def train_one(cfg: TrainConfig, data_dir: str, out_root: str, strict_grid: bool) -> str:
    data_dir = Path(data_dir)
    ds = load_dataset(data_dir)
    if ds.game != cfg.game:
        raise UsageError(f"dataset is game {ds.game}, config says {cfg.game}")
    run_dir = Path(out_root) / run_name(cfg)
    result = engine.train(cfg, ds, strict_grid=strict_grid)
    extra = {
        "dataset": str(data_dir.resolve()),
        "dataset_sha256": sha256_file(data_dir / DATASET_FILE),
        "fingerprint": fingerprint(cfg),
        "best_valid_acc": result.best_valid_acc,
        "best_episode": result.best_episode,
    }
    engine.save_checkpoint(run_dir, result.agents, cfg, extra)
    engine.write_log(run_dir / "log.csv", result.log)
    return str(run_dir)


def cmd_train(args) -> int:
    axes = resolve_axes(args)
    manifest_path = Path(args.data) / MANIFEST_FILE
    if "game" not in axes and manifest_path.exists():
        axes["game"] = [json.loads(manifest_path.read_text())["params"]["game"]]
    configs = expand(axes)
    for cfg in configs:
        try:
            cfg.validate(strict_grid=not args.off_grid)
        except ValueError as e:
            raise UsageError(f"{run_name(cfg)}: {e}") from e
    if not manifest_path.exists():
        raise FileNotFoundError(f"no dataset manifest in {args.data}")
    out = Path(args.out) if args.out else default_out()
    jobs = max(1, args.jobs)
    log.info("%d run(s), %d job(s)", len(configs), jobs)
    if jobs == 1 or len(configs) == 1:
        dirs = [train_one(cfg, args.data, out, not args.off_grid) for cfg in configs]
    else:
        with ProcessPoolExecutor(jobs) as pool:
            futures = [pool.submit(train_one, cfg, args.data, out, not args.off_grid) for cfg in configs]
            dirs = [f.result() for f in futures]
    for d in dirs:
        print(d)
    return 0


# -- eval ----------------------------------------------------------------------


def cmd_eval(args) -> int:
    run_dir = Path(args.run)
    if not (run_dir / "checkpoint.bin").exists():
        raise FileNotFoundError(f"no checkpoint in {run_dir}")
    sidecar = json.loads((run_dir / "config.json").read_text())
    ds = load_dataset(args.data or sidecar["dataset"])
    agents, cfg, _ = engine.load_checkpoint(run_dir, ds)
    split = "ood" if args.ood else args.split
    view = engine.SplitView(ds, split, cfg.repr, cfg.self_loops)
    if len(view) <= cfg.distractors:
        raise ValueError(f"split {split!r} has {len(view)} distinct items, need more than {cfg.distractors}")
    rng = np.random.default_rng(args.eval_seed)
    res = engine.evaluate(agents, view, cfg.distractors, args.episodes, rng)
    report = {"split": split, "accuracy": res.accuracy, "episodes": args.episodes, "eval_seed": args.eval_seed}
    with open(run_dir / f"episodes-{split}.jsonl", "w") as f:
        for rec in res.records():
            f.write(json.dumps(rec) + "\n")
    if args.toposim:
        report["toposim"] = toposim_for(ds, view, agents, cfg, args.pairs, rng).to_json()
    if args.robustness:
        rob = metrics.robustness_sweep(agents, view, res, args.position)
        rob.write_json(run_dir / f"robustness-{split}.json")
        rob.write_csv(run_dir / f"robustness-{split}.csv")
        report["robustness_original_best"] = rob.fraction_original_best()
    write_json(run_dir / f"eval-{split}.json", report)
    print(json.dumps(report, sort_keys=True))
    return 0


def toposim_for(ds, view, agents, cfg, pairs: str, rng) -> metrics.TopoReport:
    """TS over the distinct items of ``view``: flat inputs against argmax messages."""
    msgs = engine.speak(agents, view).tolist()
    inputs = [worldgen.flat_input(it, ds, cfg.repr) for it in view.items]
    budget = None if pairs == "full" else int(pairs)
    return metrics.topographic_similarity(inputs, msgs, budget, rng)


# -- report --------------------------------------------------------------------

REPORT_COLUMNS = ["fingerprint", "game", "repr", "distractors", "vocab_size", "msg_len", "runs", "seeds",
                  "acc_mean", "acc_std", "ood_mean", "ood_std", "toposim_mean", "toposim_std", "missing"]


def _read_metric(path: Path, *keys):
    try:
        value = json.loads(path.read_text())
        for k in keys:
            value = value[k]
        return float(value)
    except (FileNotFoundError, KeyError, TypeError, json.JSONDecodeError):
        return None


def _mean_std(values):
    present = [v for v in values if v is not None]
    if not present or len(present) < len(values):
        return None, None
    return float(np.mean(present)), float(np.std(present))


def cmd_report(args) -> int:
    groups: dict[str, list] = {}
    for d in map(Path, args.runs):
        sidecar = json.loads((d / "config.json").read_text())
        cfg = TrainConfig.from_dict(sidecar["config"])
        groups.setdefault(fingerprint(cfg), []).append((cfg, d))
    warnings = 0
    rows = []
    for fp, runs in groups.items():
        cfg = runs[0][0]
        acc = [_read_metric(d / "eval-test.json", "accuracy") for _, d in runs]
        ood = [_read_metric(d / "eval-ood.json", "accuracy") for _, d in runs]
        ts = [_read_metric(d / "eval-test.json", "toposim", "toposim") for _, d in runs]
        missing = sum(v is None for v in acc + ood + ts)
        warnings += missing
        row = {"fingerprint": fp, "game": cfg.game, "repr": cfg.repr, "distractors": cfg.distractors,
               "vocab_size": cfg.vocab_size, "msg_len": cfg.msg_len, "runs": len(runs),
               "seeds": ";".join(str(c.seed) for c, _ in runs), "missing": missing}
        for name, vals in (("acc", acc), ("ood", ood), ("toposim", ts)):
            row[f"{name}_mean"], row[f"{name}_std"] = _mean_std(vals)
        rows.append(row)
    out = Path(args.out) if args.out else default_out() / "aggregate.csv"
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w", newline="") as f:
        w = csv.DictWriter(f, REPORT_COLUMNS)
        w.writeheader()
        for row in rows:
            w.writerow({k: ("null" if v is None else v) for k, v in row.items()})
    if warnings:
        print(f"warning: {warnings} missing metric value(s) written as null", file=sys.stderr)
    print(out)
    return 0


# -- parser --------------------------------------------------------------------


def build_parser() -> ArgumentParser:
    p = ArgumentParser(prog="graphgames", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=ArgumentParser)

    g = sub.add_parser("generate", help="write a dataset directory")
    g.add_argument("--game", choices=("g1", "g2"), default="g1")
    g.add_argument("--dims", help="g1 property sizes, e.g. 10,6,8")
    g.add_argument("--num-nodes", type=int, default=0, help="g2 graph size")
    g.add_argument("--sizes", default="40000,5000,5000", help="train,valid,test line counts")
    g.add_argument("--ood-fraction", type=float, default=0.0)
    g.add_argument("--ood-size", type=int, default=0, help="g1 OOD line count (default: distinct OOD objects)")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_generate)

    t = sub.add_parser("train", help="train one run per option combination")
    t.add_argument("--data", required=True, help="dataset directory from `generate`")
    t.add_argument("--config", help="flat YAML file of train options")
    t.add_argument("--game", choices=("g1", "g2"))
    for flag in TRAIN_FLAGS:
        t.add_argument("--" + flag.replace("_", "-"), dest=flag, default=None)
    t.add_argument("--no-self-loops", action="store_true")
    t.add_argument("--off-grid", action="store_true", help="allow values outside the published grid")
    t.add_argument("--jobs", type=int, default=1)
    t.add_argument("--out", help=f"output root (default ${OUT_ENV} or ./runs)")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a trained run directory")
    e.add_argument("run")
    e.add_argument("--data", help="dataset directory (default: the one recorded at train time)")
    e.add_argument("--split", default="test", choices=worldgen.SPLITS)
    e.add_argument("--ood", action="store_true", help="evaluate on the OOD pool")
    e.add_argument("--episodes", type=int, default=1000)
    e.add_argument("--eval-seed", type=int, default=0)
    e.add_argument("--toposim", action="store_true")
    e.add_argument("--pairs", default="500", help="item budget for TS, or 'full'")
    e.add_argument("--robustness", action="store_true")
    e.add_argument("--position", type=int, default=0)
    e.set_defaults(func=cmd_eval)

    r = sub.add_parser("report", help="aggregate run directories into a CSV")
    r.add_argument("runs", nargs="+")
    r.add_argument("--out")
    r.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    if getattr(args, "pairs", "full") != "full" and not str(args.pairs).isdigit():
        parser.error("--pairs takes a positive integer or 'full'")
    try:
        return args.func(args)
    except UsageError as e:
        print(f"graphgames: error: {e}", file=sys.stderr)
        return 1
    except (engine.TrainingDiverged, OSError, ValueError, KeyError, IndexError, worldgen.CoverageError) as e:
        print(f"graphgames: {type(e).__name__}: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
