"""Command-line entry point: ``lrurec <subcommand> [--config FILE] [flags]``.

Settings come from a flat ``key = value`` file and are overridden by flags.
Every file a run writes goes under ``--out`` and carries the hash of the
resolved settings, as a ``# config_hash=...`` first line for delimited text
or a ``config_hash`` root key for JSON.
"""

import argparse
import configparser
import hashlib
import json
import logging
import os
import sys
import types
from dataclasses import MISSING, asdict, dataclass, fields

import numpy as np

from . import bench
from .data import SplitDataset, build_split, filter_min_interactions, read_interactions
from .evaluate import evaluate, lambda_report
from .model import init_session, load_checkpoint, model_step, save_checkpoint
from .train import METRIC_COLUMNS, TrainConfig, train

log = logging.getLogger("lrurec")


class ConfigError(ValueError):
    """Invalid or missing setting; reported with exit code 2."""


@dataclass(frozen=True)
class RunConfig:
    out: str = "out"
    input: str | None = None
    delimiter: str = ","
    columns: str = "0,1,2"
    skip_header: bool = False
    min_count: int = 5
    split: str | None = None
    checkpoint: str | None = None
    phase: str = "test"
    negatives: int | None = None
    ks: str = "10,20"
    items: str | None = None
    top_k: int = 10
    lengths: str = "2,4,8,16,32,64,128,256,512,1024"
    histories: str = "10,100,1000"
    steps: int = 256
    bench_batch: int = 1
    bench_items: int = 1000
    reps: int = 5
    workers: int = 1


HELP = {
    "out": "output directory; every artifact is written here",
    "input": "raw interaction log",
    "delimiter": "field delimiter of the raw log ('tab' for a tab)",
    "columns": "0-based column positions of user,item,timestamp",
    "skip_header": "skip the first line of the raw log",
    "min_count": "minimum interactions per item and per user",
    "split": "split manifest written by preprocess",
    "checkpoint": "model checkpoint written by train",
    "phase": "validation or test",
    "negatives": "rank against this many sampled negatives instead of all items",
    "ks": "comma-separated cutoffs",
    "items": "comma-separated raw item ids fed one at a time",
    "top_k": "recommendations shown per step",
    "lengths": "comma-separated power-of-two sequence lengths",
    "histories": "comma-separated history lengths to pre-warm",
    "steps": "timed steps per history length",
    "bench_batch": "sequences advanced together per step",
    "bench_items": "item vocabulary size of the benchmark model",
    "reps": "timed repetitions per length",
    "workers": "worker count (only 1 is supported)",
}

RUN_FIELDS = {f.name: f for f in fields(RunConfig)}
TRAIN_FIELDS = {f.name: f for f in fields(TrainConfig)}
ALL_FIELDS = {**TRAIN_FIELDS, **RUN_FIELDS}

TRAIN_KEYS = tuple(TRAIN_FIELDS)
COMMANDS = {
    "preprocess": ("input", "delimiter", "columns", "skip_header", "min_count", "max_len"),
    "train": ("split",) + TRAIN_KEYS,
    "evaluate": ("checkpoint", "split", "phase", "negatives", "ks", "seed"),
    "bench-scan": ("lengths", "hidden_dim", "bench_batch", "reps", "seed"),
    "bench-incremental": ("histories", "steps", "hidden_dim", "bench_batch", "bench_items",
                          "seed"),
    "lambda-report": ("checkpoint",),
    "recommend": ("checkpoint", "split", "items", "top_k"),
}
DESCRIPTIONS = {
    "preprocess": "raw log -> filtered leave-last-out split manifest and item map",
    "train": "split -> best checkpoint, training report and per-round metrics",
    "evaluate": "checkpoint + split -> ranking metrics",
    "bench-scan": "forward time and pass count of the parallel scan per length",
    "bench-incremental": "per-step latency of incremental inference per history length",
    "lambda-report": "mean eigenvalue modulus per block of a checkpoint",
    "recommend": "feed items one at a time and print top-k after each",
}


# ------------------------------------------------------------ settings


def _default(f):
    return f.default if f.default is not MISSING else None


def _coerce(name, raw):
    f = ALL_FIELDS[name]
    kind = f.type
    optional = isinstance(kind, types.UnionType)
    if optional:
        kind = next(t for t in kind.__args__ if t is not type(None))
    if not isinstance(raw, str):
        return raw
    text = raw.strip()
    if optional and text.lower() in ("", "none", "null"):
        return None
    try:
        if kind is bool:
            low = text.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError
        if kind is int:
            return int(text)
        if kind is float:
            return float(text)
    except ValueError:
        raise ConfigError(f"field '{name}': cannot parse {raw!r} as {kind.__name__}") from None
    return text


def read_config_file(path):
    """Parse a flat ``key = value`` file into a dict of raw strings."""
    parser = configparser.ConfigParser(interpolation=None, comment_prefixes=("#", ";"))
    parser.optionxform = str
    try:
        with open(path, encoding="utf-8") as fh:
            parser.read_string("[run]\n" + fh.read(), source=path)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    except configparser.Error as exc:
        raise ConfigError(f"malformed config {path}: {exc.message.splitlines()[0]}") from None
    values = dict(parser["run"])
    unknown = sorted(set(values) - set(ALL_FIELDS))
    if unknown:
        raise ConfigError(f"unknown config key(s): {', '.join(unknown)}")
    return values


def resolve(path, overrides):
    """Defaults, then the config file, then flags; returns ``(TrainConfig, RunConfig)``."""
    values = read_config_file(path) if path else {}
    values.update({k: v for k, v in overrides.items() if v is not None})
    typed = {k: _coerce(k, v) for k, v in values.items()}
    try:
        tcfg = TrainConfig(**{k: v for k, v in typed.items() if k in TRAIN_FIELDS})
    except ValueError as exc:
        raise ConfigError(f"invalid training setting: {exc}") from None
    rcfg = RunConfig(**{k: v for k, v in typed.items() if k in RUN_FIELDS})
    _validate_run(rcfg)
    return tcfg, rcfg


def _validate_run(rc):
    if rc.phase not in ("validation", "test"):
        raise ConfigError(f"field 'phase': expected 'validation' or 'test', got {rc.phase!r}")
    for name in ("min_count", "top_k", "steps", "bench_batch", "bench_items", "workers"):
        if getattr(rc, name) < (0 if name == "steps" else 1):
            raise ConfigError(f"field '{name}': must be positive, got {getattr(rc, name)}")
    if rc.reps < 5:
        raise ConfigError(f"field 'reps': must be >= 5, got {rc.reps}")
    if rc.workers != 1:
        raise ConfigError("field 'workers': only single-worker runs are supported")
    if rc.negatives is not None and rc.negatives < 1:
        raise ConfigError("field 'negatives': must be >= 1 when set")
    for name in ("columns", "ks", "lengths", "histories"):
        _int_list(rc, name)


def _int_list(rc, name):
    raw = getattr(rc, name)
    try:
        vals = [int(v) for v in raw.split(",") if v.strip()]
    except ValueError:
        raise ConfigError(f"field '{name}': expected comma-separated integers, got {raw!r}") from None
    if not vals:
        raise ConfigError(f"field '{name}': empty list")
    return vals


def _require(rc, name):
    value = getattr(rc, name)
    if value is None:
        raise ConfigError(f"field '{name}': required for this command")
    return value


def config_hash(tcfg, rcfg, command):
    doc = {"command": command, **asdict(tcfg), **asdict(rcfg)}
    doc.pop("out")
    blob = json.dumps(doc, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


# --------------------------------------------------------------- output


class Output:
    """Writer confined to one directory that stamps each file with the hash."""

    def __init__(self, root, stamp):
        self.root = os.path.abspath(root)
        self.stamp = stamp
        os.makedirs(self.root, exist_ok=True)

    def path(self, name):
        path = os.path.abspath(os.path.join(self.root, name))
        if os.path.dirname(path) != self.root:
            raise ValueError(f"refusing to write outside {self.root}: {name}")
        return path

    def table(self, name, header, rows):
        with open(self.path(name), "w", encoding="utf-8") as fh:
            fh.write(f"# config_hash={self.stamp}\n")
            fh.write("\t".join(header) + "\n")
            for row in rows:
                fh.write("\t".join(str(v) for v in row) + "\n")
        return self.path(name)

    def json(self, name, doc):
        with open(self.path(name), "w", encoding="utf-8") as fh:
            json.dump({"config_hash": self.stamp, **doc}, fh, sort_keys=True, indent=1)
            fh.write("\n")
        return self.path(name)


# ------------------------------------------------------------- commands


def cmd_preprocess(tc, rc, out):
    delim = "\t" if rc.delimiter.lower() in ("tab", "\\t") else rc.delimiter
    cols = tuple(_int_list(rc, "columns"))
    if len(cols) != 3:
        raise ConfigError("field 'columns': expected three positions user,item,timestamp")
    raw = read_interactions(_require(rc, "input"), delim, cols, rc.skip_header)
    kept = filter_min_interactions(raw, rc.min_count)
    split = build_split(kept, tc.max_len)
    split.meta.update({"interactions_raw": len(raw), "interactions_kept": len(kept),
                       "min_count": rc.min_count})
    split.save(out.path("split.json"), {"config_hash": out.stamp})
    out.table("items.tsv", ("index", "item"), enumerate(split.item_ids, start=1))
    print(f"users={split.num_users} items={split.num_items} -> {out.path('split.json')}")


def cmd_train(tc, rc, out):
    split = SplitDataset.load(_require(rc, "split"))
    with open(out.path("metrics.tsv"), "w", encoding="utf-8") as fh:
        fh.write(f"# config_hash={out.stamp}\n" + "\t".join(METRIC_COLUMNS) + "\n")
        report, best = train(tc, split, metrics_file=fh)
    save_checkpoint(best, out.path("best.ckpt"), {"config_hash": out.stamp})
    out.json("report.json", {
        **report.deterministic_view(), "timings": report.timings, "config": report.config,
        "digest": best.digest(),
    })
    print(f"stop={report.stop_reason} iterations={report.iterations} "
          f"best_{tc.select_metric}={report.best_score:.5f} digest={best.digest()}")


def cmd_evaluate(tc, rc, out):
    params, _ = load_checkpoint(_require(rc, "checkpoint"))
    split = SplitDataset.load(_require(rc, "split"))
    rng = None if rc.negatives is None else np.random.default_rng(tc.seed)
    res = evaluate(params, split, rc.phase, rc.negatives, rng, ks=tuple(_int_list(rc, "ks")))
    out.table(f"metrics-{rc.phase}.tsv", ("phase", "mode", "k", "metric", "value"), res.rows())
    out.json(f"summary-{rc.phase}.json", res.summary())
    print(" ".join(f"{k}={v:.5f}" if isinstance(v, float) else f"{k}={v}"
                   for k, v in res.summary().items()))


def cmd_bench_scan(tc, rc, out):
    recs = bench.bench_scan(_int_list(rc, "lengths"), tc.hidden_dim, rc.bench_batch, rc.reps,
                            rng=tc.seed)
    out.table("bench-scan.tsv", bench.BenchRecord.HEADER, (r.row() for r in recs))
    for r in recs:
        print(f"L={r.L} passes={r.passes} median={r.median:.6f}s")


def cmd_bench_incremental(tc, rc, out):
    recs = bench.bench_incremental(_int_list(rc, "histories"), rc.steps, tc.hidden_dim,
                                   rc.bench_items, rc.bench_batch, rng=tc.seed)
    out.table("bench-incremental.tsv", bench.BenchRecord.HEADER + ("cumulative_r2",),
              (r.row() + (f"{bench.linear_r2(r.cumulative):.6f}",) for r in recs))
    out.table("bench-incremental-cumulative.tsv", ("history", "step", "cumulative_s"),
              ((r.L, i + 1, f"{t:.9f}") for r in recs for i, t in enumerate(r.cumulative)))
    for r in recs:
        print(f"history={r.L} median={r.median * 1e3:.4f}ms p90={r.p90 * 1e3:.4f}ms")


def cmd_lambda_report(tc, rc, out):
    params, _ = load_checkpoint(_require(rc, "checkpoint"))
    means = lambda_report(params)
    out.table("lambda.tsv", ("block", "mean_modulus"),
              ((i, f"{m:.9f}") for i, m in enumerate(means)))
    for i, m in enumerate(means):
        print(f"block {i}: mean |lambda| = {m:.6f}")


def cmd_recommend(tc, rc, out):
    params, _ = load_checkpoint(_require(rc, "checkpoint"))
    raw_items = [v.strip() for v in _require(rc, "items").split(",") if v.strip()]
    if rc.split is not None:
        split = SplitDataset.load(rc.split)
        if split.vocab_hash != params.vocab_hash:
            raise ValueError(f"vocabulary mismatch: split {split.vocab_hash} "
                             f"vs checkpoint {params.vocab_hash}")
        index, names = split.item_index(), split.item_ids
        try:
            ids = [index[v] for v in raw_items]
        except KeyError as exc:
            raise ValueError(f"item {exc.args[0]!r} is not in the split vocabulary") from None
    else:
        names = [str(i) for i in range(1, params.item_count + 1)]
        ids = [int(v) for v in raw_items]
    state = init_session(params)
    rows = []
    for step, item in enumerate(ids, start=1):
        top, scores, state = model_step(params, state, item, rc.top_k)
        shown = ",".join(names[i - 1] for i in top)
        rows.append((step, names[item - 1], shown))
        print(f"after {names[item - 1]}: {shown}")
    out.table("recommend.tsv", ("step", "item", "top_k"), rows)


HANDLERS = {
    "preprocess": cmd_preprocess,
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "bench-scan": cmd_bench_scan,
    "bench-incremental": cmd_bench_incremental,
    "lambda-report": cmd_lambda_report,
    "recommend": cmd_recommend,
}


# --------------------------------------------------------------- parser


def build_parser():
    parser = argparse.ArgumentParser(prog="lrurec", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True, metavar="command")
    for name, keys in COMMANDS.items():
        p = sub.add_parser(name, help=DESCRIPTIONS[name], description=DESCRIPTIONS[name],
                           formatter_class=argparse.ArgumentDefaultsHelpFormatter)
        p.add_argument("--config", default=None, help="flat key = value settings file")
        p.add_argument("--out", default=None,
                       help=f"{HELP['out']} (config key, default {RunConfig.out!r})")
        for key in keys:
            f = ALL_FIELDS[key]
            text = HELP.get(key, "training setting")
            p.add_argument("--" + key.replace("_", "-"), dest=key, default=None, metavar="VALUE",
                           help=f"{text} (config key, default {_default(f)!r})")
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    overrides = {k: getattr(args, k) for k in COMMANDS[args.command] + ("out",)}
    try:
        tcfg, rcfg = resolve(args.config, overrides)
        out = Output(rcfg.out, config_hash(tcfg, rcfg, args.command))
        HANDLERS[args.command](tcfg, rcfg, out)
    except ConfigError as exc:
        print(f"lrurec {args.command}: config error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # runtime failure: one line, no traceback
        log.debug("failure", exc_info=True)
        msg = str(exc).splitlines()[0] if str(exc) else type(exc).__name__
        print(f"lrurec {args.command}: error: {msg}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
