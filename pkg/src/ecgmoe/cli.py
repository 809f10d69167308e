"""Command-line entry point: ``ecgmoe <command> [options]``."""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import resource
import sys
import time
from pathlib import Path

import numpy as np

from .beats import detect_r_peaks
from .checkpoint import load_checkpoint
from .config import RunConfig, load_config
from .dataset import build_dataset, split_dataset
from .errors import ConfigError, EcgMoeError
from .model import EcgMoE
from .signal import load_record, save_record
from .tasks import TASKS
from .training import evaluate, train, write_metrics

log = logging.getLogger("ecgmoe")

EXIT_OK, EXIT_USAGE, EXIT_CONFIG, EXIT_RUNTIME = 0, 1, 2, 3
BENCH_KEYS = ("records_per_s", "latency_p50_ms", "latency_p95_ms", "peak_rss_mb", "n_records", "batch_size")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: error: {message}")


# ---------------------------------------------------------------------------- helpers


def _config(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else RunConfig()
    if getattr(args, "seed", None) is not None:
        cfg = cfg.with_seed(args.seed)
    return cfg


def _manifest_path(data_dir):
    return Path(data_dir) / "manifest.csv"


def _load_records(cfg: RunConfig, data_dir):
    """Records from a synthesised manifest when present, otherwise generated in memory."""
    manifest = _manifest_path(data_dir)
    if not manifest.exists():
        return build_dataset(cfg.data)
    with open(manifest, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return [load_record(Path(data_dir) / row["path"]) for row in rows]


def _splits(cfg, data_dir, model):
    records = _load_records(cfg, data_dir)
    prepared = [model.prepare(r) for r in records]
    return split_dataset(prepared, cfg.data)


def _model(cfg, checkpoint=None):
    model = EcgMoE(cfg.model)
    if checkpoint is not None:
        load_checkpoint(model, checkpoint)
    return model


def _records_or_test(args, cfg, data_dir, model):
    if args.records:
        return [model.prepare(load_record(p)) for p in args.records]
    return _splits(cfg, data_dir, model)[2]


def _write_rows(path, header, rows):
    fh = open(path, "w", newline="") if path else sys.stdout
    try:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)
    finally:
        if path:
            fh.close()


def _fmt(x):
    return repr(float(x))


# ---------------------------------------------------------------------------- commands


def cmd_synth(args):
    cfg = _config(args)
    out, data_dir, _ = cfg.paths.resolve(args.out)
    data_dir.mkdir(parents=True, exist_ok=True)
    records = build_dataset(cfg.data)
    label_fields = [t.label_field for t in TASKS]
    rows = []
    for i, rec in enumerate(records):
        name = f"{i:04d}_{rec.record_id}.ecg"
        save_record(rec, data_dir / name)
        labels = rec.labels.as_dict()
        rows.append([name] + ["" if labels[f] is None else labels[f] for f in label_fields])
    _write_rows(_manifest_path(data_dir), ["path"] + label_fields, rows)
    print(f"wrote {len(records)} records to {data_dir}")


def cmd_train(args):
    cfg = _config(args)
    out, data_dir, ckpt = cfg.paths.resolve(args.out)
    if args.checkpoint:
        ckpt = Path(args.checkpoint)
    out.mkdir(parents=True, exist_ok=True)
    ckpt.parent.mkdir(parents=True, exist_ok=True)
    model = _model(cfg)
    tr, va, _ = _splits(cfg, data_dir, model)
    model.fit_target_norm(tr)
    result = train(model, tr, va, cfg.train, checkpoint_path=ckpt)
    write_metrics(result.history, result.report, out / "metrics.csv", out / "summary.json",
                  {"best_epoch": result.best_epoch, "checkpoint": str(ckpt)})
    print(f"best epoch {result.best_epoch}, validation loss {result.report.loss:.6f}; checkpoint {ckpt}")


def cmd_eval(args):
    cfg = _config(args)
    out, data_dir, ckpt = cfg.paths.resolve(args.out)
    model = _model(cfg, args.checkpoint or ckpt)
    _, _, te = _splits(cfg, data_dir, model)
    report = evaluate(model, te, cfg.train.tasks, cfg.train.lambda_cont, cfg.train.temperature)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "eval.json", "w") as fh:
        json.dump(report.to_dict(), fh, indent=2, sort_keys=True)
    for task, metrics in report.metrics.items():
        for name, value in metrics.items():
            print(f"{task} {name} {value:.6f}")


def peak_rss_mb():
    # ru_maxrss is KiB on Linux, bytes on macOS.
    rss = resource.getrusage(resource.RUSAGE_SELF).ru_maxrss
    return rss / (1024 * 1024) if sys.platform == "darwin" else rss / 1024


def cmd_bench(args):
    cfg = _config(args)
    out, data_dir, ckpt = cfg.paths.resolve(args.out)
    model = _model(cfg, args.checkpoint or ckpt)
    records = _load_records(cfg, data_dir)
    if args.limit:
        records = records[: args.limit]
    bs = args.batch_size
    latencies = []
    start = time.perf_counter()
    for i in range(0, len(records), bs):
        t0 = time.perf_counter()
        for rec in records[i : i + bs]:
            model.predict_all(model.prepare(rec), cfg.train.tasks)
        latencies.append((time.perf_counter() - t0) * 1000.0)
    total = time.perf_counter() - start
    result = {
        "records_per_s": len(records) / total if total > 0 else float("inf"),
        "latency_p50_ms": float(np.percentile(latencies, 50)),
        "latency_p95_ms": float(np.percentile(latencies, 95)),
        "peak_rss_mb": peak_rss_mb(),
        "n_records": len(records),
        "batch_size": bs,
    }
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "bench.json", "w") as fh:
        json.dump(result, fh, indent=2, sort_keys=True)
    print(json.dumps(result, sort_keys=True))


def cmd_beats(args):
    rec = load_record(args.record)
    peaks = detect_r_peaks(rec, args.lead)
    rr = np.diff(peaks) * 1000.0 / rec.sample_rate_hz
    rows = [[i, int(p), "" if i == 0 else _fmt(rr[i - 1])] for i, p in enumerate(peaks)]
    _write_rows(args.csv, ["index", "sample", "rr_ms"], rows)


def cmd_gate_inspect(args):
    cfg = _config(args)
    out, data_dir, ckpt = cfg.paths.resolve(args.out)
    model = _model(cfg, args.checkpoint or ckpt)
    rows = []
    for prep in _records_or_test(args, cfg, data_dir, model):
        shared, _ = model.forward_shared(prep)
        for t in TASKS:
            o, _ = model.forward_task(shared, prep, t.name)
            g = o.gate_weights if o.gate_weights is not None else [np.nan] * 5
            am, ap = o.alphas
            rows.append([prep.record_id, t.name] + [_fmt(x) for x in g] + [_fmt(am), "" if ap is None else _fmt(ap)])
    _write_rows(args.csv, ["record_id", "task", "g0", "g1", "g2", "g3", "g4", "alpha_m", "alpha_p"], rows)


def cmd_attn_dump(args):
    cfg = _config(args)
    out, data_dir, ckpt = cfg.paths.resolve(args.out)
    model = _model(cfg, args.checkpoint or ckpt)
    if model.periodic is None:
        raise ConfigError("attn-dump needs the periodic branch", "model.use_periodic")
    rows = []
    for prep in _records_or_test(args, cfg, data_dir, model):
        shared, _ = model.forward_shared(prep)
        for t in TASKS:
            o, _ = model.forward_task(shared, prep, t.name)
            for stage, w in o.attention_weights.items():
                for h, r, c in np.ndindex(*w.shape):
                    rows.append([prep.record_id, t.name, stage, h, r, c, _fmt(w[h, r, c])])
    _write_rows(args.csv, ["record_id", "task", "stage", "head", "row", "col", "weight"], rows)


# ---------------------------------------------------------------------------- parser


def _formatter(prog):
    # Fixed width keeps --help output independent of the terminal.
    return argparse.HelpFormatter(prog, width=88)


def build_parser():
    p = _Parser(prog="ecgmoe", description="Multi-task ECG mixture-of-experts toolkit.",
                formatter_class=_formatter)
    sub = p.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)
    sub.required = True

    def common(sp, checkpoint=False, seed=True):
        sp.add_argument("--config", metavar="PATH", help="run-config YAML file (defaults apply when omitted)")
        if seed:
            sp.add_argument("--seed", type=int, metavar="N", help="override the training and initialisation seed")
        sp.add_argument("--out", metavar="DIR", help="output directory (overrides paths.out_dir)")
        if checkpoint:
            sp.add_argument("--checkpoint", metavar="PATH", help="checkpoint file (default: <out>/model.ckpt)")

    sp = sub.add_parser("synth", help="generate the synthetic dataset and its manifest", formatter_class=_formatter)
    common(sp)
    sp.set_defaults(func=cmd_synth)

    sp = sub.add_parser("train", help="train a model and write metrics plus the best checkpoint",
                        formatter_class=_formatter)
    common(sp, checkpoint=True)
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("eval", help="evaluate a checkpoint on the test split", formatter_class=_formatter)
    common(sp, checkpoint=True)
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("bench", help="measure inference speed and peak memory", formatter_class=_formatter)
    common(sp, checkpoint=True)
    sp.add_argument("--batch-size", type=int, default=8, metavar="N", help="records per timed batch (default 8)")
    sp.add_argument("--limit", type=int, metavar="N", help="benchmark only the first N records")
    sp.set_defaults(func=cmd_bench)

    sp = sub.add_parser("beats", help="detect R-peaks in one record file and dump index,sample,rr_ms",
                        formatter_class=_formatter)
    sp.add_argument("record", metavar="RECORD", help="record file in ECGMOE01 format")
    sp.add_argument("--lead", type=int, default=0, metavar="N", help="lead used for detection (default 0)")
    sp.add_argument("--csv", metavar="PATH", help="write CSV here instead of stdout")
    sp.set_defaults(func=cmd_beats)

    for name, func, what in (
        ("gate-inspect", cmd_gate_inspect, "dump expert gate vectors and fusion alphas per record and task"),
        ("attn-dump", cmd_attn_dump, "dump integration attention weights for each record and task"),
    ):
        sp = sub.add_parser(name, help=what, formatter_class=_formatter)
        common(sp, checkpoint=True, seed=False)
        sp.add_argument("records", nargs="*", metavar="RECORD", help="record files (default: the test split)")
        sp.add_argument("--csv", metavar="PATH", help="write CSV here instead of stdout")
        sp.set_defaults(func=func)
    return p


def main(argv=None):
    level = getattr(logging, os.environ.get("ECGMOE_LOG", "WARNING").upper(), None)
    logging.basicConfig(level=level if isinstance(level, int) else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help
        return EXIT_OK if exc.code in (0, None) else EXIT_USAGE
    try:
        args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (EcgMoeError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


def main_exit():
    sys.exit(main())


if __name__ == "__main__":
    main_exit()
