"""Command-line entry points: prepare, augment, train, evaluate, ablate, sweep."""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from contextlib import contextmanager
from pathlib import Path

from . import diffmath as dm
from .config import VARIANTS, ConfigError, RunConfig, load_config, parse_pairs
from .ctdg_store import dataset_digest, load_event_file, split_sizes, write_event_file
from .pipeline import Dataset, build_model, make_dataset, run_augment, run_variant
from .train_eval import FacetWeights, evaluate

log = logging.getLogger("dynllm")

EVENTS_FILE = "events.tsv"
MANIFEST_FILE = "manifest.json"
SWEEPS = {"n_user": (2, 3, 4, 5), "n_item": (2, 3, 4, 5), "r": (64, 80, 96, 112, 128)}


class CommandError(RuntimeError):
    def __init__(self, message: str, code: int = 1):
        super().__init__(message)
        self.code = code


# -- prepare ------------------------------------------------------------------

def cmd_prepare(events_path, out_dir, ratios=(0.7, 0.15, 0.15)) -> dict:
    """Ingest, normalise and persist the event log plus a split manifest."""
    log_ = load_event_file(events_path)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_event_file(log_, out / EVENTS_FILE)
    n_train, n_val, _ = split_sizes(len(log_), ratios)
    manifest = {
        "events": len(log_),
        "users": log_.num_users,
        "items": log_.num_items,
        "digest": dataset_digest(out / EVENTS_FILE),
        "ratios": list(ratios),
        "splits": {"train": [0, n_train], "val": [n_train, n_train + n_val],
                   "test": [n_train + n_val, len(log_)]},
    }
    (out / MANIFEST_FILE).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest


def load_store(store) -> tuple:
    store = Path(store)
    try:
        manifest = json.loads((store / MANIFEST_FILE).read_text())
    except FileNotFoundError:
        raise CommandError(f"{store} is not a prepared store (no {MANIFEST_FILE}); run `prepare` first")
    data = make_dataset(load_event_file(store / EVENTS_FILE), tuple(manifest["ratios"]))
    return data, manifest


# -- run directories ----------------------------------------------------------

def run_dir_for(root, cfg: RunConfig, digest: str) -> Path:
    return Path(root) / f"{cfg.variant}-{cfg.digest(digest)[:16]}"


@contextmanager
def run_lock(run_dir: Path):
    run_dir.mkdir(parents=True, exist_ok=True)
    lock = run_dir / ".lock"
    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise CommandError(f"run directory {run_dir} is locked by another command ({lock})")
    try:
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        yield
    finally:
        lock.unlink(missing_ok=True)


def _train_into(cfg: RunConfig, data: Dataset, digest: str, runs_root) -> tuple:
    run_dir = run_dir_for(runs_root, cfg, digest)
    with run_lock(run_dir):
        (run_dir / "config.txt").write_text(cfg.to_text())
        run_log = open(run_dir / "run.log", "w", encoding="utf-8")

        def on_epoch(epoch, loss, r10):
            run_log.write(f"epoch={epoch} loss={loss!r} val_recall@10={r10!r}\n")
            run_log.flush()

        try:
            model, result, report, weights = run_variant(cfg, data, on_epoch)
            run_log.write(f"best_epoch={result.best_epoch} best_val_recall@10={result.best_val_recall!r}\n")
        finally:
            run_log.close()
        dm.save_arrays(run_dir / "checkpoint.bin", result.state)
        (run_dir / "metrics.tsv").write_text(report.table())
        if model.facets:
            (run_dir / "facet_weights.tsv").write_text(weights.table())
    return run_dir, report


def cmd_train(cfg: RunConfig, runs_root) -> tuple:
    data, manifest = load_store(cfg.dataset)
    return _train_into(cfg, data, manifest["digest"], runs_root)


def cmd_evaluate(run_dir) -> tuple:
    """Rebuild the model of a run directory from its checkpoint and recompute its metrics."""
    run_dir = Path(run_dir)
    cfg = load_config(run_dir / "config.txt")
    data, _ = load_store(cfg.dataset)
    with run_lock(run_dir):
        model = build_model(cfg, data)
        weights = FacetWeights(model.facets)
        report = evaluate(model, data.splits, cfg, dm.load_arrays(run_dir / "checkpoint.bin"),
                          on_weights=weights)
        (run_dir / "metrics_eval.tsv").write_text(report.table())
    return run_dir, report


def cmd_augment(cfg: RunConfig, store) -> object:
    data, _ = load_store(store)
    report = run_augment(cfg, data)
    if report.failures:
        path = Path(cfg.cache_dir) / "augment_failures.json"
        path.write_text(json.dumps(report.failures, indent=2) + "\n")
        raise CommandError(f"{len(report.failures)} augmentation failures; see {path}", code=3)
    return report


def cmd_ablate(cfg: RunConfig, runs_root, variants) -> list:
    data, manifest = load_store(cfg.dataset)
    return [_train_into(cfg.replace(variant=v), data, manifest["digest"], runs_root) for v in variants]


def cmd_sweep(cfg: RunConfig, runs_root, params) -> list:
    data, manifest = load_store(cfg.dataset)
    out = []
    for name in params:
        for value in SWEEPS[name]:
            if name == "r" and value > cfg.facet_dim:
                continue
            run_dir, report = _train_into(cfg.replace(**{name: value}), data, manifest["digest"], runs_root)
            out.append((name, value, run_dir, report))
    return out


# -- argument parsing ---------------------------------------------------------

def _config_from_args(args) -> RunConfig:
    pairs = list(args.set or [])
    for flag, key in (("provider", "provider"), ("cache_dir", "cache_dir"),
                      ("refresh_every", "refresh_every"), ("store", "dataset"), ("seed", "seed")):
        value = getattr(args, flag, None)
        if value is not None:
            pairs.append(f"{key}={value}")
    base = load_config(args.config) if getattr(args, "config", None) else RunConfig()
    return parse_pairs(pairs, base)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dynllm", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("prepare", help="ingest an event file and write split manifests")
    p.add_argument("events")
    p.add_argument("out")
    p.add_argument("--split", default="0.7,0.15,0.15")

    def common(p, runs=True):
        p.add_argument("--store", help="directory written by `prepare`")
        p.add_argument("--config", help="key=value configuration file")
        p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one setting")
        p.add_argument("--provider", choices=("live", "mock"))
        p.add_argument("--cache-dir", dest="cache_dir")
        p.add_argument("--refresh-every", dest="refresh_every", type=int)
        p.add_argument("--seed", type=int)
        if runs:
            p.add_argument("--runs", default="runs", help="root directory for run directories")

    common(sub.add_parser("augment", help="fill the profile cache"), runs=False)
    common(sub.add_parser("train", help="train and evaluate one configuration"))
    p = sub.add_parser("evaluate", help="recompute metrics from a run directory")
    p.add_argument("run_dir")
    p = sub.add_parser("ablate", help="train and evaluate ablation variants")
    common(p)
    p.add_argument("--variant", action="append", choices=VARIANTS + ("all",), required=True)
    p = sub.add_parser("sweep", help="sensitivity sweeps over neighbor counts and r")
    common(p)
    p.add_argument("--param", action="append", choices=tuple(SWEEPS), help="default: all")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "prepare":
            ratios = tuple(float(x) for x in args.split.split(","))
            m = cmd_prepare(args.events, args.out, ratios)
            print(f"prepared events={m['events']} users={m['users']} items={m['items']} "
                  f"train={m['splits']['train']} val={m['splits']['val']} test={m['splits']['test']}")
        elif args.command == "augment":
            cfg = _config_from_args(args)
            r = cmd_augment(cfg, cfg.dataset)
            print(f"augmented refresh_points={r.refresh_points} generated={r.generated} "
                  f"titles={r.embedded_titles} skipped={r.skipped}")
        elif args.command == "evaluate":
            run_dir, report = cmd_evaluate(args.run_dir)
            print("\n".join(report.lines()))
        else:
            cfg = _config_from_args(args)
            if not cfg.dataset:
                raise ConfigError("no dataset: pass --store or set dataset=")
            if args.command == "train":
                results = [cmd_train(cfg, args.runs)]
            elif args.command == "ablate":
                variants = VARIANTS if "all" in args.variant else tuple(args.variant)
                results = cmd_ablate(cfg, args.runs, variants)
            else:
                results = [(d, rep) for _, _, d, rep in cmd_sweep(cfg, args.runs, args.param or tuple(SWEEPS))]
            for run_dir, report in results:
                print(f"run {run_dir}")
                print("\n".join(report.lines()))
    except ConfigError as exc:
        print(f"error kind=config message={json.dumps(str(exc))}", file=sys.stderr)
        return 2
    except CommandError as exc:
        print(f"error kind=command message={json.dumps(str(exc))}", file=sys.stderr)
        return exc.code
    except (OSError, ValueError, KeyError, RuntimeError, ArithmeticError) as exc:
        print(f"error kind={type(exc).__name__} message={json.dumps(str(exc))}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
