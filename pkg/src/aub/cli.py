"""Command-line harness: ``aub gen-data | train | eval | translate | compare``."""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import os
import shutil
import sys
import tempfile
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

from . import data as data_mod
from .alignment import TrainingDiverged, train
from .checkpoint import build_model, fingerprint, load_checkpoint, save_checkpoint
from .config import ConfigError, ExperimentConfig, load_config
from .evaluation import evaluate, translate

log = logging.getLogger("aub")

BEST_CKPT = "checkpoint_best.aub"
FINAL_CKPT = "checkpoint_final.aub"


class CommandError(RuntimeError):
    pass


def generate_domains(cfg: ExperimentConfig) -> list[data_mod.DomainDataset]:
    d = cfg.data
    seed = cfg.data_seed
    gen = d["generator"]
    if gen == "moons":
        return data_mod.gen_two_moons(d["n"], d["noise_sd"], seed)
    if gen == "blobs":
        return data_mod.gen_blobs(d["n"], d["n_components"], tuple(d["box"]), seed, d["sd"])
    if gen == "gaussians":
        return data_mod.gen_gaussians(d["n"], d["means"], d["sds"], seed)
    spec = data_mod.SplitSpec(d["split_features"], d["standardize"], seed)
    if gen == "tabular":
        table = data_mod.gen_tabular(d["n_rows"], d["n_features"], seed)
        return data_mod.median_split(table, spec, "tabular", f"gen_tabular(seed={seed})")
    table = data_mod.load_csv(d["path"], has_header=d["has_header"])
    return data_mod.median_split(table, spec, d["name"], d["path"])


def _out_dir(cfg: ExperimentConfig) -> Path:
    if cfg.out is None:
        raise ConfigError("no output directory: set 'out' in the config or pass --out")
    return Path(cfg.out)


def _atomic_write(path: Path, payload: bytes) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    with os.fdopen(fd, "wb") as fh:
        fh.write(payload)
    os.replace(tmp, path)


def write_bundles(domains, directory: Path, data_fp: str) -> None:
    """Write one bundle per domain plus an index; staged then moved into place."""
    directory.parent.mkdir(parents=True, exist_ok=True)
    stage = Path(tempfile.mkdtemp(dir=directory.parent, prefix=".data-"))
    try:
        for j, ds in enumerate(domains):
            data_mod.save_bundle(ds, stage / f"domain_{j}")
        index = {"k": len(domains), "dim": domains[0].dim, "data_fingerprint": data_fp,
                 "domains": [ds.name for ds in domains]}
        (stage / "index.json").write_text(json.dumps(index, indent=2, sort_keys=True) + "\n")
        if directory.exists():
            shutil.rmtree(directory)
        os.replace(stage, directory)
    except BaseException:
        shutil.rmtree(stage, ignore_errors=True)
        raise


def load_bundles(cfg: ExperimentConfig, directory: Path) -> list[data_mod.DomainDataset]:
    index_path = directory / "index.json"
    if not index_path.exists():
        raise CommandError(f"no dataset bundle at {directory}; run 'aub gen-data' first")
    index = json.loads(index_path.read_text())
    if index["data_fingerprint"] != cfg.data_fingerprint():
        raise CommandError(f"bundle at {directory} was generated from a different data section")
    if index["k"] != cfg.k:
        raise CommandError(f"bundle has {index['k']} domains, config expects {cfg.k}")
    return [data_mod.load_bundle(directory / f"domain_{j}") for j in range(index["k"])]


def cmd_gen_data(cfg: ExperimentConfig) -> Path:
    target = _out_dir(cfg) / "data"
    domains = generate_domains(cfg)
    write_bundles(domains, target, cfg.data_fingerprint())
    for j, ds in enumerate(domains):
        log.info("domain %d %s: %d rows, dim %d", j, ds.name, ds.n_rows, ds.dim)
    print(f"bundles={target}")
    return target


def cmd_train(cfg: ExperimentConfig, data_dir: Path | None = None) -> dict:
    out = _out_dir(cfg)
    domains = load_bundles(cfg, data_dir or out / "data")
    model = build_model(cfg.model, domains[0].dim, cfg.seed)
    log.info("training %s: k=%d dim=%d params=%d", cfg.train.mode.value, model.k, model.dim, len(model.store))

    def progress(rec):
        if rec.epoch == 1 or rec.epoch % 10 == 0:
            log.info("epoch %d train_aub %.5f val_aub %.5f", rec.epoch, rec.train_aub, rec.val_aub)

    t0 = time.perf_counter()
    model, trace = train(model, [d.train for d in domains], [d.val for d in domains], cfg.train, progress)
    wall = time.perf_counter() - t0
    extra = {"config_fingerprint": cfg.fingerprint()}
    best = model.store.clone_values()
    model.store.load_values(trace.final_values)
    save_checkpoint(out / FINAL_CKPT, model, cfg.seed, extra)
    model.store.load_values(best)
    save_checkpoint(out / BEST_CKPT, model, cfg.seed, extra)
    _atomic_write(out / "trace.jsonl", trace.to_jsonl().encode())
    print(f"best_epoch={trace.best_epoch}")
    print(f"best_val_aub={trace.best_val_aub!r}")
    return {"best_epoch": trace.best_epoch, "best_val_aub": trace.best_val_aub, "wall_time": wall}


def _load_model_for(cfg: ExperimentConfig, checkpoint: Path | None):
    path = checkpoint or _out_dir(cfg) / BEST_CKPT
    if not Path(path).exists():
        raise CommandError(f"checkpoint {path} not found; run 'aub train' first")
    model, header = load_checkpoint(path)
    if header.get("config_fingerprint") != cfg.fingerprint():
        raise CommandError(f"checkpoint {path} was trained from a different config (fingerprint mismatch)")
    return model


def cmd_eval(cfg: ExperimentConfig, checkpoint: Path | None = None, data_dir: Path | None = None):
    out = _out_dir(cfg)
    model = _load_model_for(cfg, checkpoint)
    domains = load_bundles(cfg, data_dir or out / "data")
    report = evaluate(model, [d.test for d in domains], cfg.fingerprint(),
                      energy=cfg.eval["energy"], roundtrip=cfg.eval["roundtrip"])
    _atomic_write(out / "report.json", report.to_json().encode())
    print(report.to_json(), end="")
    print(f"test_aub={report.test_aub!r}")
    return report


def cmd_translate(cfg: ExperimentConfig, checkpoint, from_j: int, to_j: int, input_path, chunk_rows: int = 4096) -> Path:
    out = _out_dir(cfg)
    model = _load_model_for(cfg, checkpoint)
    if not (0 <= from_j < model.k and 0 <= to_j < model.k):
        raise CommandError(f"domain indices must lie in [0, {model.k}); got {from_j} -> {to_j}")
    target = out / f"translated_{from_j}_to_{to_j}.csv"
    target.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=target.parent, prefix=f".{target.name}.")
    rows = 0
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            for _, block in data_mod.iter_csv_chunks(input_path, chunk_rows):
                if block.shape[1] != model.dim:
                    raise CommandError(f"{input_path} has {block.shape[1]} columns, model expects {model.dim}")
                fh.write(data_mod.format_csv(translate(model, block, from_j, to_j)))
                rows += block.shape[0]
        os.replace(tmp, target)
    except BaseException:
        Path(tmp).unlink(missing_ok=True)
        raise
    log.info("translated %d rows %d -> %d", rows, from_j, to_j)
    print(f"translated={target}")
    return target


def _run_one(cfg: ExperimentConfig, data_dir: Path) -> dict:
    """Train and evaluate one compare entry, reusing a cached result if present."""
    report_path = Path(cfg.out) / "report.json"
    meta_path = Path(cfg.out) / "run.json"
    if report_path.exists() and meta_path.exists():
        meta = json.loads(meta_path.read_text())
        if meta.get("config_fingerprint") == cfg.fingerprint():
            log.info("cache hit for %s", cfg.out)
            return meta
    stats = cmd_train(cfg, data_dir)
    report = cmd_eval(cfg, data_dir=data_dir)
    meta = {
        "config_fingerprint": cfg.fingerprint(),
        "mode": cfg.train.mode.value,
        "test_aub": report.test_aub,
        "parameter_counts": report.parameter_counts,
        "wall_time": stats["wall_time"],
    }
    _atomic_write(meta_path, (json.dumps(meta, indent=2, sort_keys=True) + "\n").encode())
    return meta


def _num_workers() -> int:
    raw = os.environ.get("AUB_NUM_WORKERS", "1")
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError(f"AUB_NUM_WORKERS must be an integer, got {raw!r}") from None
    return max(1, n)


def comparison_rows(names, metas) -> list[dict]:
    rows = []
    for name, meta in zip(names, metas):
        pc = meta["parameter_counts"]
        rows.append({
            "name": name,
            "mode": meta["mode"],
            "test_aub": meta["test_aub"],
            "params_flows": pc["flows"],
            "params_density": pc["density"],
            "params_total": pc["total"],
            "wall_time_s": meta["wall_time"],
        })
    return rows


def format_table_csv(rows) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=list(rows[0]), lineterminator="\n")
    writer.writeheader()
    for r in rows:
        writer.writerow({k: repr(v) if isinstance(v, float) else v for k, v in r.items()})
    return buf.getvalue()


def format_table_markdown(rows) -> str:
    best = min(r["test_aub"] for r in rows)
    lines = ["| config | mode | test AUB (nats) | # T | # Q | total | wall time (s) |",
             "|---|---|---|---|---|---|---|"]
    for r in rows:
        aub = f"{r['test_aub']:.4f}"
        if r["test_aub"] == best and len(rows) > 1:
            aub = f"**{aub}**"
        lines.append(f"| {r['name']} | {r['mode']} | {aub} | {r['params_flows']} | {r['params_density']} "
                     f"| {r['params_total']} | {r['wall_time_s']:.1f} |")
    return "\n".join(lines) + "\n"


def cmd_compare(config_paths, seed=None, out=None) -> list[dict]:
    cfgs = [load_config(p, seed, None) for p in config_paths]
    root = Path(out) if out is not None else (Path(cfgs[0].out) if cfgs[0].out else None)
    if root is None:
        raise ConfigError("no output directory: pass --out")
    data_fps = {c.data_fingerprint() for c in cfgs}
    if len(data_fps) != 1:
        raise CommandError("compare needs every config to describe the same dataset bundle")
    names = [Path(p).stem for p in config_paths]
    runs = []
    for cfg in cfgs:
        key = fingerprint({"run": cfg.resolved(), "data": cfg.data_fingerprint()})
        cfg.out = str(root / "runs" / key[:16])
        runs.append(cfg)
    data_dir = root / "data"
    index = data_dir / "index.json"
    if not index.exists() or json.loads(index.read_text())["data_fingerprint"] != cfgs[0].data_fingerprint():
        write_bundles(generate_domains(cfgs[0]), data_dir, cfgs[0].data_fingerprint())
    workers = min(_num_workers(), len(runs))
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            metas = list(pool.map(_run_one, runs, [data_dir] * len(runs)))
    else:
        metas = [_run_one(cfg, data_dir) for cfg in runs]
    rows = comparison_rows(names, metas)
    _atomic_write(root / "compare.csv", format_table_csv(rows).encode())
    _atomic_write(root / "compare.md", format_table_markdown(rows).encode())
    print(format_table_markdown(rows), end="")
    return rows


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="aub", description="Domain alignment by minimizing the alignment upper bound.")
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, many=False):
        if many:
            p.add_argument("--config", required=True, nargs="+", help="one or more config files")
        else:
            p.add_argument("--config", required=True, help="TOML or JSON experiment config")
        p.add_argument("--out", help="output directory (overrides the config)")
        p.add_argument("--seed", type=int, help="seed override (unsigned 64-bit)")
        return p

    common(sub.add_parser("gen-data", help="generate or ingest the dataset bundles"))
    common(sub.add_parser("train", help="train a model on existing bundles"))
    ev = common(sub.add_parser("eval", help="evaluate a checkpoint on the test splits"))
    ev.add_argument("--checkpoint", type=Path)
    tr = common(sub.add_parser("translate", help="map CSV rows from one domain to another"))
    tr.add_argument("--checkpoint", type=Path)
    tr.add_argument("--from", dest="from_j", type=int, required=True)
    tr.add_argument("--to", dest="to_j", type=int, required=True)
    tr.add_argument("--input", type=Path, required=True)
    common(sub.add_parser("compare", help="train and evaluate several configs on one bundle"), many=True)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(message)s", stream=sys.stderr)
    try:
        if args.command == "compare":
            cmd_compare(args.config, args.seed, args.out)
            return 0
        cfg = load_config(args.config, args.seed, args.out)
        if args.command == "gen-data":
            cmd_gen_data(cfg)
        elif args.command == "train":
            cmd_train(cfg)
        elif args.command == "eval":
            cmd_eval(cfg, args.checkpoint)
        elif args.command == "translate":
            cmd_translate(cfg, args.checkpoint, args.from_j, args.to_j, args.input)
    except ConfigError as exc:
        log.error("invalid config: %s", exc)
        return 2
    except TrainingDiverged as exc:
        log.error("training diverged: %s", exc)
        return 3
    except (CommandError, ValueError, OSError) as exc:
        log.error("%s", exc)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
