"""Command-line front end: import, synth, train, lodo, ablate, report, evaluate, export-embeddings, replay."""

from __future__ import annotations

import argparse
import csv
import dataclasses
import datetime as _dt
import hashlib
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .data import (DATASETS, SETTINGS, SYNTH_PRESETS, FormatError, RawDataError, WindowedDataset, import_dataset,
                   load_cwd, save_cwd, synth_generate)
from .hsic import MEASURES
from .losses import CLS_MODES, CON_MODES, L1_REDUCTIONS
from .metrics import aggregate_seeds
from .model import PRESETS
from .pipeline import (BASELINES, VARIANTS, DivergenceError, LodoTable, TrainConfig, apply_variant, evaluate,
                       export_embeddings, lodo_run, save_run_checkpoint)

log = logging.getLogger("caudg")

EXIT_OK, EXIT_USAGE, EXIT_DIVERGED = 0, 2, 3

# spellings accepted by --ablation besides the short variant keys
ABLATION_ALIASES = {
    "w/o-L_ind": "no-ind",
    "w/o-L_con": "no-con",
    "w/o-both": "no-both",
    "w/o-IDS": "no-ids",
    "w/o-CDPL": "no-cdpl",
    "L_orth": "orth",
    "L_corr": "corr",
    "no-early-fork": "no-fork",
}


class UsageError(ValueError):
    pass


# ---------------------------------------------------------------------------
# configuration layering: CLI flag > config file > preset default
# ---------------------------------------------------------------------------

_FIELDS = {f.name: f for f in dataclasses.fields(TrainConfig)}


def _coerce(key: str, raw: str, like):
    if isinstance(like, bool):
        low = raw.strip().lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise UsageError(f"{key}: expected a boolean, got {raw!r}")
    if isinstance(like, int):
        return int(raw)
    if isinstance(like, float):
        return float(raw)
    return raw.strip()


def parse_config_file(path) -> dict:
    """Read ``key = value`` lines; ``#`` starts a comment; ``arch.<field>`` keys override the model preset."""
    out: dict = {}
    arch: dict = {}
    defaults = TrainConfig()
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise UsageError(f"cannot read config file {path}: {exc.strerror}") from None
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{lineno}: expected key = value")
        key, value = (s.strip() for s in line.split("=", 1))
        try:
            if key.startswith("arch."):
                arch[key[5:]] = _coerce(key, value, 0) if value.lstrip("-").isdigit() else _coerce(key, value, value)
            elif key in _FIELDS and key != "arch_overrides":
                out[key] = _coerce(key, value, getattr(defaults, key))
            else:
                raise UsageError(f"{path}:{lineno}: unknown key {key!r}")
        except ValueError as exc:
            raise UsageError(f"{path}:{lineno}: {exc}") from None
    if arch:
        out["arch_overrides"] = arch
    return out


def resolve_variant(name: str) -> str:
    key = ABLATION_ALIASES.get(name, name)
    if key not in VARIANTS and key not in BASELINES:
        raise UsageError(f"unknown ablation {name!r}; choose from {sorted(VARIANTS) + sorted(BASELINES)}")
    return key


def _default_arch(ds: WindowedDataset) -> str:
    src = ds.source or ""
    if src == "cross-dataset":
        return "ucihar"
    if src.startswith("dsads/cross-position"):
        return "dsads-position"
    head = src.split("/", 1)[0]
    return head if head in PRESETS else "synthetic"


def build_config(args, ds: WindowedDataset | None = None) -> TrainConfig:
    """Layer preset defaults, the optional config file, then explicit flags."""
    layered: dict = {}
    if getattr(args, "config", None):
        layered.update(parse_config_file(args.config))
    flags = {
        "alpha": args.alpha, "beta": args.beta, "ids_eps": args.ids_eps, "ids_max_draws": args.ids_max_draws,
        "con_mode": args.loss_con_mode, "measure": args.ind_measure, "cls_mode": args.cls_mode,
        "l1_reduce": args.l1_reduce, "lr": args.lr, "epochs": args.epochs, "batch_size": args.batch_size,
        "arch": args.arch, "val_fraction": args.val_fraction,
        "cdpl_shared": True if args.cdpl_shared else None, "cdpl_stopgrad": True if args.cdpl_stopgrad else None,
    }
    layered.update({k: v for k, v in flags.items() if v is not None})

    seed = args.seed
    if seed is None:
        seed = layered.get("seed")
    if seed is None and os.environ.get("CAUDG_SEED"):
        try:
            seed = int(os.environ["CAUDG_SEED"])
        except ValueError:
            raise UsageError(f"CAUDG_SEED must be an integer, got {os.environ['CAUDG_SEED']!r}") from None
    layered["seed"] = 0 if seed is None else seed
    if getattr(args, "target", None) is not None:
        layered["target"] = args.target
    if "arch" not in layered and ds is not None:
        layered["arch"] = _default_arch(ds)

    variant = getattr(args, "ablation", None) or layered.pop("variant", None) or "full"
    variant = resolve_variant(variant)
    if variant == "no-ids" and (args.ids_eps is not None or args.ids_max_draws is not None):
        raise UsageError("--ids-eps/--ids-max-draws conflict with an ablation that disables IDS")
    if variant == "erm" and (args.alpha is not None or args.beta is not None):
        raise UsageError("--alpha/--beta have no effect on the ERM baseline")
    cfg = apply_variant(TrainConfig(**{k: v for k, v in layered.items() if k != "variant"}), variant)
    try:
        cfg.validate()
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    if cfg.con_mode not in CON_MODES or cfg.cls_mode not in CLS_MODES or cfg.measure not in MEASURES:
        raise UsageError("invalid loss mode in configuration")
    if cfg.l1_reduce not in L1_REDUCTIONS:
        raise UsageError(f"invalid l1_reduce {cfg.l1_reduce!r}")
    return cfg


def config_hash(cfg: TrainConfig, extra: dict | None = None) -> str:
    snap = {k: v for k, v in cfg.to_dict().items() if k != "seed"}
    blob = json.dumps({"config": snap, **(extra or {})}, sort_keys=True, default=str)
    return hashlib.sha256(blob.encode()).hexdigest()[:12]


# ---------------------------------------------------------------------------
# run directories and manifests
# ---------------------------------------------------------------------------


def _now() -> str:
    return _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds")


def data_fingerprint(path) -> str:
    h = hashlib.sha256()
    for name in ("meta.json", "data.f32", "labels.u32", "domains.u32"):
        p = Path(path) / name
        if p.exists():
            h.update(p.read_bytes())
    return h.hexdigest()[:16]


def write_manifest(run_dir: Path, command: str, argv, cfg: TrainConfig, data: str, extra: dict) -> Path:
    run_dir.mkdir(parents=True, exist_ok=True)
    manifest = {
        "command": command,
        "argv": list(argv),
        "config": cfg.to_dict(),
        "seed": cfg.seed,
        "code_version": __version__,
        "created": _now(),
        "data": str(data),
        "data_sha256": data_fingerprint(data),
        "outputs": {"results": "results.json", "confusion": "confusion.csv"},
        **extra,
    }
    path = run_dir / "manifest.json"
    if path.exists():
        path.unlink()
    path.write_text(json.dumps(manifest, indent=2, default=str))
    return path


def write_confusion(path: Path, cm: np.ndarray, class_names) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["true\\pred", *class_names])
        for name, row in zip(class_names, np.asarray(cm)):
            w.writerow([name, *row.tolist()])


def _load_data(path) -> WindowedDataset:
    try:
        return load_cwd(path)
    except FileNotFoundError as exc:
        raise UsageError(f"no dataset at {path}: {exc}") from None


def _summary_line(label, acc: float, f1: float) -> str:
    return f"target={label} acc={acc:.4f} macroF1={f1:.4f}"


def _write_lodo(run_dir: Path, table: LodoTable, ds: WindowedDataset, checkpoints: bool = True) -> dict:
    rows = []
    for r in table.rows:
        t = r.config["target"]
        sub = run_dir / f"target{t}"
        sub.mkdir(exist_ok=True)
        write_confusion(sub / "confusion.csv", r.confusion, ds.class_names)
        if checkpoints:
            save_run_checkpoint(r, sub / "checkpoint")
        rows.append(r.to_json())
    results = {"kind": "lodo", "variant": table.variant, "seed": table.seed, "grid": table.grid(),
               "avg_acc": table.avg_acc, "avg_f1": table.avg_f1, "runs": rows, "finished": _now()}
    (run_dir / "results.json").write_text(json.dumps(results, indent=2))
    total = sum((r.confusion for r in table.rows), np.zeros_like(table.rows[0].confusion))
    write_confusion(run_dir / "confusion.csv", total, ds.class_names)
    return results


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_import(args) -> int:
    try:
        ds = import_dataset(args.raw_dir, args.dataset, args.setting)
    except RawDataError as exc:
        raise UsageError(str(exc)) from None
    save_cwd(ds, args.out)
    print(f"imported {ds.source}: {len(ds)} windows, {ds.num_classes} classes, {ds.num_domains} domains -> {args.out}")
    return EXIT_OK


def cmd_synth(args) -> int:
    seed = args.seed if args.seed is not None else int(os.environ.get("CAUDG_SEED", 0))
    ds = synth_generate(SYNTH_PRESETS[args.preset](seed=seed))
    save_cwd(ds, args.out)
    print(f"synthetic preset {args.preset} seed {seed}: {len(ds)} windows, {ds.num_domains} domains -> {args.out}")
    return EXIT_OK


def run_train(cfg: TrainConfig, data: str, out: Path, argv) -> dict:
    from .data import lodo_partition
    from .pipeline import train

    ds = _load_data(data)
    if not 0 <= cfg.target < ds.num_domains:
        raise UsageError(f"target {cfg.target} outside 0..{ds.num_domains - 1}")
    run_dir = out / f"{config_hash(cfg, {'data': data_fingerprint(data)})}-seed{cfg.seed}"
    write_manifest(run_dir, "train", argv, cfg, data, {})
    part = lodo_partition(ds, cfg.target, cfg.val_fraction, seed=cfg.seed)
    r = train(cfg, part)
    write_confusion(run_dir / "confusion.csv", r.confusion, ds.class_names)
    save_run_checkpoint(r, run_dir / "checkpoint")
    results = {"kind": "train", **r.to_json(), "finished": _now()}
    (run_dir / "results.json").write_text(json.dumps(results, indent=2))
    print(_summary_line(cfg.target, r.test_acc, r.test_f1))
    return {"run_dir": str(run_dir), **results}


def run_lodo(cfg: TrainConfig, data: str, out: Path, argv, targets=None) -> dict:
    ds = _load_data(data)
    run_dir = out / f"{config_hash(cfg, {'data': data_fingerprint(data), 'targets': targets})}-seed{cfg.seed}"
    write_manifest(run_dir, "lodo", argv, cfg, data, {"targets": targets})
    table = lodo_run(cfg, ds, targets)
    results = _write_lodo(run_dir, table, ds)
    for r in table.rows:
        print(_summary_line(r.config["target"], r.test_acc, r.test_f1))
    print(_summary_line("AVG", table.avg_acc, table.avg_f1))
    return {"run_dir": str(run_dir), **results}


def run_ablate(cfg: TrainConfig, data: str, out: Path, argv, variants, seeds, targets=None) -> dict:
    ds = _load_data(data)
    summary = {}
    for v in variants:
        tables = []
        for s in seeds:
            vcfg = dataclasses.replace(apply_variant(cfg, v), seed=s)
            run_dir = out / f"{config_hash(vcfg, {'data': data_fingerprint(data), 'targets': targets})}-seed{s}"
            write_manifest(run_dir, "lodo", argv, vcfg, data, {"targets": targets})
            table = lodo_run(vcfg, ds, targets)
            _write_lodo(run_dir, table, ds, checkpoints=False)
            tables.append(table)
        accs = [t.avg_acc for t in tables]
        summary[v] = {"label": {**VARIANTS, **BASELINES}[v][0], "acc_values": accs, "acc_mean": float(np.mean(accs))}
        print(f"{v:>8} {summary[v]['label']:<28} acc={summary[v]['acc_mean']:.4f}")
    (out / "ablation.json").write_text(json.dumps(summary, indent=2))
    return summary


def _train_like(args, command: str) -> int:
    out = Path(args.out)
    cfg = build_config(args, _load_data(args.data))
    if command == "train":
        run_train(cfg, args.data, out, args.argv)
    elif command == "lodo":
        run_lodo(cfg, args.data, out, args.argv, args.targets)
    else:
        variants = [resolve_variant(v) for v in (args.variants or list(VARIANTS))]
        seeds = args.seeds or [cfg.seed]
        run_ablate(cfg, args.data, out, args.argv, variants, seeds, args.targets)
    return EXIT_OK


def cmd_replay(args) -> int:
    """Re-run a train/lodo command from the config snapshot stored in its manifest."""
    try:
        man = json.loads(Path(args.manifest).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise UsageError(f"cannot read manifest {args.manifest}: {exc}") from None
    cfg = TrainConfig(**man["config"])
    out = Path(args.out)
    if man["command"] == "train":
        run_train(cfg, man["data"], out, args.argv)
    elif man["command"] == "lodo":
        run_lodo(cfg, man["data"], out, args.argv, man.get("targets"))
    else:
        raise UsageError(f"cannot replay command {man['command']!r}")
    return EXIT_OK


def collect_runs(root) -> list[dict]:
    runs = []
    for path in sorted(Path(root).rglob("results.json")):
        res = json.loads(path.read_text())
        if res.get("kind") == "lodo":
            for row in res["grid"]:
                runs.append({"variant": res["variant"], "target": str(row["target"]), "seed": res["seed"],
                             "acc": row["acc"], "f1": row["f1"]})
        elif res.get("kind") == "train":
            runs.append({"variant": res["variant"], "target": str(res["target"]), "seed": res["seed"],
                         "acc": res["test_acc"], "f1": res["test_f1"]})
    return runs


def report_rows(runs: list[dict]) -> list[dict]:
    """Group by (variant, target) and aggregate across seeds; rows sorted, AVG last within a variant."""
    groups: dict[tuple, dict] = {}
    for r in runs:
        g = groups.setdefault((r["variant"], r["target"]), {})
        g[r["seed"]] = r  # later duplicates of a seed replace earlier ones

    def order(key):
        v, t = key
        return (v, t == "AVG", int(t) if t.isdigit() else 0, t)

    rows = []
    for key in sorted(groups, key=order):
        seeds = sorted(groups[key])
        accs = [groups[key][s]["acc"] for s in seeds]
        f1s = [groups[key][s]["f1"] for s in seeds]
        row = {"variant": key[0], "target": key[1], "n": len(seeds), "seeds": seeds}
        if len(seeds) >= 2:
            row["acc_mean"], row["acc_ci95"] = aggregate_seeds(accs)
            row["f1_mean"], row["f1_ci95"] = aggregate_seeds(f1s)
        else:
            row["acc_mean"], row["acc_ci95"], row["f1_mean"], row["f1_ci95"] = accs[0], float("nan"), f1s[0], float("nan")
        rows.append(row)
    return rows


def cmd_report(args) -> int:
    root = Path(args.runs)
    if not root.is_dir():
        raise UsageError(f"{root} is not a directory")
    runs = collect_runs(root)
    if not runs:
        raise UsageError(f"no results.json found under {root}")
    rows = report_rows(runs)
    fields = ["variant", "target", "n", "acc_mean", "acc_ci95", "f1_mean", "f1_ci95"]
    out_csv = Path(args.csv) if args.csv else root / "report.csv"
    with open(out_csv, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=fields, extrasaction="ignore")
        w.writeheader()
        w.writerows(rows)
    print(f"{'variant':>8} {'target':>6} {'n':>2} {'acc':>16} {'macroF1':>16}")
    for r in rows:
        print(f"{r['variant']:>8} {r['target']:>6} {r['n']:>2} "
              f"{100 * r['acc_mean']:7.2f} ± {100 * r['acc_ci95']:6.2f} {100 * r['f1_mean']:7.2f} ± {100 * r['f1_ci95']:6.2f}")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    ds = _load_data(args.data)
    if args.target is not None:
        ds = ds.subset(ds.domains == args.target)
    acc, f1, cm = evaluate(args.checkpoint, ds)
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        write_confusion(out / "confusion.csv", cm, ds.class_names)
        (out / "results.json").write_text(json.dumps({"kind": "evaluate", "test_acc": acc, "test_f1": f1,
                                                      "confusion": cm.tolist()}, indent=2))
    print(_summary_line("all" if args.target is None else args.target, acc, f1))
    return EXIT_OK


def cmd_export(args) -> int:
    ds = _load_data(args.data)
    emb = export_embeddings(args.checkpoint, ds, args.out)
    print(f"wrote {emb.shape[0]} x {emb.shape[1]} embeddings -> {args.out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------


def _add_train_flags(p: argparse.ArgumentParser, with_target: bool) -> None:
    p.add_argument("--data", required=True, help="dataset directory (CWD format)")
    p.add_argument("--out", required=True, help="runs directory")
    p.add_argument("--config", help="key = value file mirroring TrainConfig fields")
    if with_target:
        p.add_argument("--target", type=int, help="held-out domain index")
    else:
        p.add_argument("--targets", type=int, nargs="+", help="restrict to these held-out domains")
    p.add_argument("--seed", type=int, help="falls back to CAUDG_SEED, then 0")
    p.add_argument("--alpha", type=float)
    p.add_argument("--beta", type=float)
    p.add_argument("--ids-eps", type=float)
    p.add_argument("--ids-max-draws", type=int)
    p.add_argument("--loss-con-mode", choices=CON_MODES)
    p.add_argument("--ind-measure", choices=sorted(MEASURES))
    p.add_argument("--cls-mode", choices=CLS_MODES)
    p.add_argument("--l1-reduce", choices=L1_REDUCTIONS)
    p.add_argument("--cdpl-shared", action="store_true")
    p.add_argument("--cdpl-stopgrad", action="store_true")
    p.add_argument("--lr", type=float)
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--val-fraction", type=float)
    p.add_argument("--arch", choices=sorted(PRESETS))
    p.add_argument("--ablation", help=f"variant: {', '.join(list(VARIANTS) + list(BASELINES))}")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="caudg", description=__doc__)
    ap.add_argument("--version", action="version", version=__version__)
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("import", help="parse a raw benchmark into windows")
    p.add_argument("--dataset", required=True, choices=DATASETS)
    p.add_argument("--setting", default="cross-person", choices=SETTINGS)
    p.add_argument("--raw-dir", required=True)
    p.add_argument("--out", required=True)

    p = sub.add_parser("synth", help="generate the synthetic domain-shift dataset")
    p.add_argument("--preset", default="default", choices=sorted(SYNTH_PRESETS))
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True)

    _add_train_flags(sub.add_parser("train", help="train on all but one domain, test on it"), True)
    _add_train_flags(sub.add_parser("lodo", help="leave-one-domain-out over every domain"), False)
    p = sub.add_parser("ablate", help="leave-one-domain-out for several variants and seeds")
    _add_train_flags(p, False)
    p.add_argument("--variants", nargs="+", help="default: every ablation variant")
    p.add_argument("--seeds", type=int, nargs="+")

    p = sub.add_parser("report", help="aggregate results.json files across seeds")
    p.add_argument("--runs", required=True)
    p.add_argument("--csv", help="output CSV (default <runs>/report.csv)")

    p = sub.add_parser("evaluate", help="score a checkpoint on a dataset")
    p.add_argument("--checkpoint", required=True, help="checkpoint path without extension")
    p.add_argument("--data", required=True)
    p.add_argument("--target", type=int, help="only windows of this domain")
    p.add_argument("--out")

    p = sub.add_parser("export-embeddings", help="write causal-branch features for every window")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)

    p = sub.add_parser("replay", help="re-run a train/lodo command from its manifest")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    return ap


COMMANDS = {
    "import": cmd_import,
    "synth": cmd_synth,
    "train": lambda a: _train_like(a, "train"),
    "lodo": lambda a: _train_like(a, "lodo"),
    "ablate": lambda a: _train_like(a, "ablate"),
    "report": cmd_report,
    "evaluate": cmd_evaluate,
    "export-embeddings": cmd_export,
    "replay": cmd_replay,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse exits 2 on usage errors, 0 on --help
        return int(exc.code or 0)
    args.argv = list(sys.argv[1:] if argv is None else argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return COMMANDS[args.command](args)
    except DivergenceError as exc:
        print(f"caudg: training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (UsageError, RawDataError, FormatError, FileNotFoundError, ValueError) as exc:
        print(f"caudg: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
