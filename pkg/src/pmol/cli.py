"""``pmol`` command line: gen, train, eval, bench, inspect.

Exit codes: 0 success, 2 usage / config / data errors, 3 numerical failure.

A training run directory holds::

    manifest.json     resolved config, groups, dataset hash, source digest
    config.json       {"backbone": {...}, "train": {...}}
    backbone.npz      pretrained, frozen backbone
    checkpoints/      step_NNNNNN.npz training checkpoints
    train.jsonl heldout.jsonl
    loss.csv metrics.csv telemetry.csv
    figures/          training.png, expert_weights.png
"""

from __future__ import annotations

import argparse
import contextlib
import csv
import hashlib
import json
import logging
import math
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np

from . import __version__
from . import numcore as nc
from .adapter import ConfigError, ExpertGroupTable, GroupEntry
from .backbone import BackboneConfig, DataError, init_backbone, pretrain_backbone
from .checkpoint import CheckpointError, load_backbone, load_container, save_backbone
from .data import (ALPHABET, SyntheticSpec, dataset_hash, generate_synthetic_dataset, lm_corpus, load_jsonl,
                   split, write_jsonl)
from .numcore import NonFiniteError, Rng
from .telemetry import (BenchShape, TelemetryRecord, bench_forward, record_expert_weights, specialization_score,
                        speedups, write_bench_csv, write_telemetry_csv)
from .trainengine import NumericalError, TrainConfig, Trainer, build_model, collect_stats, evaluate

log = logging.getLogger("pmol")

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC = 0, 2, 3

# (flag, TrainConfig field, parser)
TRAIN_FLAGS = [
    ("--beta-egs", "beta_egs", float),
    ("--beta-dpo", "beta_dpo", float),
    ("--lr", "lr", float),
    ("--epochs", "epochs", int),
    ("--batch-size", "batch_size", int),
    ("--loss-variant", "loss_variant", str),
    ("--algorithm", "algorithm", str),
    ("--lambda-orpo", "lambda_orpo", float),
    ("--switch-alpha", "switch_alpha", float),
    ("--routing-stride", "routing_stride", int),
    ("--experts-per-group", "experts_per_group", int),
    ("--rank", "rank", int),
    ("--train-fraction", "train_fraction", float),
    ("--pretrain-steps", "pretrain_steps", int),
    ("--pretrain-lr", "pretrain_lr", float),
    ("--seed", "seed", int),
]
BACKBONE_FLAGS = [
    ("--d-model", "d_model"),
    ("--n-layers", "n_layers"),
    ("--n-heads", "n_heads"),
    ("--d-ff", "d_ff"),
    ("--max-seq-len", "max_seq_len"),
]


class UsageError(ValueError):
    pass


# ---------------------------------------------------------------------------
# helpers

def _sc_list(text: str) -> list[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad sc list {text!r}") from None


def _write_json(path, obj) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _read_json(path) -> dict:
    try:
        return json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise UsageError(f"{path} does not exist") from None
    except json.JSONDecodeError as err:
        raise UsageError(f"{path}: invalid JSON ({err.msg})") from None


def _write_rows(path, rows, fieldnames=None) -> None:
    rows = list(rows)
    if fieldnames is None:
        fieldnames = list(dict.fromkeys(k for r in rows for k in r))
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=fieldnames, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in r.items()})


def _parse_cell(v: str):
    for cast in (int, float):
        try:
            return cast(v)
        except ValueError:
            pass
    return v


def _read_rows(path) -> list[dict]:
    if not Path(path).exists():
        return []
    with open(path, newline="") as fh:
        return [{k: _parse_cell(v) for k, v in r.items()} for r in csv.DictReader(fh)]


def _print_table(rows, keys, out=None) -> None:
    """Tab-delimited table with a header line."""
    out = out or sys.stdout
    out.write("\t".join(keys) + "\n")
    for r in rows:
        out.write("\t".join(f"{r[k]:.6f}" if isinstance(r[k], float) else str(r[k]) for k in keys) + "\n")


def _source_digest() -> str:
    h = hashlib.sha256()
    for f in sorted(Path(__file__).parent.glob("*.py")):
        h.update(f.name.encode())
        h.update(f.read_bytes())
    return h.hexdigest()[:16]


def _scan_labels(path) -> list:
    """Preference labels in file order of first appearance."""
    labels = []
    try:
        with open(path, encoding="utf-8") as fh:
            for line in fh:
                if line.strip():
                    try:
                        lab = json.loads(line).get("preference")
                    except (json.JSONDecodeError, AttributeError):
                        continue  # load_jsonl reports the line properly
                    if lab is not None and lab not in labels:
                        labels.append(lab)
    except FileNotFoundError:
        raise UsageError(f"data file {path} does not exist") from None
    return labels


def groups_for_labels(labels, experts_per_group: int, sc=None) -> ExpertGroupTable:
    """Integer labels keep their ids (sorted); names get ids 0.. in order of appearance."""
    if not labels:
        raise DataError("data file holds no pairs")
    numeric = all(isinstance(v, int) or (isinstance(v, str) and v.strip().isdigit()) for v in labels)
    if numeric:
        ids, names = sorted({int(v) for v in labels}), [None] * len(set(int(v) for v in labels))
    else:
        ids, names = list(range(len(labels))), [str(v) for v in labels]
    if sc is not None and len(sc) != len(ids):
        raise ConfigError(f"{len(sc)} sc values for {len(ids)} preferences")
    entries = [GroupEntry(pid, i * experts_per_group, (i + 1) * experts_per_group,
                          0.8 if sc is None else float(sc[i]), names[i]) for i, pid in enumerate(ids)]
    return ExpertGroupTable(tuple(entries), len(ids) * experts_per_group)


def resolve_config(args) -> tuple[BackboneConfig, TrainConfig]:
    """defaults < --config file < explicit flags."""
    file_cfg = _read_json(args.config) if getattr(args, "config", None) else {}
    unknown = set(file_cfg) - {"backbone", "train"}
    if unknown:
        raise ConfigError(f"unknown config sections {sorted(unknown)}")
    bb = dict(file_cfg.get("backbone", {}))
    tr = dict(file_cfg.get("train", {}))
    for _, key, _ in TRAIN_FLAGS:
        if getattr(args, key, None) is not None:
            tr[key] = getattr(args, key)
    if getattr(args, "sc", None) is not None:
        tr["sc"] = args.sc
    for _, key in BACKBONE_FLAGS:
        if getattr(args, key, None) is not None:
            bb[key] = getattr(args, key)
    train_cfg = TrainConfig.from_dict(tr)
    known = {f.name for f in fields(BackboneConfig)}
    if set(bb) - known:
        raise ConfigError(f"unknown backbone config keys: {sorted(set(bb) - known)}")
    bb.setdefault("seed", train_cfg.seed)
    bb_cfg = BackboneConfig(**bb)
    bb_cfg.validate()
    if bb_cfg.vocab_size < len(ALPHABET):
        raise ConfigError(f"vocab_size must be at least {len(ALPHABET)}")
    return bb_cfg, train_cfg


@contextlib.contextmanager
def _compute_mode(deterministic: bool, threads: int = 1):
    from threadpoolctl import threadpool_limits

    with threadpool_limits(threads), (nc.exact_matmul() if deterministic else contextlib.nullcontext()):
        yield


def _latest_checkpoint(run: Path) -> Path:
    ckpts = sorted((run / "checkpoints").glob("step_*.npz"))
    if not ckpts:
        raise UsageError(f"no checkpoints in {run / 'checkpoints'}")
    return ckpts[-1]


def _records_from_csv(path, groups: ExpertGroupTable) -> list[TelemetryRecord]:
    out = []
    for r in _read_rows(path):
        w = np.array([r[f"w_{k}"] for k in range(groups.K)] + [r["w_empty"]], dtype=float)
        out.append(TelemetryRecord(int(r["layer"]), int(r["preference"]), w, int(r["step"])))
    return out


def _load_run(run: Path, checkpoint=None):
    """Model restored from a run directory (latest checkpoint by default)."""
    from .checkpoint import adapters_from_arrays
    from .trainengine import PmolModel

    manifest = _read_json(run / "manifest.json")
    groups = ExpertGroupTable.from_dict(manifest["groups"])
    backbone = load_backbone(run / "backbone.npz")
    path = Path(checkpoint) if checkpoint else _latest_checkpoint(run)
    if not path.exists():
        raise UsageError(f"checkpoint {path} does not exist")
    meta, arrays = load_container(path)
    adapters = adapters_from_arrays(arrays, groups, backbone.cfg.n_layers)
    return manifest, PmolModel(backbone, adapters, groups), int(meta.get("step", 0)), path


# ---------------------------------------------------------------------------
# commands

def cmd_gen(args) -> int:
    spec = SyntheticSpec(n_preferences=args.preferences, pairs_per_preference=args.pairs, gap=args.gap,
                         conflict=args.conflict, seed=args.seed)
    try:
        spec.validate()
    except ConfigError as err:
        raise UsageError(str(err)) from None
    pairs = generate_synthetic_dataset(spec)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    names = None
    if args.names:
        labels = [s.strip() for s in args.names.split(",")]
        if len(labels) != spec.n_preferences:
            raise UsageError(f"{len(labels)} names for {spec.n_preferences} preferences")
        names = dict(enumerate(labels))
    write_jsonl(pairs, out, names)
    _write_json(out.with_suffix(".spec.json"), {**spec.to_dict(), "names": args.names,
                                                "pairs": len(pairs), "sha256": dataset_hash(pairs)})
    print(f"wrote {len(pairs)} pairs to {out}")
    return EXIT_OK


def _train_fresh(args, run: Path):
    bb_cfg, cfg = resolve_config(args)
    labels = _scan_labels(args.data)
    groups = groups_for_labels(labels, cfg.experts_per_group, cfg.sc)
    pairs = load_jsonl(args.data, groups)
    rng = Rng(cfg.seed)
    train_pairs, held = split(pairs, cfg.train_fraction, rng.fork("split"))
    run.mkdir(parents=True, exist_ok=True)
    _write_json(run / "config.json", {"backbone": bb_cfg.to_dict(), "train": cfg.to_dict()})
    names = {e.preference: e.name for e in groups.entries if e.name is not None} or None
    write_jsonl(train_pairs, run / "train.jsonl", names)
    write_jsonl(held, run / "heldout.jsonl", names)

    log.info("pretraining backbone for %d steps", cfg.pretrain_steps)
    backbone = pretrain_backbone(init_backbone(bb_cfg, rng.fork("backbone")), lm_corpus(train_pairs),
                                 cfg.pretrain_steps, lr=cfg.pretrain_lr, rng=rng.fork("pretrain"),
                                 log_every=100, logger=log)
    save_backbone(run / "backbone.npz", backbone)
    model = build_model(backbone, groups, cfg.rank, rng.fork("adapters"))
    _write_json(run / "manifest.json", {
        "tool": f"pmol {__version__}", "source_digest": _source_digest(), "command": args.argv,
        "data": str(args.data), "dataset_hash": dataset_hash(pairs), "seed": cfg.seed, "out": str(run),
        "config": {"backbone": bb_cfg.to_dict(), "train": cfg.to_dict()}, "config_hash": cfg.hash(),
        "groups": groups.to_dict(), "deterministic": bool(args.deterministic),
    })
    return Trainer(model, cfg, train_pairs, held)


def _train_resume(args, run: Path):
    manifest = _read_json(run / "manifest.json")
    cfg = TrainConfig.from_dict(manifest["config"]["train"])
    groups = ExpertGroupTable.from_dict(manifest["groups"])
    backbone = load_backbone(run / "backbone.npz")
    model = build_model(backbone, groups, cfg.rank, Rng(cfg.seed).fork("adapters"))
    trainer = Trainer(model, cfg, load_jsonl(run / "train.jsonl", groups), load_jsonl(run / "heldout.jsonl", groups))
    ckpt = _latest_checkpoint(run)
    trainer.load(ckpt)
    step = trainer.step
    h = trainer.history
    h.loss_rows = [r for r in _read_rows(run / "loss.csv") if r["step"] <= step]
    h.eval_rows = [r for r in _read_rows(run / "metrics.csv") if r["step"] <= step]
    h.records = [r for r in _records_from_csv(run / "telemetry.csv", groups) if r.step <= step]
    log.info("resuming %s from step %d (%s)", run, step, ckpt.name)
    return trainer


def _write_run_outputs(trainer: Trainer, run: Path, figures: bool) -> None:
    h = trainer.history
    groups = trainer.model.groups
    _write_rows(run / "loss.csv", h.loss_rows)
    _write_rows(run / "metrics.csv", h.eval_rows)
    write_telemetry_csv(h.records, groups, run / "telemetry.csv")
    if figures and h.records:
        from .plotting import expert_weight_figure, training_figure

        training_figure(h.loss_rows, h.eval_rows, run / "figures" / "training.png")
        expert_weight_figure(h.records, groups, run / "figures" / "expert_weights.png")


def cmd_train(args) -> int:
    run = Path(args.out)
    if args.resume:
        trainer = _train_resume(args, run)
    else:
        if (run / "manifest.json").exists() and not args.force:
            raise UsageError(f"{run} already holds a run; use --resume or --force")
        if args.data is None:
            raise UsageError("--data is required for a fresh run")
        trainer = _train_fresh(args, run)
    with _compute_mode(args.deterministic):
        try:
            trainer.run(checkpoint_dir=run / "checkpoints", until=args.until)
        finally:
            if not (run / "checkpoints" / f"step_{trainer.step:06d}.npz").exists():
                trainer.save(run / "checkpoints" / f"step_{trainer.step:06d}.npz")
            _write_run_outputs(trainer, run, not args.no_figures)
    rows = trainer.history.eval_rows
    if rows:
        first, last = rows[0]["specialization_score"], rows[-1]["specialization_score"]
        print(f"step {trainer.step}/{trainer.total_steps}  specialization {first:.4f} -> {last:.4f}")
        latest = [r for r in rows if r["step"] == rows[-1]["step"]]
        _print_table(latest, ["step", "preference", "accuracy", "reward_margin"]
                     + [f"mass_{e.preference}" for e in trainer.model.groups.entries] + ["mass_empty"])
    return EXIT_OK


def cmd_eval(args) -> int:
    run = Path(args.run)
    manifest, model, step, ckpt = _load_run(run, args.checkpoint)
    data = Path(args.data) if args.data else run / "heldout.jsonl"
    pairs = load_jsonl(data, model.groups)
    if not pairs:
        raise DataError(f"{data} holds no pairs")
    with _compute_mode(manifest.get("deterministic", False)):
        stats = collect_stats(model, pairs)
        metrics = evaluate(model, pairs, stats=stats)
        records = record_expert_weights(model, pairs, step=step, stats=stats)
    covered = set(model.groups.preferences) <= set(metrics)
    score = specialization_score(records, model.groups) if covered else math.nan
    rows = [{"step": step, "preference": p, **m, "specialization_score": score} for p, m in metrics.items()]
    keys = ["step", "preference", "n", "accuracy", "reward_margin", "policy_margin"] \
        + [f"mass_{e.preference}" for e in model.groups.entries] + ["mass_empty", "specialization_score"]
    _print_table(rows, keys)
    out = Path(args.out) if args.out else run / "eval.csv"
    _write_rows(out, rows, keys)
    return EXIT_OK


def cmd_inspect(args) -> int:
    run = Path(args.run)
    manifest, model, step, ckpt = _load_run(run, args.checkpoint)
    data = Path(args.data) if args.data else run / "heldout.jsonl"
    pairs = load_jsonl(data, model.groups)
    with _compute_mode(manifest.get("deterministic", False)):
        records = record_expert_weights(model, pairs, step=step)
    groups = model.groups
    rows = []
    for r in records:
        m = r.group_masses(groups)
        rows.append({"layer": r.layer, "preference": r.preference,
                     **{f"mass_{e.preference}": m[e.preference] for e in groups.entries}, "mass_empty": r.empty_mass})
    _print_table(rows, ["layer", "preference"] + [f"mass_{e.preference}" for e in groups.entries] + ["mass_empty"])
    if set(groups.preferences) <= {r.preference for r in records}:
        print(f"specialization_score\t{specialization_score(records, groups):.6f}")
    if not args.no_figures:
        from .plotting import expert_weight_figure

        path = expert_weight_figure(records, groups, run / "figures" / f"inspect_step{step:06d}.png")
        print(f"figure\t{path}")
    return EXIT_OK


def cmd_bench(args) -> int:
    try:
        shapes = [BenchShape.parse(s) for s in (args.shape or ["K=16,r=8,a=64,b=64,batch=64,seq=64"])]
    except ValueError as err:
        raise UsageError(str(err)) from None
    for s in shapes:
        if s.r > min(s.a, s.b) / 2:
            raise UsageError(f"rank {s.r} too large for a={s.a}, b={s.b}")
    phases = ("forward",) if args.forward_only else ("forward", "forward_backward")
    with _compute_mode(False, args.threads):
        try:
            results = bench_forward(shapes, reps=args.reps, warmup=args.warmup, phases=phases, seed=args.seed)
        except AssertionError as err:
            raise NumericalError(str(err)) from None
    rows = [r.as_row() for r in results]
    for row in rows:
        row["threads"] = args.threads
    _print_table(rows, ["path", "phase", "K", "r", "a", "b", "batch", "seq", "seconds", "reps", "threads"])
    for (phase, K, r, a, b, batch, seq), ratio in speedups(results).items():
        print(f"speedup\t{phase}\tK={K},r={r},a={a},b={b},batch={batch},seq={seq}\t{ratio:.3f}")
    if args.out:
        out = Path(args.out)
        out.parent.mkdir(parents=True, exist_ok=True)
        write_bench_csv(results, out)
        if not args.no_figures:
            from .plotting import bench_figure

            print(f"figure\t{bench_figure(results, out.with_suffix('.png'))}")
    return EXIT_OK


# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="pmol", description="Grouped LoRA experts for multi-preference alignment.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    p.add_argument("--version", action="version", version=f"pmol {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", help="write a synthetic multi-preference dataset")
    g.add_argument("--preferences", type=int, default=3)
    g.add_argument("--pairs", type=int, default=200, help="pairs per preference")
    g.add_argument("--gap", type=float, default=0.8)
    g.add_argument("--conflict", type=float, default=0.2)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--names", help="comma-separated preference names written instead of ids")
    g.add_argument("--out", required=True)
    g.set_defaults(fn=cmd_gen)

    t = sub.add_parser("train", help="pretrain a backbone and train adapters")
    t.add_argument("--data")
    t.add_argument("--out", required=True, help="run directory")
    t.add_argument("--config", help="JSON file with 'backbone' and 'train' sections")
    t.add_argument("--resume", action="store_true", help="continue from the latest checkpoint in --out")
    t.add_argument("--force", action="store_true", help="overwrite an existing run directory")
    t.add_argument("--until", type=int, help="stop after this global step")
    t.add_argument("--deterministic", action="store_true", help="fixed-order matmul accumulation")
    t.add_argument("--no-figures", action="store_true")
    for flag, key, typ in TRAIN_FLAGS:
        t.add_argument(flag, dest=key, type=typ)
    t.add_argument("--sc", type=_sc_list, help="comma-separated soft constraint per preference")
    for flag, key in BACKBONE_FLAGS:
        t.add_argument(flag, dest=key, type=int)
    t.set_defaults(fn=cmd_train)

    e = sub.add_parser("eval", help="held-out preference metrics of a run")
    e.add_argument("--run", required=True)
    e.add_argument("--data", help="JSONL file (default: the run's held-out split)")
    e.add_argument("--checkpoint", help="checkpoint file (default: latest)")
    e.add_argument("--out", help="CSV path (default: <run>/eval.csv)")
    e.set_defaults(fn=cmd_eval)

    i = sub.add_parser("inspect", help="per-layer expert-group masses")
    i.add_argument("--run", required=True)
    i.add_argument("--data")
    i.add_argument("--checkpoint")
    i.add_argument("--no-figures", action="store_true")
    i.set_defaults(fn=cmd_inspect)

    b = sub.add_parser("bench", help="time sequential vs parallel adapter paths")
    b.add_argument("--shape", action="append", help="e.g. K=16,r=8,a=64,b=64,batch=64,seq=64 (repeatable)")
    b.add_argument("--reps", type=int, default=30)
    b.add_argument("--warmup", type=int, default=5)
    b.add_argument("--threads", type=int, default=1)
    b.add_argument("--seed", type=int, default=0)
    b.add_argument("--forward-only", action="store_true")
    b.add_argument("--out", help="CSV path; a .png figure is written next to it")
    b.add_argument("--no-figures", action="store_true")
    b.set_defaults(fn=cmd_bench)
    return p


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    args = build_parser().parse_args(argv)
    args.argv = argv
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.fn(args)
    except (UsageError, ConfigError, DataError, CheckpointError, KeyError) as err:
        print(f"pmol {args.command}: error: {err}", file=sys.stderr)
        return EXIT_USAGE
    except (NumericalError, NonFiniteError) as err:
        print(f"pmol {args.command}: numerical failure: {err}", file=sys.stderr)
        return EXIT_NUMERIC
    except OSError as err:
        print(f"pmol {args.command}: {err}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
