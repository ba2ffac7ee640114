"""Command-line entry point: ``djkd <command> --config PATH``.

Every command writes into one output directory (``--out`` or the config's
``output_dir``) holding a copy of the config, the manifest, checkpoints,
training histories and CSV reports.
"""
from __future__ import annotations

import argparse
import csv
import logging
import sys
from pathlib import Path

from .arch import BUILTIN_ARCHS, ArchSpec, teacher_arch
from .complexity import analyze
from .config import ExperimentConfig, load_config, save_config
from .data import (
    LESION_CLASSES,
    SegSample,
    load_samples,
    make_splits,
    scan_busi,
    scan_layout,
    synth_generate,
    write_busi_layout,
    write_manifest,
)
from .engine import distill_student, evaluate, train_supervised, train_teacher
from .errors import ConfigurationError, DataIOError, StructuralError
from .losses import PRESETS, preset
from .metrics import METRIC_NAMES, MetricsReport
from .models import build_network, build_student, load_checkpoint, save_checkpoint

log = logging.getLogger("djkd")

EVAL_COLUMNS = ("model",) + METRIC_NAMES + ("params_e6", "size_mib", "gflops")
ABLATION_COLUMNS = ("train", "test", "n_train", "n_test") + METRIC_NAMES
ABLATION_ROWS = (
    ("benign", "benign"),
    ("malignant", "malignant"),
    ("benign", "malignant"),
    ("malignant", "benign"),
    ("benign", "all"),
    ("malignant", "all"),
    ("all", "all"),
)


def _output_dir(cfg: ExperimentConfig) -> Path:
    return Path(cfg.output_dir)


def _check_data_source(cfg: ExperimentConfig) -> None:
    root = cfg.data.root
    if root is not None and not Path(root).is_dir():
        raise ConfigurationError(f"data.root {root} does not exist")


def prepare_data(cfg: ExperimentConfig) -> list[SegSample]:
    """Scan (or synthesise and write) the corpus, persist the manifest and load every sample."""
    out = _output_dir(cfg)
    d = cfg.data
    if d.root is not None:
        if d.layout == "busi":
            records = scan_busi(d.root, include_normal=d.include_normal)
        else:
            records = scan_layout(d.root, d.descriptor(), include_normal=d.include_normal)
    else:
        root = out / "synthetic_data"
        if not root.exists():
            seed = cfg.seed + d.synthetic.seed_offset
            generated = [s for cls in LESION_CLASSES
                         for s in synth_generate(d.synthetic.n_per_class, cls, d.resolution, seed)]
            write_busi_layout(generated, root)
        records = scan_busi(root)
    if not records:
        raise ConfigurationError("no usable records were found")
    for path, reason in getattr(records, "rejects", []):
        log.warning("rejected %s: %s", path, reason)
    write_manifest(records, out / "manifest.jsonl")
    return load_samples(records, d.resolution)


def split(cfg: ExperimentConfig, samples: list[SegSample], train: str = "all",
          test: str = "all") -> tuple[list[SegSample], list[SegSample]]:
    return make_splits(samples, cfg.plan(train, test))


def _save_verified(handle, path: Path, **extra) -> Path:
    """Write a checkpoint and load it back so a zero exit code means it is usable."""
    path = save_checkpoint(handle, path, **extra)
    if load_checkpoint(path).spec.hash() != handle.spec.hash():
        raise StructuralError(f"{path}: checkpoint did not round-trip")
    return path


def _start(cfg: ExperimentConfig) -> Path:
    _check_data_source(cfg)
    out = _output_dir(cfg)
    out.mkdir(parents=True, exist_ok=True)
    save_config(cfg, out / "config.json")
    return out


def cmd_train_teachers(cfg: ExperimentConfig, device: str = "cpu") -> dict[str, Path]:
    out = _start(cfg)
    train, test = split(cfg, prepare_data(cfg))
    paths = {}
    for offset, role in enumerate(LESION_CLASSES):
        val = [s for s in test if s.class_label == role] or None
        handle, history = train_teacher(role, train, cfg.stage("teacher", offset),
                                        cfg.model.teacher, val=val, device=device)
        path = _save_verified(handle, out / "teachers" / f"{role}.pt")
        history.save(out / "teachers" / f"history_{role}.csv")
        last = history.records[-1]
        print(f"{handle.role}: epochs={len(history)} loss={last.total:.4f} "
              f"val_dice={last.dice:.4f} -> {path}")
        paths[role] = path
    return paths


def cmd_distill(cfg: ExperimentConfig, preset_name: str | None = None,
                benign_ckpt: str | None = None, malignant_ckpt: str | None = None,
                device: str = "cpu") -> Path:
    name = preset_name or cfg.loss.preset
    weights = preset(name) if preset_name else cfg.loss.loss_weights()
    out = _output_dir(cfg)
    teacher_dir = out / "teachers"
    ckpts = {"benign": benign_ckpt, "malignant": malignant_ckpt}
    needed = {"benign": weights.benign > 0, "malignant": weights.malignant > 0}
    teachers = {}
    for cls, need in needed.items():
        if not need:
            continue
        path = Path(ckpts[cls]) if ckpts[cls] else teacher_dir / f"{cls}.pt"
        if not path.exists():
            raise ConfigurationError(f"preset {name!r} needs a {cls} teacher checkpoint; {path} is missing")
        teachers[cls] = load_checkpoint(path)
    out = _start(cfg)
    train, test = split(cfg, prepare_data(cfg))
    student = build_student(cfg.model.student, seed=cfg.seed + 2)
    student, history = distill_student(
        student, train, weights, cfg.stage("student", 2),
        benign_teacher=teachers.get("benign"), malignant_teacher=teachers.get("malignant"),
        val=test, device=device,
    )
    path = _save_verified(student, out / "student" / "student.pt", preset=name)
    history.save(out / "student" / "history_student.csv")
    last = history.records[-1]
    print(f"student[{name}] weights={weights.as_tuple()} epochs={len(history)} "
          f"loss={last.total:.4f} val_dice={last.dice:.4f} -> {path}")
    return path


def _aligned(rows: list[list[str]]) -> str:
    widths = [max(len(r[i]) for r in rows) for i in range(len(rows[0]))]
    return "\n".join("  ".join(c.rjust(w) for c, w in zip(r, widths)) for r in rows)


def _append_csv(path: Path, columns, row) -> list[list[str]]:
    path.parent.mkdir(parents=True, exist_ok=True)
    rows = []
    if path.exists():
        with path.open(newline="") as fh:
            rows = list(csv.reader(fh))[1:]
    rows.append([str(v) for v in row])
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        w.writerows(rows)
    return rows


def cmd_evaluate(cfg: ExperimentConfig, checkpoint: str, name: str | None = None,
                 device: str = "cpu") -> MetricsReport:
    handle = load_checkpoint(checkpoint)
    out = _start(cfg)
    _, test = split(cfg, prepare_data(cfg))
    report = evaluate(handle, test, device=device)
    cx = analyze(handle.spec, cfg.data.resolution)
    label = name or handle.role
    row = [label] + [f"{getattr(report, m):.4f}" for m in METRIC_NAMES] + [
        f"{cx.params / 1e6:.1f}", f"{cx.size_mib:.1f}", f"{cx.gflops:.2f}"]
    rows = _append_csv(out / "reports" / "evaluate.csv", EVAL_COLUMNS, row)
    print(_aligned([list(EVAL_COLUMNS)] + rows))
    return report


def cmd_ablation(cfg: ExperimentConfig, device: str = "cpu") -> list[dict]:
    """Train/test class matrix; each row trains the teacher architecture on ground truth."""
    out = _start(cfg)
    samples = prepare_data(cfg)
    results = []
    for train_cls, test_cls in ABLATION_ROWS:
        label = f"{train_cls}/{test_cls}"
        try:
            train, test = split(cfg, samples, train_cls, test_cls)
            overlap = {s.ident for s in train} & {s.ident for s in test}
            if overlap:
                raise StructuralError(f"train/test overlap: {sorted(overlap)[:3]}")
            net = build_network(teacher_arch(cfg.model.teacher), "baseline", seed=cfg.seed)
            net, _ = train_supervised(net, train, cfg.stage("teacher"), device=device)
            report = evaluate(net, test, device=device)
        except (ConfigurationError, StructuralError, DataIOError, RuntimeError) as exc:
            raise ConfigurationError(f"ablation row {label} failed: {exc}") from exc
        row = {"train": train_cls, "test": test_cls, "n_train": len(train), "n_test": len(test),
               **{m: getattr(report, m) for m in METRIC_NAMES}}
        results.append(row)
        print(f"{label:<20s}" + "".join(f"{row[m]:>9.4f}" for m in METRIC_NAMES), flush=True)
    path = out / "reports" / "ablation.csv"
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(ABLATION_COLUMNS)
        for r in results:
            w.writerow([r["train"], r["test"], r["n_train"], r["n_test"]]
                       + [f"{r[m]:.4f}" for m in METRIC_NAMES])
    return results


def cmd_analyze(target: str, resolution: int = 512) -> str:
    if target in BUILTIN_ARCHS:
        spec = BUILTIN_ARCHS[target]()
    elif Path(target).is_file():
        spec = ArchSpec.load(target)
    else:
        raise ConfigurationError(f"{target!r} is neither a built-in model {sorted(BUILTIN_ARCHS)} "
                                 f"nor a spec file")
    line = analyze(spec, resolution).row(target)
    print(f"{'model':<16s}{'params/1e6':>10s}{'size/MiB':>10s}{'GFLOPs':>10s}")
    print(line)
    return line


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="djkd", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, config_required=True):
        sp.add_argument("--config", required=config_required, help="experiment JSON config")
        sp.add_argument("--out", help="output directory (overrides output_dir)")
        sp.add_argument("--seed", type=int, help="overrides the config seed")
        sp.add_argument("--device", default="cpu")
        return sp

    common(sub.add_parser("train-teachers", help="train the benign and malignant teachers"))
    sp = common(sub.add_parser("distill", help="distill the student from trained teachers"))
    sp.add_argument("--preset", choices=sorted(PRESETS))
    sp.add_argument("--benign-ckpt")
    sp.add_argument("--malignant-ckpt")
    sp = common(sub.add_parser("evaluate", help="evaluate a checkpoint on the test split"))
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--name", help="row label (defaults to the checkpoint role)")
    common(sub.add_parser("ablation", help="train/test class ablation matrix"))
    sp = sub.add_parser("analyze", help="parameter/size/GFLOPs row for a model")
    sp.add_argument("model", help=f"one of {sorted(BUILTIN_ARCHS)} or an ArchSpec JSON file")
    sp.add_argument("--resolution", type=int, default=512)
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv: list[str] | None = None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "analyze":
            cmd_analyze(args.model, args.resolution)
            return 0
        cfg = load_config(args.config)
        if args.out:
            cfg.output_dir = args.out
        if args.seed is not None:
            cfg.seed = args.seed
        if args.command == "train-teachers":
            cmd_train_teachers(cfg, args.device)
        elif args.command == "distill":
            cmd_distill(cfg, args.preset, args.benign_ckpt, args.malignant_ckpt, args.device)
        elif args.command == "evaluate":
            cmd_evaluate(cfg, args.checkpoint, args.name, args.device)
        elif args.command == "ablation":
            cmd_ablation(cfg, args.device)
    except (ConfigurationError, StructuralError, DataIOError) as exc:
        where = f" [{args.config}]" if getattr(args, "config", None) else ""
        print(f"error{where}: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
