"""Command-line front end: train, attack, analyze, defend, eval, sweep-eps, reattack.

Every command prints tab-separated ``key<TAB>value`` lines on stdout and writes
its artifacts under ``artifact_dir``; each artifact gets a sibling
``<name>.manifest.json`` holding the resolved config and a content hash.

Exit codes: 0 success, 2 configuration error, 3 I/O error, 4 numerical failure.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
import time
from pathlib import Path

import torch

from . import plotting
from .attack import ATTACK_KINDS, craft, load_perturbation, save_perturbation
from .config import ConfigError, ExperimentConfig, load_config
from .data import DatasetError, load_dataset, sample_clean_subset
from .defense import TrainingLog, democratic_training
from .entropy import run_entropy_analysis
from .evaluation import adaptive_reattack_protocol, evaluate, epsilon_sweep
from .model import (
    NumericalError,
    accuracy,
    build_architecture,
    load_checkpoint,
    parameter_checksum,
    save_checkpoint,
    train_baseline,
)

log = logging.getLogger("uaprepair")

EXIT_OK, EXIT_CONFIG, EXIT_IO, EXIT_NUMERICAL = 0, 2, 3, 4


# --------------------------------------------------------------------------- helpers


def _emit(out, **fields):
    for k, v in fields.items():
        if isinstance(v, float):
            v = f"{v:.6f}"
        print(f"{k}\t{v}", file=out)


def _digest(path: Path) -> str:
    h = hashlib.sha256()
    files = sorted(p for p in path.rglob("*") if p.is_file() and p.name != "run.manifest.json") \
        if path.is_dir() else [path]
    for f in files:
        h.update(f.read_bytes() if f.name != "manifest.json" else _stable_manifest(f))
    return h.hexdigest()


def _stable_manifest(path: Path) -> bytes:
    m = json.loads(path.read_text())
    m.pop("created", None)
    return json.dumps(m, sort_keys=True).encode()


def write_manifest(artifact: Path, cfg: ExperimentConfig, command: str, inputs: dict | None = None) -> Path:
    """Record the resolved config, inputs and a content hash next to ``artifact``."""
    artifact = Path(artifact)
    target = artifact / "run.manifest.json" if artifact.is_dir() else \
        artifact.with_name(artifact.name + ".manifest.json")
    manifest = {
        "command": command,
        "artifact": artifact.name,
        "sha256": _digest(artifact),
        "inputs": {k: str(v) for k, v in (inputs or {}).items()},
        "config": cfg.to_dict(),
    }
    target.write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return target


def _data(cfg: ExperimentConfig):
    return load_dataset(cfg.dataset, cfg.data_root, cfg.blobs)


def _paths(cfg: ExperimentConfig) -> dict:
    root = cfg.artifacts
    return {
        "baseline": root / "checkpoints" / "baseline",
        "defended": root / "checkpoints" / "defended",
        "uaps": root / "uaps",
        "reports": root / "reports",
        "figures": root / "figures",
    }


def _load_model(path) -> torch.nn.Module:
    path = Path(path)
    if not (path / "manifest.json").exists():
        raise FileNotFoundError(f"no checkpoint at {path}")
    return load_checkpoint(path)


def _uap_path(cfg, kind, tag="") -> Path:
    t = "" if kind == "nontargeted" else f"-t{cfg.attack.target_class}"
    return _paths(cfg)["uaps"] / f"{kind}{t}{tag}.uap"


def _target(kind, cfg):
    return None if kind == "nontargeted" else cfg.attack.target_class


# --------------------------------------------------------------------------- commands


def cmd_train(cfg: ExperimentConfig, args, out) -> Path:
    train, test = _data(cfg)
    model = build_architecture(cfg.arch, train.input_shape, train.num_classes, seed=cfg.seed)
    history = []
    t0 = time.time()
    train_baseline(model, train, cfg.train, history)
    acc = accuracy(model, test)
    path = Path(args.out) if args.out else _paths(cfg)["baseline"]
    save_checkpoint(model, path, {"dataset": cfg.dataset, "clean_acc": acc, "loss_history": history})
    write_manifest(path, cfg, "train")
    _emit(out, command="train", checkpoint=path, clean_acc=acc, seconds=time.time() - t0,
          checksum=parameter_checksum(model))
    return path


def cmd_attack(cfg: ExperimentConfig, args, out) -> Path:
    model_path = Path(args.model) if args.model else _paths(cfg)["baseline"]
    model = _load_model(model_path)
    train, test = _data(cfg)
    kind = args.kind
    a = cfg.attack
    pert = craft(kind, model, train, _target(kind, cfg), a.epsilon, a.settings, a.patch_fraction)
    path = Path(args.out) if args.out else _uap_path(cfg, kind)
    save_perturbation(pert, path)
    write_manifest(path, cfg, f"attack --kind {kind}", {"model": model_path})
    report = evaluate(model, test, pert, _target(kind, cfg), metadata={"model": str(model_path)})
    rpath = report.write(path.with_suffix(".report.json"))
    write_manifest(rpath, cfg, f"attack --kind {kind}", {"model": model_path, "perturbation": path})
    _emit(out, command="attack", kind=kind, perturbation=path, report=rpath, sr=report.sr, aacc=report.aacc,
          clean_acc=report.clean_acc, entropy_gap=report.entropy_gap)
    return path


def cmd_analyze(cfg: ExperimentConfig, args, out) -> Path:
    model_path = Path(args.model) if args.model else _paths(cfg)["baseline"]
    model = _load_model(model_path)
    pert = load_perturbation(args.perturbation)
    _, test = _data(cfg)
    probes = args.probes.split(",") if args.probes else model.probe_names
    report = run_entropy_analysis(model, test.images, pert, probes)
    report.metadata = {"model": str(model_path), "perturbation": str(args.perturbation)}
    stem = _paths(cfg)["reports"] / f"entropy-{Path(args.perturbation).stem}-{model_path.name}"
    path = report.write(stem.with_suffix(".jsonl"))
    table = report.write_quartile_table(stem.with_suffix(".tsv"))
    fig = plotting.entropy_boxplot(report, _paths(cfg)["figures"] / f"{stem.name}.png")
    for p in (path, table, fig):
        write_manifest(p, cfg, "analyze", {"model": model_path, "perturbation": args.perturbation})
    _emit(out, command="analyze", report=path, table=table, figure=fig, gap_probe=report.gap_probe,
          entropy_gap=report.gap)
    return path


def cmd_defend(cfg: ExperimentConfig, args, out) -> Path:
    model_path = Path(args.model) if args.model else _paths(cfg)["baseline"]
    model = _load_model(model_path)
    train, test = _data(cfg)
    before = accuracy(model, test)
    clean = sample_clean_subset(train, cfg.clean_fraction, cfg.seed)
    tlog = TrainingLog()
    t0 = time.time()
    democratic_training(model, clean, cfg.defense, tlog)
    minutes = (time.time() - t0) / 60
    after = accuracy(model, test)
    path = Path(args.out) if args.out else _paths(cfg)["defended"]
    save_checkpoint(model, path, {"dataset": cfg.dataset, "clean_acc": after, "repaired_from": str(model_path),
                                  "clean_subset_size": len(clean)})
    write_manifest(path, cfg, "defend", {"model": model_path})
    log_path = tlog.write(_paths(cfg)["reports"] / f"defense-log-{path.name}.tsv")
    fig = plotting.training_curve(tlog.rows, _paths(cfg)["figures"] / f"defense-log-{path.name}.png")
    for p in (log_path, fig):
        write_manifest(p, cfg, "defend", {"model": model_path})
    _emit(out, command="defend", checkpoint=path, training_log=log_path, figure=fig, clean_acc_before=before,
          clean_acc_after=after, delta_clean_acc=after - before, clean_subset=len(clean), minutes=minutes,
          checksum=parameter_checksum(model))
    return path


def cmd_eval(cfg: ExperimentConfig, args, out) -> Path:
    model_path = Path(args.model) if args.model else _paths(cfg)["defended"]
    model = _load_model(model_path)
    pert = load_perturbation(args.perturbation)
    _, test = _data(cfg)
    reference = None
    if args.reference_model:
        reference = accuracy(_load_model(args.reference_model), test)
    target = None if pert.kind == "nontargeted" else pert.target_class
    report = evaluate(model, test, pert, target, reference, cfg.eval.probe, {"model": str(model_path)},
                      cfg.eval.batch_size)
    path = report.write(_paths(cfg)["reports"] / f"eval-{Path(args.perturbation).stem}-{model_path.name}.json")
    write_manifest(path, cfg, "eval", {"model": model_path, "perturbation": args.perturbation})
    _emit(out, command="eval", report=path, sr=report.sr, aacc=report.aacc, clean_acc=report.clean_acc,
          delta_clean_acc=report.delta_clean_acc, entropy_gap=report.entropy_gap,
          nontargeted_sr=report.nontargeted_sr)
    return path


def cmd_sweep_eps(cfg: ExperimentConfig, args, out) -> Path:
    """UAPs crafted against the source model at each budget, scored on every listed model."""
    train, test = _data(cfg)
    eps_list = [float(e) for e in (args.epsilons.split(",") if args.epsilons else cfg.eval.epsilons)]
    source_path = Path(args.source) if args.source else _paths(cfg)["baseline"]
    source = _load_model(source_path)
    models = args.models or [str(source_path), str(_paths(cfg)["defended"])]
    curves, rows = {}, []
    for mp in models:
        model = _load_model(mp)
        reports = epsilon_sweep(model, train, test, cfg.attack.target_class, eps_list, cfg.attack.settings,
                                craft_against=source)
        name = Path(mp).name
        curves[name] = [r.sr for r in reports]
        for eps, r in zip(eps_list, reports):
            rows.append({"model": name, "epsilon": eps, "sr": r.sr, "aacc": r.aacc})
            _emit(out, **{f"sr[{name},{eps * 255:.1f}/255]": r.sr})
    path = _paths(cfg)["reports"] / "epsilon-sweep.tsv"
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = ["model\tepsilon\tsr\taacc"] + [f"{r['model']}\t{r['epsilon']:.6f}\t{r['sr']:.6f}\t{r['aacc']:.6f}"
                                             for r in rows]
    path.write_text("\n".join(lines) + "\n")
    fig = plotting.epsilon_sweep_plot(eps_list, curves, _paths(cfg)["figures"] / "epsilon-sweep.png")
    for p in (path, fig):
        write_manifest(p, cfg, "sweep-eps", {"source": source_path, **{f"model{i}": m for i, m in enumerate(models)}})
    _emit(out, command="sweep-eps", table=path, figure=fig)
    return path


def cmd_reattack(cfg: ExperimentConfig, args, out) -> Path:
    model_path = Path(args.model) if args.model else _paths(cfg)["defended"]
    model = _load_model(model_path)
    train, test = _data(cfg)
    report, pert = adaptive_reattack_protocol(model, train, test, args.kind, _target(args.kind, cfg),
                                              cfg.attack.epsilon, cfg.attack.settings)
    path = save_perturbation(pert, _uap_path(cfg, args.kind, f"-reattack-{model_path.name}"))
    rpath = report.write(path.with_suffix(".report.json"))
    for p in (path, rpath):
        write_manifest(p, cfg, f"reattack --kind {args.kind}", {"model": model_path})
    _emit(out, command="reattack", kind=args.kind, perturbation=path, report=rpath, sr=report.sr,
          aacc=report.aacc)
    return path


COMMANDS = {
    "train": cmd_train, "attack": cmd_attack, "analyze": cmd_analyze, "defend": cmd_defend,
    "eval": cmd_eval, "sweep-eps": cmd_sweep_eps, "reattack": cmd_reattack,
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="uaprepair", description=__doc__.splitlines()[0])
    p.add_argument("--config", help="YAML or JSON experiment config")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                   help="override a config field, e.g. --set defense.alpha=0.3 (repeatable)")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("train", help="train the baseline classifier")
    s.add_argument("--out")

    s = sub.add_parser("attack", help="craft a universal perturbation against a checkpoint")
    s.add_argument("--kind", choices=ATTACK_KINDS, default="targeted")
    s.add_argument("--model")
    s.add_argument("--out")

    s = sub.add_parser("analyze", help="layer-wise entropy spectra for clean, perturbed and UAP-only inputs")
    s.add_argument("--model")
    s.add_argument("--perturbation", required=True)
    s.add_argument("--probes", help="comma-separated probe names (default: all)")

    s = sub.add_parser("defend", help="repair a checkpoint with Democratic Training")
    s.add_argument("--model")
    s.add_argument("--out")

    s = sub.add_parser("eval", help="score a perturbation against a checkpoint")
    s.add_argument("--model")
    s.add_argument("--perturbation", required=True)
    s.add_argument("--reference-model", help="checkpoint whose clean accuracy defines the accuracy delta")

    s = sub.add_parser("sweep-eps", help="targeted attack success over several budgets")
    s.add_argument("--source", help="checkpoint the UAPs are crafted against (default: baseline)")
    s.add_argument("--models", nargs="+", help="checkpoints to score (default: baseline and defended)")
    s.add_argument("--epsilons", help="comma-separated budgets in [0, 1]")

    s = sub.add_parser("reattack", help="fresh white-box attack on a repaired checkpoint")
    s.add_argument("--kind", choices=ATTACK_KINDS, default="targeted")
    s.add_argument("--model")
    return p


def main(argv=None, out=None) -> int:
    out = out or sys.stdout
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config, args.overrides)
        COMMANDS[args.command](cfg, args, out)
    except (ConfigError, ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DatasetError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except NumericalError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
