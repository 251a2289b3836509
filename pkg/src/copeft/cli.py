"""Command-line interface.

Subcommands: `gen`, `train-base`, `adapt`, `eval`, `report`, `count-params`.
Checkpoints carry a 32-byte model-config hash; the model and method
configurations themselves travel in a `.json` sidecar written next to each
checkpoint. Exit code 0 on success, 2 with a one-line `error: ...` message
otherwise.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from .errors import CheckpointError, ConfigError
from .evaluation import DEFAULT_NMS_IOU, DEFAULT_SCORE_THR, MetricsReport, evaluate_model
from .figures import render_report_figures
from .harness import (
    KIND_DELTA,
    KIND_FULL,
    ExperimentConfig,
    adapt_cell,
    budget_indices,
    emit_table,
    load_checkpoint,
    save_checkpoint,
    train_base,
)
from .peft import (METHODS, MethodConfig, build_freeze_mask, count_params,
                   init_method_params, make_method)
from .pipeline import ModelConfig, init_base_params
from .scenes import PRESETS, DomainConfig, generate_dataset, read_dataset, write_dataset


def _load_domain(spec: str) -> DomainConfig:
    preset = PRESETS.get(spec.lower())
    if preset is not None:
        return preset
    path = Path(spec)
    if not path.exists():
        raise ConfigError(
            f"unknown domain '{spec}': not a preset ({', '.join(PRESETS)}) "
            "and no such file")
    return DomainConfig(**json.loads(path.read_text()))


def _sidecar(path: Path) -> Path:
    return Path(str(path) + ".json")


def _load_model_config(base: Path) -> ModelConfig:
    sidecar = _sidecar(base)
    if not sidecar.exists():
        raise CheckpointError(f"missing model-config sidecar {sidecar}")
    return ModelConfig.from_json(sidecar.read_text())


def _cmd_gen(args) -> int:
    cfg = _load_domain(args.domain)
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    samples = generate_dataset(cfg, args.count)
    write_dataset(samples, cfg, args.out)
    print(f"wrote {args.count} frames to {args.out}")
    return 0


def _cmd_train_base(args) -> int:
    model = (ModelConfig.from_json(Path(args.config).read_text())
             if args.config else ModelConfig())
    samples, domain = read_dataset(args.data)
    cfg = ExperimentConfig(
        train_a=Path(args.data), train_b=Path(args.data), test_b=Path(args.data),
        out_dir=Path(args.out).parent, model=model, lr=args.lr,
        batch_size=args.batch, base_epochs=args.epochs, init_seed=args.seed)
    registry = train_base(cfg, samples, domain)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_checkpoint(registry, KIND_FULL, None, out, model.config_hash())
    _sidecar(out).write_text(model.to_json() + "\n")
    print(f"wrote base checkpoint {out}")
    return 0


def _cmd_adapt(args) -> int:
    if args.method == "none":
        raise ConfigError("method 'none' performs no adaptation; nothing to save")
    model = _load_model_config(Path(args.base))
    base_registry = init_base_params(model, np.random.default_rng(0))
    load_checkpoint(args.base, base_registry, model.config_hash())
    samples, domain = read_dataset(args.data)
    cfg = ExperimentConfig(
        train_a=Path(args.data), train_b=Path(args.data), test_b=Path(args.data),
        out_dir=Path(args.out).parent, model=model, rate=args.rate,
        variant=args.variant, lr=args.lr, batch_size=args.batch, epochs=args.epochs)
    registry, method, mask = adapt_cell(
        cfg, base_registry.state_dict(), args.method, args.seed, samples, domain)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_checkpoint(registry, KIND_DELTA, mask, out, model.config_hash())
    _sidecar(out).write_text(json.dumps(method.to_dict(), sort_keys=True) + "\n")
    used = len(budget_indices(len(samples), args.rate, args.seed))
    print(f"adapted '{args.method}' on {used} frames; wrote delta {out}")
    return 0


def _cmd_eval(args) -> int:
    model = _load_model_config(Path(args.base))
    method = make_method("none")
    if args.delta:
        method_dict = json.loads(_sidecar(Path(args.delta)).read_text())
        method = MethodConfig.from_dict(method_dict)
    registry = init_base_params(model, np.random.default_rng(0))
    load_checkpoint(args.base, registry, model.config_hash())
    if args.delta:
        init_method_params(registry, model, method, np.random.default_rng(0))
        load_checkpoint(args.delta, registry, model.config_hash())
    registry.set_trainable(build_freeze_mask(registry, method))
    samples, domain = read_dataset(args.data)
    report = evaluate_model(model, registry, method, samples, domain,
                            score_thr=args.score_thr, nms_iou=args.nms_iou)
    trainable, total, _ = count_params(registry, registry.trainable_names())
    report.method = method.method
    report.params_trainable = trainable
    report.params_total = total
    out = Path(args.report)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(report.to_json() + "\n")
    print(f"AP@50={report.ap50:.4f} AP@70={report.ap70:.4f} -> {out}")
    return 0


def _cmd_report(args) -> int:
    in_dir = Path(args.in_dir)
    paths = sorted(in_dir.glob("*.json"))
    if not paths:
        raise ConfigError(f"no report JSON files in {in_dir}")
    reports = [MetricsReport.from_json(p.read_text()) for p in paths]
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(emit_table(reports))
    figures = render_report_figures(reports, out.parent / "figures")
    print(f"wrote {out} and {len(figures)} figure(s)")
    return 0


def _cmd_count_params(args) -> int:
    model = _load_model_config(Path(args.base))
    method = make_method(args.method, args.variant)
    registry = init_base_params(model, np.random.default_rng(0))
    load_checkpoint(args.base, registry, model.config_hash())
    init_method_params(registry, model, method, np.random.default_rng(0))
    mask = build_freeze_mask(registry, method)
    trainable, total, ratio = count_params(registry, mask)
    print(f"method={args.method} trainable={trainable} total={total} ratio={ratio:.6f}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="copeft",
        description="Synthetic multi-agent BEV detection with "
                    "parameter-efficient adaptation")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="generate a synthetic dataset")
    p.add_argument("--domain", required=True,
                   help="preset name (domain_a, domain_b) or a DomainConfig JSON file")
    p.add_argument("--count", type=int, required=True)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=_cmd_gen)

    p = sub.add_parser("train-base", help="train the base model")
    p.add_argument("--data", required=True)
    p.add_argument("--config", default=None, help="ModelConfig JSON file")
    p.add_argument("--out", required=True)
    p.add_argument("--epochs", type=int, default=30)
    p.add_argument("--lr", type=float, default=0.002)
    p.add_argument("--batch", type=int, default=2)
    p.add_argument("--seed", type=int, default=1000)
    p.set_defaults(fn=_cmd_train_base)

    p = sub.add_parser("adapt", help="adapt a trained base model")
    p.add_argument("--base", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--method", required=True, choices=METHODS)
    p.add_argument("--rate", type=float, default=0.1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--variant", default="standard", choices=("standard", "S", "D"))
    p.add_argument("--epochs", type=int, default=20)
    p.add_argument("--lr", type=float, default=0.002)
    p.add_argument("--batch", type=int, default=2)
    p.set_defaults(fn=_cmd_adapt)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset")
    p.add_argument("--base", required=True)
    p.add_argument("--delta", default=None)
    p.add_argument("--data", required=True)
    p.add_argument("--report", required=True)
    p.add_argument("--score-thr", type=float, default=DEFAULT_SCORE_THR)
    p.add_argument("--nms-iou", type=float, default=DEFAULT_NMS_IOU)
    p.set_defaults(fn=_cmd_eval)

    p = sub.add_parser("report", help="combine report JSONs into a CSV and figures")
    p.add_argument("--in", dest="in_dir", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=_cmd_report)

    p = sub.add_parser("count-params", help="parameter accounting for a method")
    p.add_argument("--base", required=True)
    p.add_argument("--method", required=True, choices=METHODS)
    p.add_argument("--variant", default="standard", choices=("standard", "S", "D"))
    p.set_defaults(fn=_cmd_count_params)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except Exception as e:  # one-line machine-parsable failure
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
