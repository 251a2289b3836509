"""Experiment orchestration: base training, budgeted adaptation per method,
evaluation, checkpointing, and table emission."""

from __future__ import annotations

import json
import math
import struct
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import CheckpointError, ConfigError
from .evaluation import DEFAULT_NMS_IOU, DEFAULT_SCORE_THR, MetricsReport, evaluate_model
from .nn_core import ParamRegistry, adam_step
from .peft import MethodConfig, build_freeze_mask, count_params, init_method_params, make_method
from .pipeline import (GridGeometry, ModelConfig, Targets, build_targets,
                       init_base_params, pipeline_forward)
from .scenes import DomainConfig, SceneSample, read_dataset

CKPT_MAGIC = b"CPFT"
CKPT_VERSION = 1
KIND_FULL = 0
KIND_DELTA = 1


@dataclass
class ExperimentConfig:
    """One full adaptation study: base domain, deploy domain, methods, seeds."""

    train_a: Path
    train_b: Path
    test_b: Path
    out_dir: Path
    methods: list[str] = field(default_factory=lambda: list(
        ("none", "scratch", "decoder_only", "ssf", "adapter", "copeft")))
    seeds: list[int] = field(default_factory=lambda: [0, 1, 2, 3, 4])
    rate: float = 0.1
    model: ModelConfig = field(default_factory=ModelConfig)
    variant: str = "standard"
    lr: float = 0.002
    batch_size: int = 2
    epochs: int = 20
    base_epochs: int = 30
    init_seed: int = 1000
    augment: bool = False
    score_thr: float = DEFAULT_SCORE_THR
    nms_iou: float = DEFAULT_NMS_IOU

    def __post_init__(self):
        if not (0 < self.rate <= 1):
            raise ConfigError(f"data availability rate must lie in (0, 1], got {self.rate}")
        if not self.methods or not list(self.seeds):
            raise ConfigError("need at least one method and one seed")


def save_checkpoint(registry: ParamRegistry, kind: int, mask: set[str] | None,
                    path, config_hash: bytes) -> None:
    """Binary tensor container; delta checkpoints hold exactly the mask names."""
    if kind not in (KIND_FULL, KIND_DELTA):
        raise CheckpointError(f"unknown checkpoint kind {kind}")
    if kind == KIND_DELTA:
        if not mask:
            raise CheckpointError("delta checkpoint needs a non-empty mask")
        names = [n for n in registry.names() if n in mask]
    else:
        names = registry.names()
    if len(config_hash) != 32:
        raise CheckpointError("config hash must be 32 bytes")
    with Path(path).open("wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<II", CKPT_VERSION, kind))
        fh.write(config_hash)
        fh.write(struct.pack("<I", len(names)))
        for name in names:
            value = registry[name].value
            encoded = name.encode("utf-8")
            fh.write(struct.pack("<H", len(encoded)))
            fh.write(encoded)
            fh.write(struct.pack("<B", value.ndim))
            fh.write(struct.pack(f"<{value.ndim}I", *value.shape))
            fh.write(np.ascontiguousarray(value, dtype="<f8").tobytes())


def _read_exact(fh, n: int) -> bytes:
    buf = fh.read(n)
    if len(buf) != n:
        raise CheckpointError(f"truncated checkpoint: wanted {n} bytes, got {len(buf)}")
    return buf


def load_checkpoint(path, registry: ParamRegistry, config_hash: bytes) -> int:
    """Load values into `registry`; returns the checkpoint kind.

    A full checkpoint must cover exactly the registry's names; a delta may
    cover any subset. Unknown names, shape mismatches, and config-hash
    mismatches are rejected.
    """
    with Path(path).open("rb") as fh:
        if _read_exact(fh, 4) != CKPT_MAGIC:
            raise CheckpointError(f"bad magic in {path}")
        version, kind = struct.unpack("<II", _read_exact(fh, 8))
        if version != CKPT_VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version}")
        if kind not in (KIND_FULL, KIND_DELTA):
            raise CheckpointError(f"unknown checkpoint kind {kind}")
        stored_hash = _read_exact(fh, 32)
        if stored_hash != config_hash:
            raise CheckpointError(
                "checkpoint was written for a different model configuration")
        (count,) = struct.unpack("<I", _read_exact(fh, 4))
        loaded: dict[str, np.ndarray] = {}
        for _ in range(count):
            (name_len,) = struct.unpack("<H", _read_exact(fh, 2))
            name = _read_exact(fh, name_len).decode("utf-8")
            (rank,) = struct.unpack("<B", _read_exact(fh, 1))
            shape = struct.unpack(f"<{rank}I", _read_exact(fh, 4 * rank))
            size = int(np.prod(shape)) if rank else 1
            data = np.frombuffer(_read_exact(fh, 8 * size), dtype="<f8")
            loaded[name] = data.reshape(shape).astype(np.float64)
    if kind == KIND_FULL and set(loaded) != set(registry.names()):
        missing = set(registry.names()) - set(loaded)
        extra = set(loaded) - set(registry.names())
        raise CheckpointError(
            f"full checkpoint name mismatch: missing {sorted(missing)}, "
            f"unexpected {sorted(extra)}")
    for name, value in loaded.items():
        if name not in registry:
            raise CheckpointError(f"checkpoint tensor '{name}' not in registry")
        if registry[name].value.shape != value.shape:
            raise CheckpointError(
                f"shape mismatch for '{name}': checkpoint {value.shape}, "
                f"registry {registry[name].value.shape}")
        registry[name].value = value
    return kind


def checkpoint_names(path) -> list[str]:
    """Tensor names stored in a checkpoint, in file order."""
    with Path(path).open("rb") as fh:
        if _read_exact(fh, 4) != CKPT_MAGIC:
            raise CheckpointError(f"bad magic in {path}")
        _version, _kind = struct.unpack("<II", _read_exact(fh, 8))
        _read_exact(fh, 32)
        (count,) = struct.unpack("<I", _read_exact(fh, 4))
        names = []
        for _ in range(count):
            (name_len,) = struct.unpack("<H", _read_exact(fh, 2))
            names.append(_read_exact(fh, name_len).decode("utf-8"))
            (rank,) = struct.unpack("<B", _read_exact(fh, 1))
            shape = struct.unpack(f"<{rank}I", _read_exact(fh, 4 * rank))
            fh.seek(8 * int(np.prod(shape) if rank else 1), 1)
    return names


def _method_rng(init_seed: int, seed: int, tag: str) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([init_seed, seed, *tag.encode()]))


def budget_indices(n_frames: int, rate: float, seed: int) -> np.ndarray:
    """First ceil(rate * n) frames of the seeded shuffle."""
    k = math.ceil(rate * n_frames)
    return np.random.default_rng(seed).permutation(n_frames)[:k]


def flip_sample(sample: SceneSample, flip_x: bool, flip_y: bool) -> SceneSample:
    """Mirror a scene about the world axes (the world extent is symmetric).

    Grids flip along the matching spatial axes; box and agent coordinates
    negate. Used as train-time augmentation, never at evaluation.
    """
    boxes = sample.boxes.copy()
    agents = sample.agents.copy()
    grids = sample.grids
    if flip_x:
        boxes[:, 0] = -boxes[:, 0]
        agents[:, 0] = -agents[:, 0]
        grids = grids[:, :, :, ::-1]
    if flip_y:
        boxes[:, 1] = -boxes[:, 1]
        agents[:, 1] = -agents[:, 1]
        grids = grids[:, :, ::-1, :]
    return SceneSample(boxes, agents, np.ascontiguousarray(grids))


def train_on(config: ModelConfig, registry: ParamRegistry, method: MethodConfig,
             samples: list[SceneSample], order: np.ndarray, domain: DomainConfig,
             epochs: int, lr: float, batch_size: int,
             shuffle_rng: np.random.Generator | None = None,
             augment: bool = False) -> int:
    """Adam training over the given frame budget; returns the step count.

    A batch is gradient accumulation: per-sample backward passes summed in
    frame order and divided by the batch length. When `shuffle_rng` is given
    the budget frames are reshuffled each epoch (deterministically) and,
    with `augment`, each visit draws a random axis flip of the frame.
    """
    geometry = GridGeometry(domain.x_min, domain.y_min, config.feat_cell_m,
                            config.feat_h, config.feat_w)
    cache: dict[tuple[int, int, int], tuple[SceneSample, Targets]] = {}

    def lookup(idx: int, flip_x: bool, flip_y: bool):
        key = (idx, flip_x, flip_y)
        if key not in cache:
            sample = samples[idx]
            if flip_x or flip_y:
                sample = flip_sample(sample, flip_x, flip_y)
            cache[key] = (sample, build_targets(sample.boxes, geometry))
        return cache[key]

    steps = 0
    for _ in range(epochs):
        epoch_order = order if shuffle_rng is None else shuffle_rng.permutation(order)
        for start in range(0, len(order), batch_size):
            batch = epoch_order[start:start + batch_size]
            acc: dict[str, np.ndarray] = {}
            for idx in batch:
                flip_x = flip_y = False
                if augment and shuffle_rng is not None:
                    flip_x, flip_y = (bool(v) for v in shuffle_rng.integers(0, 2, 2))
                sample, targets = lookup(int(idx), flip_x, flip_y)
                out = pipeline_forward(config, registry, sample.grids, method,
                                       targets=targets, train=True)
                out.loss.backward()
                for name, g in out.params.grads().items():
                    acc[name] = acc.get(name, 0.0) + g
            scale = 1.0 / len(batch)
            adam_step(registry, {n: g * scale for n, g in acc.items()}, lr=lr)
            steps += 1
    return steps


def build_base_registry(cfg: ExperimentConfig) -> ParamRegistry:
    return init_base_params(cfg.model, _method_rng(cfg.init_seed, 0, "base"))


def train_base(cfg: ExperimentConfig, samples: list[SceneSample],
               domain: DomainConfig) -> ParamRegistry:
    """Train the base model on domain A with every parameter trainable."""
    registry = build_base_registry(cfg)
    registry.set_trainable(set(registry.names()))
    method = make_method("none")
    order_rng = _method_rng(cfg.init_seed, 0, "base-order")
    geometry = GridGeometry(domain.x_min, domain.y_min, cfg.model.feat_cell_m,
                            cfg.model.feat_h, cfg.model.feat_w)
    targets = [build_targets(s.boxes, geometry) for s in samples]
    for _ in range(cfg.base_epochs):
        order = order_rng.permutation(len(samples))
        for start in range(0, len(order), cfg.batch_size):
            batch = order[start:start + cfg.batch_size]
            acc: dict[str, np.ndarray] = {}
            for idx in batch:
                out = pipeline_forward(cfg.model, registry, samples[int(idx)].grids,
                                       method, targets=targets[int(idx)], train=True)
                out.loss.backward()
                for name, g in out.params.grads().items():
                    acc[name] = acc.get(name, 0.0) + g
            scale = 1.0 / len(batch)
            adam_step(registry, {n: g * scale for n, g in acc.items()}, lr=cfg.lr)
    return registry


def adapt_cell(cfg: ExperimentConfig, base_values: dict[str, np.ndarray],
               method_name: str, seed: int, train_b: list[SceneSample],
               domain_b: DomainConfig,
               method: MethodConfig | None = None) -> tuple[ParamRegistry, MethodConfig, set[str]]:
    """Prepare and run one (method, seed) adaptation; returns the trained
    registry, the method configuration, and the freeze mask."""
    if method is None:
        method = make_method(method_name, cfg.variant)
    if method_name == "scratch":
        registry = init_base_params(cfg.model, _method_rng(cfg.init_seed, seed, "scratch"))
    else:
        registry = init_base_params(cfg.model, _method_rng(cfg.init_seed, 0, "base"))
        for name, value in base_values.items():
            registry[name].value = value.copy()
        init_method_params(registry, cfg.model, method,
                           _method_rng(cfg.init_seed, seed, method_name))
    mask = build_freeze_mask(registry, method)
    registry.set_trainable(mask)
    if method_name != "none":
        order = budget_indices(len(train_b), cfg.rate, seed)
        train_on(cfg.model, registry, method, train_b, order, domain_b,
                 cfg.epochs, cfg.lr, cfg.batch_size,
                 shuffle_rng=_method_rng(cfg.init_seed, seed, f"order-{method_name}"),
                 augment=cfg.augment)
    return registry, method, mask


def emit_table(reports: list[MetricsReport]) -> str:
    """CSV table, one row per report in input order."""
    lines = ["method,seed,params_trainable,params_total,ratio,AP50,AP70,seconds"]
    for r in reports:
        ratio = r.params_trainable / r.params_total if r.params_total else 0.0
        lines.append(
            f"{r.method},{r.seed},{r.params_trainable},{r.params_total},"
            f"{ratio:.6f},{r.ap50:.4f},{r.ap70:.4f},{r.seconds:.4f}")
    return "\n".join(lines) + "\n"


def run_experiment(cfg: ExperimentConfig) -> list[MetricsReport]:
    """Full protocol: train (or load) the base model on domain A, adapt each
    method x seed on the budgeted domain-B frames, evaluate on test B, and
    write per-cell reports, delta checkpoints, a combined CSV, and figures.
    """
    for path in (cfg.train_a, cfg.train_b, cfg.test_b):
        if not Path(path).exists():
            raise ConfigError(f"dataset not found: {path}")
    train_a, domain_a = read_dataset(cfg.train_a)
    train_b, domain_b = read_dataset(cfg.train_b)
    test_b, domain_test = read_dataset(cfg.test_b)
    for dom in (domain_a, domain_b, domain_test):
        if (dom.grid_h, dom.grid_w) != (cfg.model.h0, cfg.model.w0):
            raise ConfigError(
                f"dataset grid {dom.grid_h}x{dom.grid_w} != model grid "
                f"{cfg.model.h0}x{cfg.model.w0}")

    out_dir = Path(cfg.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "reports").mkdir(exist_ok=True)
    (out_dir / "deltas").mkdir(exist_ok=True)
    config_hash = cfg.model.config_hash()

    base_path = out_dir / "base.cpft"
    base_registry = build_base_registry(cfg)
    if base_path.exists():
        load_checkpoint(base_path, base_registry, config_hash)
    else:
        base_registry = train_base(cfg, train_a, domain_a)
        save_checkpoint(base_registry, KIND_FULL, None, base_path, config_hash)
        base_path.with_suffix(".cpft.json").write_text(cfg.model.to_json() + "\n")
    base_values = base_registry.state_dict()

    reports: list[MetricsReport] = []
    for method_name in cfg.methods:
        for seed in cfg.seeds:
            t0 = time.perf_counter()
            registry, method, mask = adapt_cell(
                cfg, base_values, method_name, seed, train_b, domain_b)
            if method_name not in ("none", "scratch") and mask:
                delta_path = out_dir / "deltas" / f"{method_name}_seed{seed}.cpft"
                save_checkpoint(registry, KIND_DELTA, mask, delta_path, config_hash)
                delta_path.with_suffix(".cpft.json").write_text(
                    json.dumps(method.to_dict(), sort_keys=True) + "\n")
            report = evaluate_model(cfg.model, registry, method, test_b, domain_test,
                                    score_thr=cfg.score_thr, nms_iou=cfg.nms_iou)
            trainable, total, _ = count_params(registry, mask)
            report.method = method_name
            report.seed = seed
            report.params_trainable = trainable
            report.params_total = total
            report.seconds = time.perf_counter() - t0
            (out_dir / "reports" / f"{method_name}_seed{seed}.json").write_text(
                report.to_json() + "\n")
            reports.append(report)

    (out_dir / "table.csv").write_text(emit_table(reports))
    from .figures import render_report_figures
    render_report_figures(reports, out_dir / "figures")
    return reports


def ablation_method_configs() -> list[tuple[str, MethodConfig]]:
    """Every ablation row: main components, adapter internals, prompt internals."""
    from dataclasses import replace

    from .peft import AdapterFlags, PromptFlags, variant_plan

    rows: list[tuple[str, MethodConfig]] = []
    std = variant_plan("standard")
    rows.append(("main_none", make_method("none")))
    rows.append(("main_adapter_only", MethodConfig("copeft", replace(std, prompt_enabled=False))))
    rows.append(("main_prompt_only", MethodConfig(
        "copeft", replace(std, pre_fusion=False, post_fusion=False))))
    rows.append(("main_full", MethodConfig("copeft", std)))

    adapter_combos = [
        (False, False, False), (True, False, False), (False, True, False),
        (False, False, True), (False, True, True), (True, True, False),
        (True, True, True),
    ]
    for conv, colf, scog in adapter_combos:
        plan = replace(std, prompt_enabled=False,
                       adapter_flags=AdapterFlags(conv, colf, scog))
        label = f"adapter_conv{int(conv)}_colf{int(colf)}_scog{int(scog)}"
        rows.append((label, MethodConfig("copeft", plan)))

    prompt_combos = [(False, False), (True, False), (True, True)]
    for aware, colf in prompt_combos:
        plan = replace(std, pre_fusion=False, post_fusion=False,
                       prompt_flags=PromptFlags(aware, colf))
        label = f"prompt_aware{int(aware)}_colf{int(colf)}"
        rows.append((label, MethodConfig("copeft", plan)))
    return rows


def run_ablations(cfg: ExperimentConfig, base_values: dict[str, np.ndarray],
                  train_b: list[SceneSample], domain_b: DomainConfig,
                  test_b: list[SceneSample], seed: int = 0) -> list[tuple[str, MetricsReport]]:
    """Adapt and evaluate one cell per ablation configuration."""
    out = []
    for label, method in ablation_method_configs():
        registry, method, mask = adapt_cell(
            cfg, base_values, method.method, seed, train_b, domain_b, method=method)
        report = evaluate_model(cfg.model, registry, method, test_b, domain_b,
                                score_thr=cfg.score_thr, nms_iou=cfg.nms_iou)
        trainable, total, _ = count_params(registry, mask)
        report.method = label
        report.seed = seed
        report.params_trainable = trainable
        report.params_total = total
        out.append((label, report))
    return out
