"""Experiment orchestration and the command-line interface.

Verbs:

* ``run``           train a task sequence, fill the accuracy grid, persist
* ``ablate``        run one of the three ablation suites and tabulate
* ``gradcheck``     analytic-vs-finite-difference gradient verification
* ``metrics``       recompute Transfer/Average/Last from a stored grid
* ``export-protos`` write frozen class embeddings and task prototypes

A JSON config file may supply every field; command-line flags override file
values. Exit code 0 on success; on failure a machine-readable error record
is printed to stderr and the exit code is nonzero (2 for configuration
errors, caught before any training starts).
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import matio
from .benchmark import (
    SyntheticDomain,
    apply_order,
    compute_metrics,
    format_matrix_table,
    generate_benchmark,
    matrix_to_records,
    new_accuracy_matrix,
    records_to_matrix,
    subsample_shots,
)
from .encoder import EncoderConfig, FrozenBackbone, class_token_sequence
from .gating import count_trainable_params
from .routing import TextPrototypeRouter, save_router
from .trainer import (
    GATING_MODES,
    ROUTING_KINDS,
    TaskIncrementalPrompter,
    TrainConfig,
    build_gradcheck_problem,
    finite_difference_gradcheck,
)

__all__ = ["ExperimentConfig", "RunRecord", "run_experiment", "ablation_suite", "main"]

CONFIDENCE_MODES = ("joint", "visual_only", "textual_only")
SUITES = ("components", "routing", "confidence")


class ConfigError(ValueError):
    """Invalid experiment configuration; raised before any training."""


@dataclass(frozen=True)
class ExperimentConfig:
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    domains: tuple = ()
    routing: str = "text_prototype"
    confidence_mode: str = "joint"
    gating: str = "symmetric"
    kmeans_clusters: int = 3
    confidence_top_k: int = 5
    threshold_policy: str = "calibrated"
    fixed_threshold_upper: float = 0.8
    fixed_threshold_lower: float = 0.2
    ordering: tuple | None = None
    shots: int | None = None  # None = full data
    seeds: tuple = (0, 1, 2, 3, 4)
    backbone_seed: int = 0
    output_dir: str = "results"

    def __post_init__(self):
        if not self.domains:
            object.__setattr__(self, "domains", tuple(
                SyntheticDomain(domain_id=i) for i in range(1, 5)
            ))

    def validate(self) -> None:
        if self.routing not in ROUTING_KINDS:
            raise ConfigError(f"routing must be one of {ROUTING_KINDS}, got {self.routing!r}")
        if self.confidence_mode not in CONFIDENCE_MODES:
            raise ConfigError(
                f"confidence_mode must be one of {CONFIDENCE_MODES}, got {self.confidence_mode!r}"
            )
        if self.gating not in GATING_MODES:
            raise ConfigError(f"gating must be one of {GATING_MODES}, got {self.gating!r}")
        if self.threshold_policy not in ("calibrated", "fixed"):
            raise ConfigError(f"bad threshold_policy {self.threshold_policy!r}")
        if self.kmeans_clusters < 1 or self.confidence_top_k < 1:
            raise ConfigError("kmeans_clusters and confidence_top_k must be positive")
        if len(self.domains) < 2:
            raise ConfigError("need at least 2 domains")
        if self.ordering is not None and sorted(self.ordering) != list(range(len(self.domains))):
            raise ConfigError("ordering must be a permutation of 0..T-1")
        if self.shots is not None and self.shots < 1:
            raise ConfigError("shots must be positive")
        if not self.seeds:
            raise ConfigError("need at least one seed")

    def to_dict(self) -> dict:
        return {
            "encoder": dataclasses.asdict(self.encoder),
            "train": dataclasses.asdict(self.train),
            "domains": [dataclasses.asdict(d) for d in self.domains],
            "routing": self.routing,
            "confidence_mode": self.confidence_mode,
            "gating": self.gating,
            "kmeans_clusters": self.kmeans_clusters,
            "confidence_top_k": self.confidence_top_k,
            "threshold_policy": self.threshold_policy,
            "fixed_threshold_upper": self.fixed_threshold_upper,
            "fixed_threshold_lower": self.fixed_threshold_lower,
            "ordering": list(self.ordering) if self.ordering is not None else None,
            "shots": self.shots,
            "seeds": list(self.seeds),
            "backbone_seed": self.backbone_seed,
            "output_dir": self.output_dir,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentConfig":
        data = dict(data)
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown config fields: {sorted(unknown)}")
        if "encoder" in data:
            data["encoder"] = EncoderConfig(**data["encoder"])
        if "train" in data:
            data["train"] = TrainConfig(**data["train"])
        if "domains" in data:
            data["domains"] = tuple(SyntheticDomain(**d) for d in data["domains"])
        for key in ("ordering", "seeds"):
            if data.get(key) is not None:
                data[key] = tuple(data[key])
        return cls(**data)

    def config_hash(self) -> str:
        canon = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canon.encode()).hexdigest()[:16]


@dataclass
class RunRecord:
    config_hash: str
    seeds: list
    matrices: list  # one (T+1, T) nested list per seed
    metrics: list  # one metrics dict per seed
    mean_metrics: dict
    param_counts: dict
    wall_clock_s: float

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "RunRecord":
        return cls(**data)


def _build_model(config: ExperimentConfig, seed: int) -> TaskIncrementalPrompter:
    train_cfg = dataclasses.replace(config.train, seed=seed)
    return TaskIncrementalPrompter(
        encoder_config=config.encoder,
        train_config=train_cfg,
        routing=config.routing,
        confidence_mode=config.confidence_mode,
        gating=config.gating,
        kmeans_clusters=config.kmeans_clusters,
        confidence_top_k=config.confidence_top_k,
        threshold_policy=config.threshold_policy,
        fixed_threshold_upper=config.fixed_threshold_upper,
        fixed_threshold_lower=config.fixed_threshold_lower,
        backbone_seed=config.backbone_seed,
    )


def _task_sequence(config: ExperimentConfig, seed: int) -> list:
    tasks = generate_benchmark(config.domains, seed, config.encoder)
    if config.ordering is not None:
        tasks = apply_order(tasks, config.ordering)
    if config.shots is not None:
        tasks = [subsample_shots(t, config.shots, seed) for t in tasks]
    return tasks


def _fill_matrix(model: TaskIncrementalPrompter, tasks) -> np.ndarray:
    T = len(tasks)
    A = new_accuracy_matrix(T)
    for j, task in enumerate(tasks):
        pred = model.predict_zero_shot(task.X_test, task.classes)
        A[0, j] = float((pred == task.y_test).mean())
    for i, task in enumerate(tasks, start=1):
        model.partial_fit(task.X_train, task.y_train)
        for j, other in enumerate(tasks):
            pred = model.predict(other.X_test, candidate_classes=other.classes)
            A[i, j] = float((pred == other.y_test).mean())
    return A


def run_experiment(config: ExperimentConfig, write: bool = True) -> RunRecord:
    """Train the task sequence for every seed and persist matrices/metrics."""
    config.validate()
    started = time.perf_counter()
    out = Path(config.output_dir)
    chash = config.config_hash()
    matrices, per_seed_metrics = [], []
    model = None
    for seed in config.seeds:
        model = _build_model(config, seed)
        tasks = _task_sequence(config, seed)
        A = _fill_matrix(model, tasks)
        matrices.append(A)
        per_seed_metrics.append(compute_metrics(A).as_dict())
        if write:
            out.mkdir(parents=True, exist_ok=True)
            stem = out / f"matrix_seed{seed}"
            stem.with_suffix(".csv").write_text(
                f"# config_hash={chash}\n" + matrix_to_records(A)
            )
            stem.with_suffix(".txt").write_text(
                f"config_hash={chash}\n"
                + format_matrix_table(A, [t.name for t in tasks], compute_metrics(A))
            )
    mean_metrics = {
        key: float(np.mean([m[key] for m in per_seed_metrics]))
        for key in ("transfer", "average", "last")
    }
    record = RunRecord(
        config_hash=chash,
        seeds=list(config.seeds),
        matrices=[A.tolist() for A in matrices],
        metrics=per_seed_metrics,
        mean_metrics=mean_metrics,
        param_counts=count_trainable_params(
            config.encoder, len(config.domains), config.gating
        ),
        wall_clock_s=time.perf_counter() - started,
    )
    if write:
        out.mkdir(parents=True, exist_ok=True)
        (out / "config.json").write_text(
            json.dumps({"config_hash": chash, **config.to_dict()}, indent=2, sort_keys=True) + "\n"
        )
        (out / "run.json").write_text(
            json.dumps(record.to_dict(), indent=2, sort_keys=True) + "\n"
        )
    return record


def _suite_variants(config: ExperimentConfig, suite: str) -> list:
    if suite == "components":
        return [
            ("full", config),
            ("wo_text_routing", dataclasses.replace(config, routing="visual_gaussian")),
            ("wo_mpvtc", dataclasses.replace(
                config, kmeans_clusters=1, threshold_policy="fixed"
            )),
            ("wo_sym_gating", dataclasses.replace(config, gating="image_only")),
        ]
    if suite == "routing":
        return [
            ("text_prototype", dataclasses.replace(config, routing="text_prototype")),
            ("visual_mean", dataclasses.replace(config, routing="visual_mean")),
            ("visual_gaussian", dataclasses.replace(config, routing="visual_gaussian")),
        ]
    if suite == "confidence":
        return [
            ("joint", dataclasses.replace(config, confidence_mode="joint")),
            ("visual_only", dataclasses.replace(config, confidence_mode="visual_only")),
            ("textual_only", dataclasses.replace(config, confidence_mode="textual_only")),
        ]
    raise ConfigError(f"unknown suite {suite!r}; choose from {SUITES}")


def ablation_suite(config: ExperimentConfig, suite: str = "components",
                   write: bool = True) -> dict:
    """Run a variant family and emit a comparison table plus raw records."""
    config.validate()
    base_out = Path(config.output_dir)
    results = {}
    for name, variant in _suite_variants(config, suite):
        variant = dataclasses.replace(variant, output_dir=str(base_out / suite / name))
        results[name] = run_experiment(variant, write=write)
    table = _format_suite_table(suite, results)
    summary = {
        "suite": suite,
        "config_hash": config.config_hash(),
        "variants": {
            name: {
                "config_hash": rec.config_hash,
                "mean_metrics": rec.mean_metrics,
                "per_seed_metrics": rec.metrics,
            }
            for name, rec in results.items()
        },
    }
    if write:
        (base_out / suite).mkdir(parents=True, exist_ok=True)
        (base_out / suite / "table.txt").write_text(table)
        (base_out / suite / "records.json").write_text(
            json.dumps(summary, indent=2, sort_keys=True) + "\n"
        )
    return {"table": table, "summary": summary, "records": results}


def _format_suite_table(suite: str, results: dict) -> str:
    lines = [f"{suite} suite", f"{'variant':<18}{'Transfer':>10}{'Average':>10}{'Last':>10}"]
    for name, rec in results.items():
        m = rec.mean_metrics
        lines.append(
            f"{name:<18}{m['transfer']:>10.4f}{m['average']:>10.4f}{m['last']:>10.4f}"
        )
    return "\n".join(lines) + "\n"


def export_prototypes(config: ExperimentConfig, out_dir: str) -> dict:
    """Frozen class embeddings and per-task text prototypes, as matrix files."""
    config.validate()
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    backbone = FrozenBackbone(config.encoder, seed=config.backbone_seed)
    router = TextPrototypeRouter()
    all_classes, rows = [], []
    for t, dom in enumerate(config.domains, start=1):
        classes = dom.class_ids()
        caps = np.stack([class_token_sequence(c, config.encoder) for c in classes])
        E = backbone.encode_text(caps)
        router.partial_fit(E, np.full(len(classes), t), class_ids=classes)
        all_classes.extend(classes)
        rows.append(E)
    matio.write_matrix(out / "class_embeddings.emb1", np.vstack(rows))
    matio.write_index(out / "class_embeddings.json", {
        "config_hash": config.config_hash(),
        "class_ids": [int(c) for c in all_classes],
        "dim": config.encoder.d,
    })
    save_router(router, out / "text_prototypes.emb1", out / "text_prototypes.json")
    return {"classes": len(all_classes), "tasks": len(config.domains)}


# ---------------------------------------------------------------- parsing --

def _add_common_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=str, help="JSON config file")
    p.add_argument("--routing", choices=ROUTING_KINDS)
    p.add_argument("--confidence-mode", choices=CONFIDENCE_MODES)
    p.add_argument("--gating", choices=GATING_MODES)
    p.add_argument("--kmeans-clusters", type=int)
    p.add_argument("--threshold-policy", choices=("calibrated", "fixed"))
    p.add_argument("--shots", type=int, help="per-class training shots (omit for full)")
    p.add_argument("--seeds", type=int, nargs="+")
    p.add_argument("--ordering", type=int, nargs="+")
    p.add_argument("--n-domains", type=int)
    p.add_argument("--n-classes", type=int)
    p.add_argument("--modes", type=int)
    p.add_argument("--shift", type=float)
    p.add_argument("--n-train", type=int)
    p.add_argument("--n-test", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--output", type=str, help="output directory")


def _config_from_args(args) -> ExperimentConfig:
    data = {}
    if args.config:
        path = Path(args.config)
        if not path.exists():
            raise ConfigError(f"config file not found: {path}")
        try:
            data = json.loads(path.read_text())
        except json.JSONDecodeError as e:
            raise ConfigError(f"config file is not valid JSON: {e}") from e
        data.pop("config_hash", None)
    config = ExperimentConfig.from_dict(data) if data else ExperimentConfig()

    overrides = {}
    for flag, fieldname in [
        ("routing", "routing"), ("confidence_mode", "confidence_mode"),
        ("gating", "gating"), ("kmeans_clusters", "kmeans_clusters"),
        ("threshold_policy", "threshold_policy"), ("shots", "shots"),
        ("output", "output_dir"),
    ]:
        val = getattr(args, flag, None)
        if val is not None:
            overrides[fieldname] = val
    if getattr(args, "seeds", None):
        overrides["seeds"] = tuple(args.seeds)
    if getattr(args, "ordering", None):
        overrides["ordering"] = tuple(args.ordering)
    domain_flags = {
        k: getattr(args, k, None)
        for k in ("n_domains", "n_classes", "modes", "shift", "n_train", "n_test")
    }
    if any(v is not None for v in domain_flags.values()):
        n_dom = domain_flags["n_domains"] or len(config.domains)
        proto = config.domains[0] if config.domains else SyntheticDomain(domain_id=1)
        overrides["domains"] = tuple(
            SyntheticDomain(
                domain_id=i,
                n_classes=domain_flags["n_classes"] or proto.n_classes,
                modes_per_class=domain_flags["modes"] or proto.modes_per_class,
                shift=domain_flags["shift"] if domain_flags["shift"] is not None else proto.shift,
                n_train=domain_flags["n_train"] or proto.n_train,
                n_test=domain_flags["n_test"] or proto.n_test,
            )
            for i in range(1, n_dom + 1)
        )
    train_over = {}
    if getattr(args, "epochs", None) is not None:
        train_over["epochs"] = args.epochs
    if getattr(args, "lr", None) is not None:
        train_over["lr"] = args.lr
    if train_over:
        overrides["train"] = dataclasses.replace(config.train, **train_over)
    if overrides:
        config = dataclasses.replace(config, **overrides)
    try:
        config.validate()
    except ConfigError:
        raise
    except ValueError as e:
        raise ConfigError(str(e)) from e
    return config


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="cmprompt",
        description="task-incremental prompt learning experiments on toy dual encoders",
    )
    sub = parser.add_subparsers(dest="verb", required=True)

    p_run = sub.add_parser("run", help="train a task sequence and fill the accuracy grid")
    _add_common_flags(p_run)

    p_abl = sub.add_parser("ablate", help="run an ablation suite")
    _add_common_flags(p_abl)
    p_abl.add_argument("--suite", choices=SUITES, default="components")

    p_grad = sub.add_parser("gradcheck", help="verify gradients against finite differences")
    p_grad.add_argument("--eps", type=float, default=1e-4)
    p_grad.add_argument("--tol", type=float, default=1e-4)
    p_grad.add_argument("--seed", type=int, default=0)

    p_met = sub.add_parser("metrics", help="recompute metrics from a stored matrix CSV")
    p_met.add_argument("matrix", type=str, help="matrix records CSV")

    p_exp = sub.add_parser("export-protos", help="export frozen embeddings and prototypes")
    _add_common_flags(p_exp)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        if args.verb == "run":
            config = _config_from_args(args)
            record = run_experiment(config)
            print(json.dumps({
                "config_hash": record.config_hash,
                "mean_metrics": record.mean_metrics,
                "param_counts": record.param_counts,
                "output_dir": config.output_dir,
            }, indent=2, sort_keys=True))
        elif args.verb == "ablate":
            config = _config_from_args(args)
            result = ablation_suite(config, suite=args.suite)
            print(result["table"], end="")
        elif args.verb == "gradcheck":
            loss_fn, params, _ = build_gradcheck_problem(seed=args.seed)
            err = finite_difference_gradcheck(loss_fn, params, eps=args.eps)
            ok = err < args.tol
            print(json.dumps({"max_relative_error": err, "tolerance": args.tol,
                              "passed": ok}))
            return 0 if ok else 1
        elif args.verb == "metrics":
            text = Path(args.matrix).read_text()
            body = "\n".join(ln for ln in text.splitlines() if not ln.startswith("#"))
            A = records_to_matrix(body)
            print(json.dumps(compute_metrics(A).as_dict(), indent=2, sort_keys=True))
        elif args.verb == "export-protos":
            config = _config_from_args(args)
            info = export_prototypes(config, config.output_dir)
            print(json.dumps(info))
        return 0
    except ConfigError as e:
        json.dump({"error": "config", "message": str(e)}, sys.stderr)
        sys.stderr.write("\n")
        return 2
    except Exception as e:  # runtime failures: structured record, nonzero exit
        json.dump({"error": type(e).__name__, "message": str(e)}, sys.stderr)
        sys.stderr.write("\n")
        return 1


if __name__ == "__main__":
    sys.exit(main())
