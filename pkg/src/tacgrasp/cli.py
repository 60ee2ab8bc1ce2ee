"""Command line entry points for the grasping pipeline.

One workspace directory (``--out``) holds everything a run produces:

    <out>/data/<kind>/<object>_<seed>.tsv   recorded episodes
    <out>/models/*.tgm                      trained model containers
    <out>/reports/*                         figures, tables, traces

Each subcommand is deterministic given its arguments and finishes by
printing a single machine readable JSON summary as the last stdout line.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import adapter as adapter_mod
from . import bench as bench_mod
from . import data_io
from . import generator as generator_mod
from . import report as report_mod
from . import stability
from .catalog import TEST_OBJECTS, load_catalog
from .errors import DataError, GraspError

GENERATOR_EPOCHS = 50
ADAPTER_EPOCHS = 100
DEFAULT_LR = 0.001
DEFAULT_BATCH = 64
DEFAULT_COMPONENTS = 2

GENERATOR_FILE = "generator.tgm"
ESTIMATOR_FILE = "estimator.tgm"
ADAPTER_FILE = "adapter.tgm"


@dataclass(frozen=True)
class RunConfig:
    """Resolved options for one subcommand invocation."""

    command: str
    out: Path
    seed: int = 1
    epochs: int = 0
    lr: float = DEFAULT_LR
    batch: int = DEFAULT_BATCH
    components: int = DEFAULT_COMPONENTS
    object_names: tuple[str, ...] = ()
    noise: bool = True
    adapter_arm: str = "both"
    port: int = 8765

    @property
    def data_dir(self) -> Path:
        return self.out / "data"

    @property
    def models_dir(self) -> Path:
        return self.out / "models"

    @property
    def reports_dir(self) -> Path:
        return self.out / "reports"


def _resolve_objects(spec: str, catalog) -> list:
    """Turn an --object value into catalog entries, preserving catalog order."""
    if spec == "all":
        return list(catalog.values())
    if spec == "test":
        return [catalog[name] for name in TEST_OBJECTS]
    names = [part.strip() for part in spec.split(",") if part.strip()]
    unknown = [name for name in names if name not in catalog]
    if unknown:
        raise DataError(
            f"unknown object name(s) {', '.join(unknown)}; "
            f"known objects: {', '.join(catalog)}"
        )
    if not names:
        raise DataError("--object must name at least one object")
    return [catalog[name] for name in names]


def _require_file(path: Path, producer: str) -> Path:
    if not path.is_file():
        raise DataError(f"missing model file {path}; run `tacgrasp {producer}` first")
    return path


def _load_trained_stack(cfg: RunConfig):
    """Load generator, estimator (with threshold), and adapter or fail loudly."""
    gen_model, _ = generator_mod.load_generator(
        _require_file(cfg.models_dir / GENERATOR_FILE, "train-gen")
    )
    est_model, report = stability.load_estimator(
        _require_file(cfg.models_dir / ESTIMATOR_FILE, "train-est")
    )
    if report is None:
        raise DataError(
            f"estimator file {cfg.models_dir / ESTIMATOR_FILE} has no stored "
            "threshold; re-run `tacgrasp train-est`"
        )
    adapt_model, _ = adapter_mod.load_adapter(
        _require_file(cfg.models_dir / ADAPTER_FILE, "train-adapt")
    )
    return gen_model, est_model, report, adapt_model


def _emit(payload: dict) -> None:
    print(json.dumps(payload, sort_keys=True))


def cmd_collect(cfg: RunConfig) -> int:
    catalog = load_catalog()
    objects = _resolve_objects(cfg.object_names[0], catalog)
    subset = {obj.name: obj for obj in objects}
    counts = data_io.generate_corpus(
        subset, base_seed=cfg.seed, out_root=cfg.data_dir, noise=cfg.noise
    )
    _emit(
        {
            "command": "collect",
            "episodes": counts["episodes"],
            "frames": counts["frames"],
            "files": len(counts["paths"]),
            "objects": len(objects),
            "out": str(cfg.data_dir),
            "seed": cfg.seed,
        }
    )
    return 0


def cmd_train_gen(cfg: RunConfig) -> int:
    episodes = data_io.read_kind(cfg.data_dir, "gp")
    samples = generator_mod.samples_from_episodes(episodes)
    config = generator_mod.GeneratorConfig(
        lr=cfg.lr, batch=cfg.batch, epochs=cfg.epochs
    )
    model, history = generator_mod.train_generator(samples, seed=cfg.seed, config=config)

    cfg.models_dir.mkdir(parents=True, exist_ok=True)
    model_path = cfg.models_dir / GENERATOR_FILE
    generator_mod.save_generator(model_path, model, history)
    figure = report_mod.plot_training_curves(
        history, cfg.reports_dir / "generator_loss.png", "Grasp generator training"
    )

    label_var = float(np.var([s.a_deg for s in samples]))
    _emit(
        {
            "command": "train-gen",
            "epochs": cfg.epochs,
            "figure": str(figure),
            "final_train_mse": float(history["train_mse"][-1]),
            "final_val_mse": float(history["val_mse"][-1]),
            "label_variance": label_var,
            "model": str(model_path),
            "samples": len(samples),
            "seed": cfg.seed,
        }
    )
    return 0


def cmd_train_est(cfg: RunConfig) -> int:
    episodes = data_io.read_kind(cfg.data_dir, "stab")
    frames = [f for _, fr in episodes for f in fr if f.label != "n/a"]
    model, report, metrics = stability.fit_stability_estimator(
        frames, seed=cfg.seed, m=cfg.components
    )

    cfg.models_dir.mkdir(parents=True, exist_ok=True)
    model_path = cfg.models_dir / ESTIMATOR_FILE
    stability.save_estimator(model_path, model, report)
    report_path = stability.write_threshold_report(
        cfg.reports_dir / "threshold_report.txt", report
    )
    figure = report_mod.plot_roc(report, cfg.reports_dir / "roc.png")

    _emit(
        {
            "command": "train-est",
            "clamped": report.clamped,
            "components": cfg.components,
            "em_iterations": metrics["em_iterations"],
            "figure": str(figure),
            "frames": len(frames),
            "likelihood_bounds": [report.a, report.b],
            "model": str(model_path),
            "report": str(report_path),
            "seed": cfg.seed,
            "separable": report.separable,
            "te": report.te,
            "val_auc": metrics["val_auc"],
            "youden_j": report.chosen_j,
        }
    )
    return 0


def cmd_train_adapt(cfg: RunConfig) -> int:
    episodes = data_io.read_kind(cfg.data_dir, "ga")
    sequences = [adapter_mod.adapt_samples_from_frames(frames) for _, frames in episodes]
    model, history = adapter_mod.train_adapter(
        sequences, seed=cfg.seed, epochs=cfg.epochs, lr=cfg.lr, batch_size=cfg.batch
    )

    cfg.models_dir.mkdir(parents=True, exist_ok=True)
    model_path = cfg.models_dir / ADAPTER_FILE
    adapter_mod.save_adapter(model_path, model, history)
    figure = report_mod.plot_training_curves(
        history, cfg.reports_dir / "adapter_loss.png", "Grasp adapter training"
    )

    labels = [s.dtheta_deg for seq in sequences for s in seq]
    _emit(
        {
            "command": "train-adapt",
            "epochs": cfg.epochs,
            "figure": str(figure),
            "final_train_mse": float(history["train_mse"][-1]),
            "final_val_mse": float(history["val_mse"][-1]),
            "label_variance": float(np.var(labels)),
            "model": str(model_path),
            "seed": cfg.seed,
            "sequences": len(sequences),
        }
    )
    return 0


def cmd_eval(cfg: RunConfig) -> int:
    catalog = load_catalog()
    objects = _resolve_objects(cfg.object_names[0], catalog)
    gen_model, est_model, report, adapt_model = _load_trained_stack(cfg)

    eval_dir = cfg.reports_dir / "eval"
    ticks: dict[str, dict[str, int]] = {}
    dropped: dict[str, dict[str, bool]] = {}
    for obj in objects:
        grams = max(1, round(0.5 * obj.max_fill_g))
        arms = {}
        arms["none"] = bench_mod.run_standard_episode(
            obj, grams, cfg.seed, generator=gen_model, noise=cfg.noise
        )
        arms["trained"] = bench_mod.run_standard_episode(
            obj,
            grams,
            cfg.seed,
            generator=gen_model,
            estimator=est_model,
            te=report.te,
            adapter=adapt_model,
            noise=cfg.noise,
        )
        ticks[obj.name] = {arm: r.ticks_survived for arm, r in arms.items()}
        dropped[obj.name] = {arm: r.dropped for arm, r in arms.items()}
        adapter_mod.write_episode_trace(eval_dir / f"{obj.name}_trace.tsv", arms["trained"])
        report_mod.plot_episode_trace(arms["trained"], eval_dir / f"{obj.name}_episode.png")

    _emit(
        {
            "command": "eval",
            "dropped": dropped,
            "out": str(eval_dir),
            "seed": cfg.seed,
            "ticks_survived": ticks,
        }
    )
    return 0


def cmd_bench(cfg: RunConfig) -> int:
    catalog = load_catalog()
    objects = _resolve_objects(cfg.object_names[0], catalog)

    policies = {
        "none": ("none",),
        "trained": ("trained",),
        "both": ("none", "trained"),
    }[cfg.adapter_arm]

    gen_model, _ = generator_mod.load_generator(
        _require_file(cfg.models_dir / GENERATOR_FILE, "train-gen")
    )
    est_model = te = adapt_model = None
    if "trained" in policies:
        _, est_model, report, adapt_model = _load_trained_stack(cfg)
        te = report.te

    results = bench_mod.bench_compare(
        objects,
        cfg.seed,
        gen_model,
        estimator=est_model,
        te=te,
        adapter=adapt_model,
        policies=policies,
        noise=cfg.noise,
    )

    table_path = cfg.reports_dir / "bench.tsv"
    bench_mod.write_bench_table(table_path, results)
    figure = report_mod.plot_bench_comparison(results, cfg.reports_dir / "bench.png")

    payload = {
        "command": "bench",
        "figure": str(figure),
        "max_grams": {r.object_name: r.max_grams for r in results},
        "policies": list(policies),
        "seed": cfg.seed,
        "table": str(table_path),
    }
    if len(policies) == 2:
        payload["mean_improvement_pct"] = bench_mod.mean_improvement_pct(results)
    _emit(payload)
    return 0


def cmd_validate(cfg: RunConfig, paths: list[str]) -> int:
    if paths:
        files = [Path(p) for p in paths]
    else:
        if not cfg.data_dir.is_dir():
            raise DataError(
                f"missing dataset directory {cfg.data_dir}; "
                "run the collect command first"
            )
        files = sorted(cfg.data_dir.glob("*/*.tsv"))
    if not files:
        raise DataError(f"no dataset files found under {cfg.data_dir}")

    frames = 0
    for path in files:
        header, records = data_io.read_dataset(path)
        data_io.validate_dataset(header, records)
        frames += len(records)
    _emit({"command": "validate", "files": len(files), "frames": frames, "ok": True})
    return 0


def cmd_serve(cfg: RunConfig) -> int:
    from .server import serve_teleop

    catalog = load_catalog()
    objects = _resolve_objects(cfg.object_names[0], catalog)
    if len(objects) != 1:
        raise DataError("serve needs exactly one --object")
    serve_teleop(
        port=cfg.port,
        obj=objects[0],
        seed=cfg.seed,
        out_root=cfg.out,
        noise=cfg.noise,
    )
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="tacgrasp",
        description="Tactile adaptive grasping pipeline: data collection, "
        "training, evaluation, benchmarking, and a teleoperation server.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, default_object=None):
        p.add_argument("--out", default="workspace", help="workspace directory")
        p.add_argument("--seed", type=int, default=1, help="base random seed")
        if default_object is not None:
            p.add_argument(
                "--object",
                default=default_object,
                help="'all', 'test', or comma separated object names",
            )
        p.add_argument(
            "--no-noise",
            action="store_true",
            help="disable simulated taxel noise",
        )

    p = sub.add_parser("collect", help="record the scripted demonstration corpus")
    common(p, default_object="all")

    p = sub.add_parser("train-gen", help="train the initial grasp generator")
    common(p)
    p.add_argument("--epochs", type=int, default=GENERATOR_EPOCHS)
    p.add_argument("--lr", type=float, default=DEFAULT_LR)
    p.add_argument("--batch", type=int, default=DEFAULT_BATCH)

    p = sub.add_parser("train-est", help="fit the grasp stability estimator")
    common(p)
    p.add_argument("--components", type=int, default=DEFAULT_COMPONENTS)

    p = sub.add_parser("train-adapt", help="train the grasp adaptation policy")
    common(p)
    p.add_argument("--epochs", type=int, default=ADAPTER_EPOCHS)
    p.add_argument("--lr", type=float, default=DEFAULT_LR)
    p.add_argument("--batch", type=int, default=DEFAULT_BATCH)

    p = sub.add_parser("eval", help="closed loop episodes with the trained stack")
    common(p, default_object="test")

    p = sub.add_parser("bench", help="max supported fill benchmark per object")
    common(p, default_object="test")
    p.add_argument(
        "--adapter",
        choices=("none", "trained", "both"),
        default="both",
        help="policy arms to benchmark",
    )

    p = sub.add_parser("validate", help="check recorded dataset files")
    common(p)
    p.add_argument("paths", nargs="*", help="dataset files (default: all under --out)")

    p = sub.add_parser("serve", help="teleoperation WebSocket session server")
    common(p, default_object="soda_can")
    p.add_argument("--port", type=int, default=8765)

    return parser


def _config_from_args(args: argparse.Namespace) -> RunConfig:
    return RunConfig(
        command=args.command,
        out=Path(args.out),
        seed=args.seed,
        epochs=getattr(args, "epochs", 0),
        lr=getattr(args, "lr", DEFAULT_LR),
        batch=getattr(args, "batch", DEFAULT_BATCH),
        components=getattr(args, "components", DEFAULT_COMPONENTS),
        object_names=(getattr(args, "object", "all"),),
        noise=not args.no_noise,
        adapter_arm=getattr(args, "adapter", "both"),
        port=getattr(args, "port", 8765),
    )


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    cfg = _config_from_args(args)
    handlers = {
        "collect": lambda: cmd_collect(cfg),
        "train-gen": lambda: cmd_train_gen(cfg),
        "train-est": lambda: cmd_train_est(cfg),
        "train-adapt": lambda: cmd_train_adapt(cfg),
        "eval": lambda: cmd_eval(cfg),
        "bench": lambda: cmd_bench(cfg),
        "validate": lambda: cmd_validate(cfg, args.paths),
        "serve": lambda: cmd_serve(cfg),
    }
    try:
        return handlers[cfg.command]()
    except GraspError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
