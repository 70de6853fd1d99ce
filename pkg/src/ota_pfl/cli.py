"""Experiment runner: config parsing, training runs, bound validation, sweeps.

Configs are YAML with five blocks (model, data, channel, trainer, run, plus
an optional sweep block).  Every key is schema-checked: unknown keys are
rejected by name, types are enforced, defaults are applied and echoed into
every output header so a result file fully describes the run that made it.

Exit codes: 0 success, 2 config error, 3 divergence, 4 bound violation,
5 I/O failure.
"""

import argparse
import itertools
import json
import math
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass

import numpy as np
import yaml

from . import data as datamod
from . import models, theory
from .channel import FADING_KINDS, ChannelModel
from .persist import atomic_write_text, save_models
from .training import (
    ALGORITHMS,
    METRIC_COLUMNS,
    MetricsTable,
    TrainerConfig,
    run_experiment,
)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DIVERGED = 3
EXIT_BOUND_VIOLATION = 4
EXIT_IO = 5

WORKERS_ENV = "OTA_PFL_WORKERS"


class ConfigError(ValueError):
    """A config file failed schema or constraint validation."""


@dataclass(frozen=True)
class _Field:
    types: tuple
    default: object = None
    choices: tuple | None = None
    allow_none: bool = False


_SCHEMA = {
    "model": {
        "kind": _Field((str,), "quadratic", choices=("quadratic", "logistic_l2", "mlp")),
        "dimension": _Field((int,), 10),
        "eig_min": _Field((float,), 0.5),
        "eig_max": _Field((float,), 2.0),
        "center_scale": _Field((float,), 1.0),
        "ridge": _Field((float,), 0.1),
        "hidden": _Field((list,), ()),
        "seed": _Field((int,), 0),
    },
    "data": {
        "source": _Field((str,), "none", choices=("none", "synthetic", "csv")),
        "scheme": _Field((str,), "natural", choices=("natural", "iid", "dirichlet")),
        "alpha": _Field((float,), 1.0),
        "n_per_client": _Field((int,), 200),
        "heterogeneity": _Field((float,), 0.0),
        "intercept": _Field((bool,), False),
        "test_fraction": _Field((float,), 0.0),
        "noisy_client_ratio": _Field((float,), 0.0),
        "noise_level_lower_bound": _Field((float,), 0.5),
        "path": _Field((str,), None, allow_none=True),
        "label_column": _Field((str,), "label"),
        "class_count": _Field((int,), 2),
        "seed": _Field((int,), 0),
    },
    "channel": {
        "kind": _Field((str,), "rayleigh", choices=FADING_KINDS),
        "fading_mean": _Field((float,), 1.0),
        "fading_var": _Field((float,), 0.0),
        "noise_var": _Field((float,), 0.0),
        "power": _Field((float,), 1.0),
    },
    "trainer": {
        "algorithm": _Field((str,), "personalized_aota", choices=ALGORITHMS),
        "lambda": _Field((float,), 1.0),
        "mu_prox": _Field((float,), 0.0),
        "global_lr": _Field((float,), 0.05),
        "local_lr": _Field((float,), 0.05),
        "rounds": _Field((int,), 100),
        "clients": _Field((int,), 10),
        "local_steps": _Field((int,), 5),
        "batch_size": _Field((int,), None, allow_none=True),
        "projection_radius": _Field((float,), None, allow_none=True),
    },
    "run": {
        "seeds": _Field((int, list), 1),
        "output_dir": _Field((str,), "."),
        "bound_validation": _Field((bool,), False),
        "workers": _Field((int,), 1),
    },
}

# Runtime knobs that never influence computed numbers; excluded from output
# headers so CSV bodies stay byte-identical across worker counts.
_UNECHOED = {("run", "workers"), ("run", "output_dir")}


def _check_value(path: str, field: _Field, value):
    if value is None:
        if field.allow_none:
            return None
        raise ConfigError(f"{path}: must not be null")
    if field.types == (float,):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{path}: expected a number, got {type(value).__name__} {value!r}")
        value = float(value)
    elif field.types == (int,):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{path}: expected an integer, got {type(value).__name__} {value!r}")
    elif field.types == (bool,):
        if not isinstance(value, bool):
            raise ConfigError(f"{path}: expected a boolean, got {type(value).__name__} {value!r}")
    elif field.types == (str,):
        if not isinstance(value, str):
            raise ConfigError(f"{path}: expected a string, got {type(value).__name__} {value!r}")
    elif field.types == (list,):
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{path}: expected a list, got {type(value).__name__} {value!r}")
        value = list(value)
    elif field.types == (int, list):
        if isinstance(value, bool) or not isinstance(value, (int, list)):
            raise ConfigError(f"{path}: expected an integer or list, got {type(value).__name__}")
    if field.choices is not None and value not in field.choices:
        raise ConfigError(f"{path}: {value!r} is not one of {list(field.choices)}")
    return value


class ExperimentConfig:
    """Validated configuration; blocks are attribute-accessible dicts."""

    def __init__(self, blocks: dict, sweep_grid: dict | None = None):
        self.blocks = blocks
        self.sweep_grid = sweep_grid or {}

    def __getitem__(self, block: str) -> dict:
        return self.blocks[block]

    def get(self, block: str, key: str):
        return self.blocks[block][key]

    def seeds(self) -> list[int]:
        raw = self.blocks["run"]["seeds"]
        if isinstance(raw, int):
            if raw < 1:
                raise ConfigError("run.seeds: count must be >= 1")
            return list(range(raw))
        seeds = []
        for s in raw:
            if isinstance(s, bool) or not isinstance(s, int) or s < 0:
                raise ConfigError(f"run.seeds: entries must be nonnegative integers, got {s!r}")
            seeds.append(s)
        if not seeds:
            raise ConfigError("run.seeds: list must not be empty")
        return seeds

    def header(self) -> dict:
        items = {}
        for block in _SCHEMA:
            for key, value in self.blocks[block].items():
                if (block, key) not in _UNECHOED:
                    items[f"{block}.{key}"] = value
        return items


def validate_config(raw: dict) -> ExperimentConfig:
    """Schema-check a raw mapping, apply defaults, enforce cross-field constraints."""
    if not isinstance(raw, dict):
        raise ConfigError(f"config root must be a mapping, got {type(raw).__name__}")
    known_blocks = set(_SCHEMA) | {"sweep"}
    for block in raw:
        if block not in known_blocks:
            raise ConfigError(f"unknown key {block!r}")
    blocks = {}
    for block, fields in _SCHEMA.items():
        section = raw.get(block, {})
        if section is None:
            section = {}
        if not isinstance(section, dict):
            raise ConfigError(f"{block}: expected a mapping")
        for key in section:
            if key not in fields:
                raise ConfigError(f"unknown key {block!r}.{key!r}")
        blocks[block] = {
            key: _check_value(f"{block}.{key}", field, section.get(key, field.default))
            for key, field in fields.items()
        }
    sweep_grid = _validate_sweep(raw.get("sweep"))
    cfg = ExperimentConfig(blocks, sweep_grid)
    _check_constraints(cfg)
    return cfg


def _validate_sweep(section) -> dict:
    if section is None:
        return {}
    if not isinstance(section, dict):
        raise ConfigError("sweep: expected a mapping")
    for key in section:
        if key != "grid":
            raise ConfigError(f"unknown key 'sweep'.{key!r}")
    grid = section.get("grid", {})
    if not isinstance(grid, dict) or not grid:
        raise ConfigError("sweep.grid: expected a non-empty mapping of 'block.key' to value lists")
    out = {}
    for path, values in grid.items():
        parts = path.split(".")
        if len(parts) != 2 or parts[0] not in _SCHEMA or parts[1] not in _SCHEMA[parts[0]]:
            raise ConfigError(f"sweep.grid: unknown parameter {path!r}")
        if not isinstance(values, list) or not values:
            raise ConfigError(f"sweep.grid.{path}: expected a non-empty list of values")
        out[path] = values
    return out


def _check_constraints(cfg: ExperimentConfig) -> None:
    model, data, trainer, run = cfg["model"], cfg["data"], cfg["trainer"], cfg["run"]
    if model["kind"] == "quadratic":
        if model["eig_min"] <= 0 or model["eig_max"] < model["eig_min"]:
            raise ConfigError("model: need 0 < eig_min <= eig_max")
    else:
        if data["source"] == "none":
            raise ConfigError(f"model.kind {model['kind']!r} requires a data source")
    if data["source"] == "csv" and not data["path"]:
        raise ConfigError("data.path is required when data.source is 'csv'")
    if data["source"] == "csv" and data["scheme"] == "natural":
        raise ConfigError("csv data must be partitioned; set data.scheme to 'iid' or 'dirichlet'")
    if data["scheme"] == "dirichlet" and data["alpha"] <= 0:
        raise ConfigError("data.alpha must be positive for the dirichlet scheme")
    if not 0.0 <= data["noisy_client_ratio"] <= 1.0:
        raise ConfigError("data.noisy_client_ratio must lie in [0, 1]")
    if not 0.0 <= data["noise_level_lower_bound"] <= 1.0:
        raise ConfigError("data.noise_level_lower_bound must lie in [0, 1]")
    if not 0.0 <= data["test_fraction"] < 1.0:
        raise ConfigError("data.test_fraction must lie in [0, 1)")
    for key in ("global_lr", "local_lr"):
        if trainer[key] <= 0:
            raise ConfigError(f"trainer.{key} must be positive")
    if trainer["clients"] < 1 or trainer["rounds"] < 0 or trainer["local_steps"] < 1:
        raise ConfigError("trainer: clients and local_steps must be >= 1, rounds >= 0")
    if run["workers"] < 1:
        raise ConfigError("run.workers must be >= 1")
    cfg.seeds()
    if run["bound_validation"]:
        if model["kind"] != "quadratic":
            raise ConfigError("run.bound_validation requires model.kind 'quadratic'")
        specs = build_specs(cfg)
        constants = theory.ensemble_constants(
            specs, build_channel(cfg), np.zeros(model["dimension"]), lam=trainer["lambda"]
        )
        lr_max = theory.max_global_lr(constants)
        if trainer["global_lr"] >= lr_max:
            raise ConfigError(
                f"trainer.global_lr {trainer['global_lr']:.6g} violates the step-size "
                f"condition; the admissible maximum for this ensemble is {lr_max:.17g}"
            )


def parse_config(path) -> ExperimentConfig:
    """Load and validate a YAML experiment config."""
    try:
        with open(path) as fh:
            raw = yaml.safe_load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except yaml.YAMLError as exc:
        raise ConfigError(f"cannot parse config {path}: {exc}") from exc
    return validate_config(raw if raw is not None else {})


# ---------------------------------------------------------------------------
# Experiment assembly
# ---------------------------------------------------------------------------


def build_channel(cfg: ExperimentConfig) -> ChannelModel:
    ch = cfg["channel"]
    return ChannelModel(
        kind=ch["kind"],
        fading_mean=ch["fading_mean"],
        fading_var=ch["fading_var"],
        noise_var=ch["noise_var"],
        power=ch["power"],
    )


def build_specs(cfg: ExperimentConfig) -> list:
    model, trainer = cfg["model"], cfg["trainer"]
    n_clients = trainer["clients"]
    if model["kind"] == "quadratic":
        return models.quadratic_ensemble(
            n_clients,
            model["dimension"],
            (model["eig_min"], model["eig_max"]),
            model["center_scale"],
            seed=model["seed"],
        )
    if model["kind"] == "logistic_l2":
        return [models.LogisticModel(dim=model["dimension"], ridge=model["ridge"]) for _ in range(n_clients)]
    classes = cfg["data"]["class_count"]
    out_width = 1 if classes <= 2 else classes
    widths = (model["dimension"], *[int(w) for w in model["hidden"]], out_width)
    return [models.MlpModel(widths=widths) for _ in range(n_clients)]


def build_data(cfg: ExperimentConfig):
    """Materialize (train_shards, test_shards) per the data block; None when data-free."""
    model, data, trainer = cfg["model"], cfg["data"], cfg["trainer"]
    if data["source"] == "none":
        return None, None
    n_clients = trainer["clients"]
    if data["source"] == "synthetic":
        gauss_dim = model["dimension"] - 1 if data["intercept"] else model["dimension"]
        if gauss_dim < 1:
            raise ConfigError("model.dimension must be >= 2 when data.intercept is set")
        class_count = data["class_count"]
        if class_count <= 2:
            shards = datamod.synth_clustered(
                n_clients,
                gauss_dim,
                data["n_per_client"],
                data["heterogeneity"],
                seed=data["seed"],
                intercept=data["intercept"],
            )
            class_count = 2
        else:
            shards = datamod.synth_clustered_multiclass(
                n_clients,
                gauss_dim,
                data["n_per_client"],
                class_count,
                data["heterogeneity"],
                seed=data["seed"],
                intercept=data["intercept"],
            )
    else:
        shards = [datamod.load_csv(data["path"], data["label_column"], data["class_count"])]
        class_count = data["class_count"]
    if data["scheme"] != "natural":
        features, labels = datamod.pool_shards(shards)
        if data["scheme"] == "iid":
            plan = datamod.iid_partition(labels, n_clients, seed=data["seed"])
        else:
            plan = datamod.dirichlet_partition(labels, n_clients, data["alpha"], seed=data["seed"])
        shards = datamod.apply_partition(features, labels, plan)
    elif len(shards) != n_clients:
        raise ConfigError(
            f"natural scheme produced {len(shards)} shards for {n_clients} clients"
        )
    test_shards = None
    if data["test_fraction"] > 0.0:
        pairs = [datamod.train_test_split(s, data["test_fraction"], seed=data["seed"]) for s in shards]
        shards = [p[0] for p in pairs]
        test_shards = [p[1] for p in pairs]
    if data["noisy_client_ratio"] > 0.0:
        shards = datamod.inject_label_noise(
            shards,
            data["noisy_client_ratio"],
            data["noise_level_lower_bound"],
            seed=data["seed"],
            class_count=class_count,
        )
    return shards, test_shards


def build_trainer(cfg: ExperimentConfig, seed: int) -> TrainerConfig:
    t = cfg["trainer"]
    return TrainerConfig(
        n_clients=t["clients"],
        rounds=t["rounds"],
        global_lr=t["global_lr"],
        local_lr=t["local_lr"],
        lam=t["lambda"],
        local_steps=t["local_steps"],
        batch_size=t["batch_size"],
        algorithm=t["algorithm"],
        mu_prox=t["mu_prox"],
        seed=seed,
        projection_radius=t["projection_radius"],
    )


def _run_single_seed(payload) -> tuple[int, str, bytes | None]:
    """Worker task: run one seed, return (seed, metrics text, model blob args)."""
    blocks, sweep_grid, seed = payload
    cfg = ExperimentConfig(blocks, sweep_grid)
    specs = build_specs(cfg)
    shards, test_shards = build_data(cfg)
    channel = build_channel(cfg)
    trainer = build_trainer(cfg, seed)
    w_star = None
    if cfg["model"]["kind"] == "quadratic":
        w_star = theory.compute_optima(specs, trainer.lam).w_star
    result = run_experiment(
        trainer, specs, shards, channel, w_star=w_star, test_shards=test_shards
    )
    result.metrics.header = {**cfg.header(), "seed": seed}
    personal = np.stack([c.v for c in result.clients])
    return seed, result.metrics.to_text(), (result.state.w, personal, result.diverged)


def _map_tasks(fn, payloads, workers: int):
    if workers <= 1 or len(payloads) <= 1:
        return [fn(p) for p in payloads]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, payloads))


def _resolve_workers(cfg: ExperimentConfig, args) -> int:
    if args.workers is not None:
        return max(1, args.workers)
    env = os.environ.get(WORKERS_ENV)
    if env:
        try:
            return max(1, int(env))
        except ValueError as exc:
            raise ConfigError(f"{WORKERS_ENV} must be an integer, got {env!r}") from exc
    return max(1, cfg["run"]["workers"])


def cmd_train(cfg: ExperimentConfig, args, say) -> int:
    out_dir = args.out or cfg["run"]["output_dir"]
    os.makedirs(out_dir, exist_ok=True)
    seeds = cfg.seeds()
    workers = _resolve_workers(cfg, args)
    payloads = [(cfg.blocks, cfg.sweep_grid, s) for s in seeds]
    results = _map_tasks(_run_single_seed, payloads, workers)
    diverged = False
    for seed, text, (w, personal, run_diverged) in sorted(results, key=lambda r: r[0]):
        suffix = "" if len(seeds) == 1 else f"_seed{seed}"
        metrics_path = os.path.join(out_dir, f"metrics{suffix}.csv")
        atomic_write_text(metrics_path, text)
        save_models(os.path.join(out_dir, f"models{suffix}.bin"), w, personal)
        say(f"seed {seed}: wrote {metrics_path}" + (" (diverged)" if run_diverged else ""))
        diverged = diverged or run_diverged
    return EXIT_DIVERGED if diverged else EXIT_OK


def cmd_validate_bounds(cfg: ExperimentConfig, args, say) -> int:
    if cfg["model"]["kind"] != "quadratic":
        raise ConfigError("validate-bounds requires model.kind 'quadratic'")
    out_dir = args.out or cfg["run"]["output_dir"]
    os.makedirs(out_dir, exist_ok=True)
    specs = build_specs(cfg)
    channel = build_channel(cfg)
    trainer = cfg["trainer"]
    seeds = cfg.seeds()
    checks: list[tuple[str, bool, str]] = []

    report = theory.validate_global_bound(
        specs,
        channel,
        rounds=trainer["rounds"],
        n_seeds=len(seeds),
        global_lr=trainer["global_lr"],
        lam=trainer["lambda"],
        local_lr=trainer["local_lr"],
        seed0=min(seeds),
    )
    theory.export_bound_curves(report, os.path.join(out_dir, "bounds.csv"))
    checks.append(
        (
            "global-error-bound",
            report.passed,
            f"contraction {report.contraction:.4f}, final mse {report.mse[-1]:.4g} "
            f"vs bound {report.bound[-1]:.4g}",
        )
    )
    personal = theory.validate_personal_bound(report)
    checks.append(
        (
            "personal-recursion-bound",
            personal.passed,
            f"lambda {personal.lam:g}, local_lr {personal.local_lr:.4g}",
        )
    )
    try:
        envelope = theory.validate_rate_envelope(
            specs,
            channel,
            rounds=trainer["rounds"],
            n_seeds=min(len(seeds), 100),
            global_lr=trainer["global_lr"],
            lam=trainer["lambda"],
            seed0=min(seeds),
        )
        checks.append(
            (
                "personal-rate-envelope",
                envelope.all_hold,
                f"C_fit {envelope.c_fit_max:.4g}, A {envelope.coeff:.4g}",
            )
        )
    except ValueError as exc:
        checks.append(("personal-rate-envelope", False, str(exc)))

    failed = False
    for name, ok, detail in checks:
        say(f"{'PASS' if ok else 'FAIL'} {name}: {detail}", force=not ok)
        failed = failed or not ok
    return EXIT_BOUND_VIOLATION if failed else EXIT_OK


def _set_by_path(blocks: dict, path: str, value):
    block, key = path.split(".")
    blocks[block][key] = value


def cmd_sweep(cfg: ExperimentConfig, args, say) -> int:
    if not cfg.sweep_grid:
        raise ConfigError("sweep subcommand requires a sweep.grid block")
    out_dir = args.out or cfg["run"]["output_dir"]
    os.makedirs(out_dir, exist_ok=True)
    seeds = cfg.seeds()
    workers = _resolve_workers(cfg, args)
    paths = list(cfg.sweep_grid)
    index = []
    exit_code = EXIT_OK
    for point_no, combo in enumerate(itertools.product(*(cfg.sweep_grid[p] for p in paths))):
        raw = {block: dict(values) for block, values in cfg.blocks.items()}
        for path, value in zip(paths, combo):
            _set_by_path(raw, path, value)
        point_cfg = validate_config(raw)
        payloads = [(point_cfg.blocks, {}, s) for s in seeds]
        results = _map_tasks(_run_single_seed, payloads, workers)
        diverged = any(r[2][2] for r in results)
        exit_code = EXIT_DIVERGED if diverged else exit_code
        table = _mean_metrics(point_cfg, [r for r in sorted(results, key=lambda r: r[0])])
        filename = f"sweep_{point_no:03d}.csv"
        atomic_write_text(os.path.join(out_dir, filename), table.to_text())
        index.append(
            {
                "point": dict(zip(paths, combo)),
                "file": filename,
                "seeds": seeds,
                "diverged": diverged,
            }
        )
        say(f"point {point_no} {dict(zip(paths, combo))} -> {filename}")
    atomic_write_text(os.path.join(out_dir, "index.json"), json.dumps(index, indent=2) + "\n")
    return exit_code


def _mean_metrics(cfg: ExperimentConfig, seed_results) -> MetricsTable:
    """Average per-round metric columns across the seed runs of one sweep point."""
    parsed = [_parse_metrics_text(text) for _, text, _ in seed_results]
    table = MetricsTable(header={**cfg.header(), "seeds_averaged": len(parsed)})
    n_rounds = min(len(rows) for rows in parsed)
    for t in range(n_rounds):
        row = {"round": parsed[0][t]["round"]}
        for col in METRIC_COLUMNS[1:]:
            values = [rows[t][col] for rows in parsed if not math.isnan(rows[t][col])]
            row[col] = float(np.mean(values)) if values else None
        table.append(**row)
    return table


def _parse_metrics_text(text: str) -> list[dict]:
    lines = [ln for ln in text.splitlines() if ln and not ln.startswith("#")]
    header = lines[0].split(",")
    rows = []
    for line in lines[1:]:
        cells = line.split(",")
        rows.append(
            {
                name: (float(cell) if cell else math.nan)
                for name, cell in zip(header, cells)
            }
        )
    return rows


# ---------------------------------------------------------------------------
# Entry point
# ---------------------------------------------------------------------------


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ota-pfl",
        description="Personalized federated learning simulator over an analog over-the-air channel",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name, help_text in (
        ("train", "run the configured training experiment"),
        ("validate-bounds", "check the convergence bounds on a quadratic ensemble"),
        ("sweep", "run the configured parameter grid"),
    ):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", required=True, help="path to the YAML experiment config")
        p.add_argument("--seed", type=int, default=None, help="override run.seeds with one seed")
        p.add_argument("--out", default=None, help="override the output directory")
        p.add_argument("--workers", type=int, default=None, help="parallel worker processes")
        p.add_argument("--quiet", action="store_true", help="suppress progress output")
    return parser


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)

    def say(message, force=False):
        if force or not args.quiet:
            print(message)

    try:
        cfg = parse_config(args.config)
        if args.seed is not None:
            cfg.blocks["run"]["seeds"] = [args.seed]
        handler = {
            "train": cmd_train,
            "validate-bounds": cmd_validate_bounds,
            "sweep": cmd_sweep,
        }[args.command]
        return handler(cfg, args, say)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_IO


def console_main() -> None:
    sys.exit(main())


if __name__ == "__main__":
    console_main()
