"""Experiment orchestration: manifests, sweeps, run directories, exports.

A manifest expands to a list of training configs. Each config owns a run
directory named after its content hash; finished runs are never re-executed
and partially finished runs resume from their last checkpoint, so re-invoking
a manifest is idempotent. Everything a figure needs is materialized under the
output root.
"""

from __future__ import annotations

import csv
import itertools
import json
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .analysis import latent_table, scaling_point, write_latent_csv, write_scaling_csv
from .backbone import load_checkpoint
from .errors import ConfigError
from .sampling import decode_testset, dynamics_matrix, position_step_spearman
from .stargraph import StarSpec, TaskVariant, build_testset, load_testset, save_testset
from .training import RunRecord, TrainConfig, train

OUTPUT_ROOT_ENV = "STARLAB_OUTPUT_ROOT"
EXPORT_KINDS = ("dynamics", "scaling", "latent", "curves")


def default_output_root() -> Path:
    return Path(os.environ.get(OUTPUT_ROOT_ENV, "runs"))


@dataclass
class ExperimentManifest:
    name: str
    runs: list[TrainConfig]
    output_root: Path = field(default_factory=default_output_root)
    testset_size: int = 1000
    testset_seed: int = 123
    workers: int = 1

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "output_root": str(self.output_root),
            "testset_size": self.testset_size,
            "testset_seed": self.testset_seed,
            "workers": self.workers,
            "runs": [cfg.to_dict() for cfg in self.runs],
        }


def manifest_from_yaml(path: str | Path, output_root: Path | None = None) -> ExperimentManifest:
    """Parse a manifest file. `defaults` seed every run; `sweep` axes take the
    cartesian product; explicit `runs` entries are appended afterwards."""
    data = yaml.safe_load(Path(path).read_text())
    if not isinstance(data, dict) or "name" not in data:
        raise ConfigError(f"{path}: manifest must be a mapping with a 'name'")
    defaults = data.get("defaults", {})
    run_dicts: list[dict] = []
    sweep = data.get("sweep")
    if sweep:
        axes = {k: v if isinstance(v, list) else [v] for k, v in sweep.items()}
        keys = sorted(axes)
        for combo in itertools.product(*(axes[k] for k in keys)):
            run_dicts.append({**defaults, **dict(zip(keys, combo))})
    for entry in data.get("runs", []):
        run_dicts.append({**defaults, **entry})
    configs = [_config_from_dict(d) for d in run_dicts]
    root = output_root or Path(data.get("output_root") or default_output_root())
    return ExperimentManifest(
        name=data["name"],
        runs=configs,
        output_root=root,
        testset_size=int(data.get("testset_size", 1000)),
        testset_seed=int(data.get("testset_seed", 123)),
        workers=int(data.get("workers", 1)),
    )


def _config_from_dict(d: dict) -> TrainConfig:
    d = dict(d)
    spec = d.pop("spec")
    if isinstance(spec, dict):
        spec = StarSpec(**spec)
    variant = d.pop("variant", "original")
    if isinstance(variant, str):
        variant = TaskVariant.parse(variant)
    try:
        return TrainConfig(spec=spec, variant=variant, **d)
    except TypeError as exc:
        raise ConfigError(f"bad run entry: {exc}") from exc


def run_name(config: TrainConfig) -> str:
    base = config.name or (
        f"{config.mode}-{config.regime}-{config.variant.kind}"
        f"-g{config.spec.d}x{config.spec.l}-seed{config.seed}"
    )
    return f"{base}-{config.hash()}"


def testset_path(root: Path, config: TrainConfig, size: int, seed: int) -> Path:
    key = f"g{config.spec.d}x{config.spec.l}n{config.spec.pool_size}-{config.variant.kind}-{size}-{seed}"
    return root / "testsets" / key / "testset.strp"


def ensure_testset(root: Path, config: TrainConfig, size: int, seed: int):
    path = testset_path(root, config, size, seed)
    if path.exists():
        return load_testset(path), path
    ts = build_testset(config.spec, size, seed, variant=config.variant, edge_order=config.edge_order)
    save_testset(ts, path)
    return ts, path


def run_dir_for(manifest: ExperimentManifest, config: TrainConfig) -> Path:
    return manifest.output_root / manifest.name / run_name(config)


def execute_run(
    manifest: ExperimentManifest,
    config: TrainConfig,
    on_eval=None,
) -> tuple[Path, RunRecord]:
    """Run (or resume, or skip) one config inside the manifest's output tree."""
    run_dir = run_dir_for(manifest, config)
    manifest_path = run_dir / "manifest.json"
    if manifest_path.exists():
        existing = json.loads(manifest_path.read_text())
        if existing.get("config_hash") != config.hash():
            raise ConfigError(
                f"{run_dir}: directory already holds a different config "
                f"({existing.get('config_hash')} != {config.hash()})"
            )
    testset, ts_path = ensure_testset(manifest.output_root, config, manifest.testset_size, manifest.testset_seed)
    status_path = run_dir / "status.json"
    if status_path.exists() and json.loads(status_path.read_text()).get("state") == "completed":
        record = load_run_record(run_dir)
        return run_dir, record
    record, _ = train(config, testset, run_dir=run_dir, on_eval=on_eval)
    extra = json.loads((run_dir / "manifest.json").read_text())
    extra["testset_path"] = str(ts_path)
    (run_dir / "manifest.json").write_text(json.dumps(extra, indent=2) + "\n")
    return run_dir, record


def run_manifest(manifest: ExperimentManifest, on_event=None) -> list[tuple[Path, RunRecord]]:
    """Execute every run in the manifest; completed runs are skipped."""
    out_dir = manifest.output_root / manifest.name
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "experiment.json").write_text(json.dumps(manifest.to_dict(), indent=2) + "\n")
    results: list[tuple[Path, RunRecord]] = [None] * len(manifest.runs)

    def job(idx_config):
        idx, config = idx_config
        def forward(record, point):
            if on_event:
                on_event(run_name(config), record, point)
        path, record = execute_run(manifest, config, on_eval=forward)
        results[idx] = (path, record)

    if manifest.workers <= 1:
        for item in enumerate(manifest.runs):
            job(item)
    else:
        with ThreadPoolExecutor(max_workers=manifest.workers) as pool:
            list(pool.map(job, enumerate(manifest.runs)))
    return results


def load_run_record(run_dir: str | Path) -> RunRecord:
    """Rebuild a RunRecord purely from the run directory's persisted logs."""
    run_dir = Path(run_dir)
    status_path = run_dir / "status.json"
    metrics_path = run_dir / "metrics.jsonl"
    if not status_path.exists():
        raise ConfigError(f"{run_dir}: no status.json; run training first")
    status = json.loads(status_path.read_text())
    evals = []
    if metrics_path.exists():
        with open(metrics_path) as f:
            for line in f:
                evals.append(json.loads(line))
    return RunRecord.from_dict(
        {
            "examples_seen": status["examples_seen"],
            "step": status["step"],
            "converged": status["converged"],
            "samples_to_convergence": status["samples_to_convergence"],
            "evals": evals,
        }
    )


def load_run_config(run_dir: str | Path) -> tuple[TrainConfig, dict]:
    run_dir = Path(run_dir)
    manifest_path = run_dir / "manifest.json"
    if not manifest_path.exists():
        raise ConfigError(f"{run_dir}: no manifest.json; run training first")
    blob = json.loads(manifest_path.read_text())
    return TrainConfig.from_dict(blob["config"]), blob


def _load_run_testset(run_dir: Path, blob: dict):
    ts_path = blob.get("testset_path")
    if not ts_path or not Path(ts_path).exists():
        raise ConfigError(f"{run_dir}: test set file missing; re-run `sweep` or `gen-testset`")
    return load_testset(ts_path)


def _run_model(run_dir: Path, config: TrainConfig):
    ckpt = run_dir / "checkpoints" / "last.pt"
    if not ckpt.exists():
        raise ConfigError(f"{run_dir}: no checkpoint; run training first")
    import torch

    state = torch.load(ckpt, map_location="cpu", weights_only=False)
    from .backbone import Backbone, BackboneConfig

    model = Backbone(BackboneConfig(**state["backbone_config"]))
    model.load_state_dict(state["params"])
    model.eval()
    return model


def export_curves(run_dir: str | Path, out: str | Path | None = None) -> Path:
    """Training curves CSV: one row per eval point, per-position columns p0..pk."""
    run_dir = Path(run_dir)
    record = load_run_record(run_dir)
    if not record.evals:
        raise ConfigError(f"{run_dir}: no eval points recorded; nothing to export")
    out = Path(out) if out else run_dir / "exports" / "curves.csv"
    out.parent.mkdir(parents=True, exist_ok=True)
    width = len(record.evals[0].per_position)
    hinted = any(e.hinted_exact_match is not None for e in record.evals)
    header = ["examples_seen", "step", "lr", "loss", "exact_match"]
    if hinted:
        header.append("hinted_exact_match")
    header += [f"p{i}" for i in range(width)]
    with open(out, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(header)
        for e in record.evals:
            row = [e.examples_seen, e.step, f"{e.lr:.8g}", f"{e.loss:.6f}", f"{e.exact_match:.6f}"]
            if hinted:
                row.append("" if e.hinted_exact_match is None else f"{e.hinted_exact_match:.6f}")
            row += [f"{p:.6f}" for p in e.per_position]
            writer.writerow(row)
    return out


def export_dynamics(
    run_dir: str | Path,
    out: str | Path | None = None,
    decode_size: int = 500,
    steps: int | None = None,
    commit_per_step: int = 1,
    policy: str = "confidence",
) -> tuple[Path, float]:
    """Decode the run's test set and export the unmask-step matrix; returns the
    CSV path and the position/step Spearman statistic."""
    run_dir = Path(run_dir)
    config, blob = load_run_config(run_dir)
    testset = _load_run_testset(run_dir, blob)
    model = _run_model(run_dir, config)
    _, _, records = decode_testset(
        model, testset, eval_size=decode_size, steps=steps,
        commit_per_step=commit_per_step, policy=policy,
    )
    matrix = dynamics_matrix(records)
    out = Path(out) if out else run_dir / "exports" / "dynamics.csv"
    matrix.to_csv(out)
    return out, position_step_spearman(records)


def export_latent(
    run_dir: str | Path,
    out: str | Path | None = None,
    instances: int = 200,
    layers: list[int] | None = None,
    pool: str = "role",
) -> Path:
    run_dir = Path(run_dir)
    config, blob = load_run_config(run_dir)
    testset = _load_run_testset(run_dir, blob)
    model = _run_model(run_dir, config)
    rows = latent_table(model, testset.instances()[: min(instances, testset.size)], layers=layers, pool=pool)
    out = Path(out) if out else run_dir / "exports" / "latent.csv"
    return write_latent_csv(rows, out)


def export_scaling(run_dirs: list[str | Path], out: str | Path) -> Path:
    points = []
    for rd in run_dirs:
        rd = Path(rd)
        config, _ = load_run_config(rd)
        record = load_run_record(rd)
        points.append(scaling_point(config.spec, config.mode, record, budget=config.max_examples))
    return write_scaling_csv(points, out)


def export(run_dirs: list[str | Path], what: str, out: str | Path | None = None, **kw) -> list[Path]:
    """Dispatch an export over one or more run directories."""
    if what not in EXPORT_KINDS:
        raise ConfigError(f"unknown export kind {what!r}; choose from {EXPORT_KINDS}")
    if what == "scaling":
        if out is None:
            raise ConfigError("scaling export needs an explicit --out path")
        return [export_scaling(run_dirs, out)]
    paths = []
    for rd in run_dirs:
        target = None
        if out is not None:
            target = Path(out) if len(run_dirs) == 1 else Path(out) / f"{Path(rd).name}-{what}.csv"
        if what == "curves":
            paths.append(export_curves(rd, target))
        elif what == "dynamics":
            paths.append(export_dynamics(rd, target, **kw)[0])
        elif what == "latent":
            paths.append(export_latent(rd, target, **kw))
    return paths
