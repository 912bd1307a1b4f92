"""Run orchestration behind the CLI verbs: train, eval, ablate, cost, report.

Every run owns a directory holding its resolved config, manifest, raw CSVs
and checkpoints. Ablation and report tables are built only from those raw
files.
"""
import hashlib
import json
from concurrent.futures import ProcessPoolExecutor
from datetime import datetime
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import pandas as pd
from loguru import logger

from app import __version__
from app.config import settings
from app.exceptions import ConfigValidationError, LabError
from app.models.reports import CostReport, EvalReport, RunManifest
from app.models.training import SweepSpec, TrainConfig
from app.services.checkpoint import latest_checkpoint, load_checkpoint
from app.services.data_synth import SyntheticDataset, export_scenes
from app.services.metrics import cost_ratios, cost_report
from app.services.mimo_model import MimoSegNet, SingleSegNet
from app.services.reference import measure_forward_passes
from app.services.trainer import Trainer, evaluate
from app.services.uncertainty import export_uncertainty_maps
from app.utils.helpers import sanitize_run_name

PathLike = Union[str, Path]


def config_digest(cfg: TrainConfig) -> str:
    return hashlib.sha1(cfg.to_text().encode("utf-8")).hexdigest()[:10]


def default_run_dir(cfg: TrainConfig, name: Optional[str] = None) -> Path:
    return Path(settings.output_root) / (name or f"{cfg.mode.value}-{config_digest(cfg)}")


def seeds_of(cfg: TrainConfig) -> Dict[str, int]:
    return {
        "dataset_seed": cfg.dataset_seed,
        "split_seed": cfg.split_seed,
        "sampler_seed": cfg.sampler_seed,
        "init_seed": cfg.init_seed,
    }


def _write_manifest(manifest: RunManifest) -> None:
    Path(manifest.run_dir, "manifest.json").write_text(manifest.model_dump_json(indent=2))


def run_train(cfg: TrainConfig, run_dir: Optional[PathLike] = None) -> Path:
    """Train one configuration and leave a complete run directory behind"""
    run_dir = Path(run_dir) if run_dir is not None else default_run_dir(cfg)
    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / "config.txt").write_text(cfg.to_text())
    manifest = RunManifest(
        run_dir=str(run_dir),
        config=cfg.to_mapping(),
        code_version=__version__,
        seeds=seeds_of(cfg),
        outputs={
            name: str(run_dir / name)
            for name in ("config.txt", "metrics.csv", "timing.csv", "eval.csv", "eval.json", "checkpoints")
        },
    )
    _write_manifest(manifest)
    logger.info(f"Run directory: {run_dir}")

    trainer = Trainer(cfg, run_dir=run_dir)
    logger.info(f"Colour-only probe error on the validation scenes: {trainer.dataset.probe():.3f}")
    final = trainer.fit()

    manifest.finished_at = datetime.now()
    manifest.completed = True
    _write_manifest(manifest)
    logger.info(f"Finished {run_dir.name}: mIoU {final.miou * 100:.2f}")
    return run_dir


def load_run_config(run_dir: PathLike) -> TrainConfig:
    return TrainConfig.from_file(Path(run_dir) / "config.txt")


def run_eval(run_dir: PathLike, checkpoint: Optional[PathLike] = None, export: int = 0) -> EvalReport:
    """Re-evaluate a run's latest (or the given) checkpoint on its validation set.

    ``export`` > 0 also writes that many validation scenes and their
    uncertainty maps under ``<run_dir>/export``.
    """
    run_dir = Path(run_dir)
    cfg = load_run_config(run_dir)
    path = Path(checkpoint) if checkpoint is not None else latest_checkpoint(run_dir)
    if path is None:
        raise LabError(f"run {run_dir} has no checkpoints")
    model = MimoSegNet(cfg.mimo(), seed=cfg.init_seed, precision=cfg.precision)
    restored = load_checkpoint(path, model)
    dataset = SyntheticDataset(cfg)
    report = evaluate(
        model,
        dataset.val_images,
        dataset.val_labels,
        cfg.num_classes,
        batch=cfg.eval_batch,
        iteration=int(restored["iteration"]),
    )
    (run_dir / "reeval.json").write_text(report.model_dump_json(indent=2))
    if export > 0:
        images, labels = dataset.val_images[:export], dataset.val_labels[:export]
        target = run_dir / "export"
        export_scenes(images, labels, str(target), cfg.num_classes, prefix="val")
        export_uncertainty_maps(model.forward_inference(images), cfg.gamma, str(target), prefix="val")
    logger.info(f"Evaluated {path}: mIoU {report.miou * 100:.2f}")
    return report


# --- ablations --------------------------------------------------------------------------


def apply_sweep_value(cfg: TrainConfig, parameter: str, value: str) -> TrainConfig:
    """Config for one sweep point; gamma 0 means no uncertainty weighting"""
    if parameter == "gamma":
        if float(value) == 0.0:
            return cfg.with_overrides(use_uncertainty="false")
        return cfg.with_overrides(gamma=value, use_uncertainty="true")
    if parameter == "fusion":
        kind, _, grid = value.partition(":")
        if kind == "summing":
            return cfg.with_overrides(fusion="summing")
        if kind == "gridmix":
            return cfg.with_overrides(fusion="gridmix", grid_size=grid or cfg.grid_size)
        raise ConfigValidationError({"values": f"unknown fusion '{value}'"})
    if parameter == "component":
        lam = cfg.lam if cfg.lam > 0 else 1.0
        if value == "supervised":
            return cfg.with_overrides(lam=0.0)
        if value == "scs":
            return cfg.with_overrides(lam=lam, use_uncertainty="false")
        if value == "uscs":
            return cfg.with_overrides(lam=lam, use_uncertainty="true")
        raise ConfigValidationError({"values": f"unknown component '{value}'"})
    return cfg.with_overrides(**{parameter: value})


def sweep_configs(base: TrainConfig, sweep: SweepSpec) -> List[Tuple[str, int, TrainConfig]]:
    """(value, seed index, config) per run; seed s shifts the init and sampler seeds"""
    points = []
    for value in sweep.values:
        point = apply_sweep_value(base, sweep.parameter, value)
        for s in range(sweep.seeds):
            points.append(
                (value, s, point.with_overrides(init_seed=base.init_seed + s, sampler_seed=base.sampler_seed + s))
            )
    return points


def final_eval_row(run_dir: PathLike) -> Dict[str, object]:
    table = pd.read_csv(Path(run_dir) / "eval.csv")
    return table.iloc[-1].to_dict()


def _ablation_worker(args: Tuple[str, int, str, str]) -> Dict[str, object]:
    value, seed, config_text, run_dir = args
    row: Dict[str, object] = {"value": value, "seed": seed, "run_dir": run_dir}
    try:
        run_train(TrainConfig.from_text(config_text), run_dir)
        final = final_eval_row(run_dir)
        row.update(miou=final["miou"], non_overlap=final["non_overlap"], status="ok")
    except Exception as e:
        logger.error(f"Run {run_dir} failed: {e}")
        row.update(miou=None, non_overlap=None, status=f"failed: {e}")
    return row


def summarize_runs(runs: pd.DataFrame, seeds: int) -> pd.DataFrame:
    """mean and sd of mIoU and non-overlap per sweep value"""
    ok = runs[runs["status"] == "ok"]
    order = list(dict.fromkeys(runs["value"]))
    summary = (
        ok.groupby("value", sort=False)
        .agg(
            miou_mean=("miou", "mean"),
            miou_sd=("miou", "std"),
            non_overlap_mean=("non_overlap", "mean"),
            non_overlap_sd=("non_overlap", "std"),
            runs=("miou", "count"),
        )
        .reindex(pd.Index(order, name="value"))
        .reset_index()
    )
    summary["runs"] = summary["runs"].fillna(0).astype(int)
    summary["complete"] = summary["runs"] == seeds
    return summary


def run_ablation(base: TrainConfig, sweep: SweepSpec, out_dir: Optional[PathLike] = None) -> pd.DataFrame:
    out_dir = Path(out_dir) if out_dir is not None else Path(settings.output_root) / f"ablate-{sweep.parameter}"
    out_dir.mkdir(parents=True, exist_ok=True)
    jobs = [
        (value, seed, cfg.to_text(), str(out_dir / sanitize_run_name(f"{sweep.parameter}={value}") / f"seed{seed}"))
        for value, seed, cfg in sweep_configs(base, sweep)
    ]
    logger.info(f"Ablating {sweep.parameter} over {sweep.values}: {len(jobs)} runs, {sweep.workers} workers")
    if sweep.workers > 1:
        with ProcessPoolExecutor(max_workers=sweep.workers) as pool:
            rows = list(pool.map(_ablation_worker, jobs))
    else:
        rows = [_ablation_worker(job) for job in jobs]

    runs = pd.DataFrame(rows)
    runs.insert(0, "parameter", sweep.parameter)
    runs.to_csv(out_dir / "runs.csv", index=False)
    summary = summarize_runs(runs, sweep.seeds)
    summary.insert(0, "parameter", sweep.parameter)
    summary.to_csv(out_dir / "ablation.csv", index=False)
    if not summary["complete"].all():
        logger.warning(f"Ablation table {out_dir / 'ablation.csv'} is incomplete")
    return summary


# --- cost and reports ---------------------------------------------------------------------


def run_cost(cfg: TrainConfig, out_dir: Optional[PathLike] = None, batch_size: int = 1) -> CostReport:
    """Parameter, MAC and pass counts of the three pipelines; passes are measured"""
    mimo = MimoSegNet(cfg.mimo(), seed=cfg.init_seed, precision=cfg.precision)
    single = SingleSegNet(cfg.mimo(), seed=cfg.init_seed, precision=cfg.precision)
    passes = measure_forward_passes(cfg)
    report = cost_report((mimo, single), (batch_size, cfg.in_channels, cfg.canvas_size, cfg.canvas_size), passes)
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        table = pd.DataFrame(
            [{**row.model_dump(), "macs_per_iteration": row.macs_per_iteration} for row in report.rows]
        )
        table.to_csv(out_dir / "cost.csv", index=False)
        payload = json.loads(report.model_dump_json())
        payload["ratios"] = cost_ratios(report)
        (out_dir / "cost.json").write_text(json.dumps(payload, indent=2))
    return report


def run_report(run_dirs: Sequence[PathLike], output: Optional[PathLike] = None) -> pd.DataFrame:
    """One row per run from its config.txt and the last row of its eval.csv"""
    rows = []
    for run_dir in run_dirs:
        run_dir = Path(run_dir)
        cfg = load_run_config(run_dir)
        final = final_eval_row(run_dir)
        rows.append(
            {
                "run": run_dir.name,
                "mode": cfg.mode.value,
                "labeled_ratio": cfg.labeled_ratio,
                "iter": int(final["iter"]),
                "miou": final["miou"],
                "pixel_acc": final["pixel_acc"],
                "non_overlap": final["non_overlap"],
            }
        )
    table = pd.DataFrame(rows)
    if output is not None:
        table.to_csv(output, index=False)
    return table
