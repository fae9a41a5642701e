"""Experiment orchestration: pretrain, adapt, and the four ablation grids.

Every cell of an ablation axis evaluates the same episode indices drawn with
the same sampler seed, so cells differ only in the adapter configuration.
Outputs are JSON plus CSV mirrors, ordered by episode index.
"""
from __future__ import annotations

import csv
import io
import json
import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

from .adapter import FadConfig, Variant
from .backbone import BackboneConfig, load_backbone, pretrain, save_backbone
from .config import ConfigError, RunConfig, write_resolved
from .episodes import SamplerConfig, make_shift_pair, sample_episode
from .spectral import BandThresholds
from .train import StopRule, finetune_episode, mean_ci, result_record

log = logging.getLogger(__name__)

AXES = ("components", "kernels", "thresholds", "blocks")
VARIANT_NAMES = ("none",) + tuple(v.value for v in Variant)


@dataclass(frozen=True)
class Cell:
    experiment: str
    label: str
    variant: Optional[Variant]
    fad: FadConfig
    mask: tuple


# --------------------------------------------------------------------------- #
# config plumbing


def backbone_config(cfg: RunConfig) -> BackboneConfig:
    b = cfg.backbone
    return BackboneConfig(b.num_blocks, tuple(b.channels), tuple(b.input_shape))


def fad_config(cfg: RunConfig) -> FadConfig:
    f = cfg.fad
    return FadConfig(BandThresholds(f.r1, f.r2), f.k_low, f.k_mid, f.k_high, f.use_bias)


def sampler_config(cfg: RunConfig) -> SamplerConfig:
    s = cfg.sampler
    return SamplerConfig(s.mode, s.way_min, s.way_max, s.max_support, s.query_per_class, s.seed)


def stop_rule(cfg: RunConfig) -> StopRule:
    s = cfg.stop
    return StopRule(s.support_acc_threshold, s.patience_after_threshold, s.max_steps)


def parse_variant(name: str) -> Optional[Variant]:
    if name not in VARIANT_NAMES:
        raise ConfigError(f"unknown variant {name!r}; expected one of {', '.join(VARIANT_NAMES)}")
    return None if name == "none" else Variant(name)


def insertion_mask(cfg: RunConfig) -> tuple:
    n = cfg.backbone.num_blocks
    if cfg.insertion_mask is None:
        return (True,) * n
    if len(cfg.insertion_mask) != n or not all(isinstance(m, bool) for m in cfg.insertion_mask):
        raise ConfigError(f"insertion_mask must be {n} booleans, got {cfg.insertion_mask!r}")
    return tuple(cfg.insertion_mask)


def validate(cfg: RunConfig) -> None:
    """Build every typed object once so bad values surface as ConfigError."""
    parse_variant(cfg.variant)
    insertion_mask(cfg)
    if cfg.episodes < 1:
        raise ConfigError("episodes must be >= 1")
    try:
        backbone_config(cfg)
        fad_config(cfg)
        sampler_config(cfg)
        stop_rule(cfg)
        cfg.source.to_spec()
        cfg.target.to_spec()
    except (ValueError, TypeError) as exc:
        raise ConfigError(str(exc)) from exc


def domains(cfg: RunConfig):
    d = cfg.data
    return make_shift_pair(
        cfg.source.to_spec(), cfg.target.to_spec(), d.seed,
        d.source_classes, d.source_per_class, d.target_classes, d.target_per_class,
    )


def checkpoint_path(cfg: RunConfig) -> Path:
    return Path(cfg.checkpoint) if cfg.checkpoint else Path(cfg.out_dir) / "backbone.bin"


def workers() -> int:
    try:
        return max(1, int(os.environ.get("FAD_THREADS", "1")))
    except ValueError:
        return 1


# --------------------------------------------------------------------------- #
# commands


def cmd_pretrain(cfg: RunConfig) -> dict:
    validate(cfg)
    source, _ = domains(cfg)
    p = cfg.pretrain
    history: dict = {}
    params = pretrain(backbone_config(cfg), source, p.epochs, p.lr, p.seed, p.batch_size, history)
    path = checkpoint_path(cfg)
    extra = {"pretrain": {"epochs": p.epochs, "lr": p.lr, "batch_size": p.batch_size}}
    if history:
        extra["train_accuracy"] = history["train_accuracy"]
    bin_path, side = save_backbone(path, params, extra)
    write_resolved(cfg, cfg.out_dir)
    log.info("wrote checkpoint %s", bin_path)
    return {"checkpoint": str(bin_path), "sidecar": str(side), **history}


def _load_checkpoint(cfg: RunConfig):
    path = checkpoint_path(cfg)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path} (run `fad pretrain` first)")
    return load_backbone(path)


def _episode_job(args):
    pool, backbone, sampler, cell, stop, opt, seed, index = args
    episode = sample_episode(pool, sampler, index)
    result = finetune_episode(
        episode, backbone, cell.variant, cell.fad, cell.mask, stop,
        seed=seed + index, lr=opt.lr, rho=opt.rho, eps=opt.eps,
    )
    rec = result_record(result, seed + index, cell.variant, cell.fad, index)
    rec.update(experiment=cell.experiment, label=cell.label, mask=list(cell.mask), way=episode.way)
    return rec


def run_cells(cfg: RunConfig, cells: list[Cell], pool=None, backbone=None) -> list[dict]:
    """Evaluate every cell on episodes ``0..cfg.episodes-1``; one row per cell."""
    if backbone is None:
        backbone = _load_checkpoint(cfg)
    if pool is None:
        _, pool = domains(cfg)
    sampler, stop = sampler_config(cfg), stop_rule(cfg)
    jobs = [
        (pool, backbone, sampler, cell, stop, cfg.optimizer, cfg.seed, i)
        for cell in cells for i in range(cfg.episodes)
    ]
    n = workers()
    if n > 1:
        with ProcessPoolExecutor(max_workers=n) as ex:
            records = list(ex.map(_episode_job, jobs))
    else:
        records = [_episode_job(j) for j in jobs]
    rows = []
    for c, cell in enumerate(cells):
        recs = records[c * cfg.episodes:(c + 1) * cfg.episodes]
        accs = [r["query_accuracy"] for r in recs]
        mean, half = mean_ci(accs)
        rows.append({
            "experiment": cell.experiment,
            "label": cell.label,
            "variant": "none" if cell.variant is None else cell.variant.value,
            "config": cell.fad.to_dict(),
            "mask": list(cell.mask),
            "n": len(accs),
            "mean": mean,
            "ci95": half,
            "accuracies": accs,
            "episodes": recs,
        })
        log.info("%s %s: %.4f +- %.4f", cell.experiment, cell.label, mean, half)
    return rows


def ablation_cells(axis: str, cfg: RunConfig) -> list[Cell]:
    base = fad_config(cfg)
    n = cfg.backbone.num_blocks
    everywhere = (True,) * n
    if axis == "components":
        return [
            Cell(axis, "#1 none", None, base, everywhere),
            Cell(axis, "#2 Linear1x1", Variant.LINEAR_1X1, base, everywhere),
            Cell(axis, "#3 BandwiseSpatial", Variant.BANDWISE_SPATIAL, base, everywhere),
            Cell(axis, "#4 FAD", Variant.FAD, base, everywhere),
        ]
    if axis == "kernels":
        # labels follow the {k_high, k_mid, k_low} ordering
        cells = []
        for k_high, k_mid, k_low in ((1, 1, 1), (3, 3, 3), (3, 3, 5), (5, 3, 3)):
            fad = FadConfig(base.thresholds, k_low, k_mid, k_high, base.use_bias)
            cells.append(Cell(axis, f"{{{k_high},{k_mid},{k_low}}}", Variant.FAD, fad, everywhere))
        return cells
    if axis == "thresholds":
        grid = [(r1, 0.5) for r1 in (0.1, 0.2, 0.3, 0.4)] + [(0.3, r2) for r2 in (0.4, 0.5, 0.6, 0.7)]
        return [
            Cell(axis, f"r1={r1},r2={r2}", Variant.FAD,
                 FadConfig(BandThresholds(r1, r2), base.k_low, base.k_mid, base.k_high, base.use_bias),
                 everywhere)
            for r1, r2 in grid
        ]
    if axis == "blocks":
        cells = [
            Cell(axis, f"block{i + 1}", Variant.FAD, base, tuple(j == i for j in range(n)))
            for i in range(n)
        ]
        return cells + [Cell(axis, "all", Variant.FAD, base, everywhere)]
    raise ConfigError(f"unknown ablation axis {axis!r}; expected one of {', '.join(AXES)}")


def cmd_adapt(cfg: RunConfig, pool=None, backbone=None) -> dict:
    validate(cfg)
    variant = parse_variant(cfg.variant)
    cell = Cell("adapt", cfg.variant, variant, fad_config(cfg), insertion_mask(cfg))
    rows = run_cells(cfg, [cell], pool, backbone)
    out = Path(cfg.out_dir)
    write_resolved(cfg, out)
    write_outputs(out, "adapt", rows)
    return {"rows": rows, "episodes": rows[0]["episodes"]}


def cmd_ablate(cfg: RunConfig, axis: str, pool=None, backbone=None) -> dict:
    validate(cfg)
    cells = ablation_cells(axis, cfg)
    rows = run_cells(cfg, cells, pool, backbone)
    out = Path(cfg.out_dir)
    write_resolved(cfg, out)
    write_outputs(out, f"ablate_{axis}", rows)
    return {"rows": rows}


# --------------------------------------------------------------------------- #
# output files

SUMMARY_FIELDS = ["experiment", "label", "variant", "r1", "r2", "k_low", "k_mid", "k_high",
                  "mask", "n", "mean", "ci95"]
EPISODE_FIELDS = ["experiment", "label", "episode", "seed", "way", "steps", "query_accuracy",
                  "support_acc_trace"]


def _fmt(v) -> str:
    if isinstance(v, bool):
        return str(v).lower()
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, (list, tuple)):
        return ";".join(_fmt(x) for x in v)
    return str(v)


def summary_csv(rows: list[dict]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(SUMMARY_FIELDS)
    for r in rows:
        c = r["config"]
        w.writerow([_fmt(x) for x in (r["experiment"], r["label"], r["variant"], c["r1"], c["r2"],
                                      c["k_low"], c["k_mid"], c["k_high"], r["mask"], r["n"],
                                      r["mean"], r["ci95"])])
    return buf.getvalue()


def episodes_csv(rows: list[dict]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(EPISODE_FIELDS)
    for r in rows:
        for e in r["episodes"]:
            w.writerow([_fmt(e[k]) for k in EPISODE_FIELDS])
    return buf.getvalue()


def write_outputs(out: Path, stem: str, rows: list[dict]) -> dict:
    out.mkdir(parents=True, exist_ok=True)
    paths = {
        "summary_csv": out / f"{stem}_summary.csv",
        "episodes_csv": out / f"{stem}_episodes.csv",
        "json": out / f"{stem}.json",
    }
    paths["summary_csv"].write_text(summary_csv(rows))
    paths["episodes_csv"].write_text(episodes_csv(rows))
    paths["json"].write_text(json.dumps({"rows": rows}, indent=2, sort_keys=True) + "\n")
    return paths
