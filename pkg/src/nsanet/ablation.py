"""Desk-scale ablation presets over features, losses and attention variants.

Every configuration in a preset trains on the same seeded synthetic dataset
and is scored on the same held-out scenes, at voxel and point level.
"""

import csv
import io
import json
import logging
import time
from dataclasses import dataclass, replace

from .model import Variant
from .train import DatasetConfig, TrainConfig, build_dataset, evaluate, infer, new_model, train
from .voxel import CHANNELS

log = logging.getLogger(__name__)

PRESETS = ("features", "loss", "attention", "directional")
ALL_CHANNELS = CHANNELS


@dataclass(frozen=True)
class RunSpec:
    name: str
    variant: Variant = Variant.AET
    loss: str = "WCE"
    channels: tuple = ("occ", "mz")
    vpp_rows: bool = False         # also report the VPP-refined scores


def preset_runs(preset):
    if preset == "features":
        return [
            RunSpec("unet-occ", Variant.NONE, channels=("occ",)),
            RunSpec("unet-occ-mz", Variant.NONE),
            RunSpec("unet-all", Variant.NONE, channels=("occ", "nr", "ins", "mz", "r")),
            RunSpec("nsanet-occ", Variant.AET, channels=("occ",)),
            RunSpec("nsanet-occ-mz", Variant.AET),
        ]
    if preset == "loss":
        return [
            RunSpec("unet-ce", Variant.NONE, loss="CE"),
            RunSpec("unet-fl", Variant.NONE, loss="FL"),
            RunSpec("unet-wce", Variant.NONE, loss="WCE"),
        ]
    if preset == "attention":
        return [
            RunSpec("aet", Variant.AET, vpp_rows=True),
            RunSpec("fit-v1", Variant.FIT_V1),
            RunSpec("fit-v2", Variant.FIT_V2),
            RunSpec("none", Variant.NONE, vpp_rows=True),
        ]
    if preset == "directional":
        # the three comparisons of the desk-scale acceptance check
        return [
            RunSpec("aet", Variant.AET, vpp_rows=True),
            RunSpec("none-wce", Variant.NONE, loss="WCE"),
            RunSpec("none-ce", Variant.NONE, loss="CE"),
        ]
    raise ValueError(f"unknown preset {preset!r}; choose from {PRESETS}")


@dataclass(frozen=True)
class AblationConfig:
    dataset: DatasetConfig = DatasetConfig(channels=ALL_CHANNELS)
    train: TrainConfig = TrainConfig()
    depth: int = 3
    base_channels: int = 8
    seed: int = 0
    vpp_tau: float = 0.5


_DATA = {}


def _dataset(acfg):
    key = (repr(acfg.dataset), acfg.depth, acfg.seed)
    if key not in _DATA:
        _DATA.clear()
        _DATA[key] = build_dataset(replace(acfg.dataset, seed=acfg.seed), acfg.depth)
    return _DATA[key]


def run_one(acfg, run):
    """Train one configuration and return its result rows (one per level / VPP)."""
    train_set, test_set = _dataset(acfg)
    model = new_model(acfg.depth, acfg.base_channels, run.variant, run.channels, seed=acfg.seed)
    tcfg = replace(acfg.train, loss=run.loss, seed=acfg.seed, channel_set=run.channels,
                   eval_every=0)
    t0 = time.perf_counter()
    result = train(model, train_set, tcfg)
    seconds = time.perf_counter() - t0
    scores = infer(model, test_set, channels=run.channels)
    rows = []
    for vpp in ((False, True) if run.vpp_rows else (False,)):
        for level in ("voxel", "point"):
            rep = evaluate(model, test_set, vpp=vpp, level=level, tau=acfg.vpp_tau, scores=scores)
            row = {"name": run.name + ("+vpp" if vpp else ""), "seed": acfg.seed,
                   "variant": run.variant.value, "loss": run.loss,
                   "channels": "+".join(run.channels), "vpp": vpp,
                   "final_loss": result.losses[-1]}
            row.update(rep.to_dict())
            rows.append(row)
    log.info("%s seed %d done in %.1fs", run.name, acfg.seed, seconds)
    return rows, result


def _run_job(job):
    acfg, run = job
    rows, result = run_one(acfg, run)
    return rows, result.losses


def run_ablation(preset, acfg=AblationConfig(), seeds=(0,), workers=1):
    """Train every configuration of ``preset`` for each seed.

    Returns ``(rows, curves)``: result rows and per-run loss curves keyed by
    ``(name, seed)``.  Jobs are independent, so the worker count only changes
    wall time.
    """
    from .parallel import pmap

    runs = preset_runs(preset)
    jobs = [(replace(acfg, seed=s), r) for s in seeds for r in runs]
    results = pmap(_run_job, jobs, workers)
    rows, curves = [], {}
    for (cfg, run), (r, losses) in zip(jobs, results):
        rows.extend(r)
        curves[(run.name, cfg.seed)] = losses
    return rows, curves


CSV_COLUMNS = ("name", "seed", "variant", "loss", "channels", "vpp", "level",
               "tp", "fp", "fn", "tn", "precision", "recall", "f1",
               "precision_undefined", "recall_undefined", "final_loss")


def rows_to_csv(rows):
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=CSV_COLUMNS, extrasaction="ignore",
                            lineterminator="\n")
    writer.writeheader()
    writer.writerows(rows)
    return buf.getvalue()


def rows_to_jsonl(rows):
    return "".join(json.dumps(r, sort_keys=True) + "\n" for r in rows)


def pick(rows, name, level="voxel", seed=None):
    """The single row matching ``name`` / ``level`` (and ``seed`` if given)."""
    hits = [r for r in rows if r["name"] == name and r["level"] == level
            and (seed is None or r["seed"] == seed)]
    if len(hits) != 1:
        raise KeyError(f"expected one row for {name}/{level}/{seed}, found {len(hits)}")
    return hits[0]
