"""Command-line entry point: ``nsanet <stage> [flags]``.

Settings resolve as built-in defaults, then ``--config`` file keys, then
explicit flags.  Exit codes: 0 success, 2 invalid input or usage, 3 runtime
failure.  Every stage writes a run manifest next to its outputs.
"""

import argparse
import glob
import logging
import os
import sys
from dataclasses import fields, replace

import numpy as np

from . import __version__
from .config import (ConfigError, RunManifest, apply_overrides, canonical_text, convert,
                     manifest_path, read_config)
from .metrics import EvalReport, confusion, format_table
from .points import FormatError, read_cloud, read_trajectory, write_cloud, write_trajectory

log = logging.getLogger("nsanet")

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME = 0, 2, 3


class UsageError(ValueError):
    pass


# ---------------------------------------------------------------- settings

def _load_config(args):
    if args.config is None:
        return {}, b""
    if not os.path.exists(args.config):
        raise FileNotFoundError(f"--config: no such file {args.config!r}")
    return read_config(args.config)


def _resolve(args, config, defaults):
    """Defaults overridden by config keys, then by flags that were given."""
    out = dict(defaults)
    for key, value in config.items():
        if key in out:
            out[key] = convert(value, defaults[key], key) if defaults[key] is not None else value
    for key in out:
        flag = getattr(args, key, None)
        if flag is not None:
            out[key] = flag
    return out


def _warn_unused(config, *known):
    names = set().union(*known)
    extra = sorted(set(config) - names)
    if extra:
        log.warning("config keys not used by this stage: %s", ", ".join(extra))


def _channels(text):
    from .voxel import CHANNELS

    chans = tuple(c.strip() for c in str(text).split(",") if c.strip())
    bad = [c for c in chans if c not in CHANNELS]
    if not chans or bad:
        raise UsageError(f"--channels: unknown {bad or 'empty'}; choose from {','.join(CHANNELS)}")
    return chans


def _require_file(path, flag):
    if not os.path.exists(path):
        raise FileNotFoundError(f"{flag}: no such file {path!r}")
    return path


def _ensure_parent(path):
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    return path


def _manifest(args, config_bytes, settings, seed):
    digest_src = config_bytes + canonical_text({k: settings[k] for k in sorted(settings)}).encode()
    return RunManifest.start(digest_src, seed, ["nsanet"] + list(args.argv))


# ---------------------------------------------------------------- simulate

def _simulate_one(job):
    from .sim import simulate_scene

    cfg, cloud_path, traj_path, fmt = job
    cloud, traj = simulate_scene(cfg)
    write_cloud(cloud, cloud_path, fmt)
    write_trajectory(traj, traj_path)
    return len(cloud), int(cloud.labels.sum())


def cmd_simulate(args):
    from .parallel import pmap
    from .sim import SceneConfig, scene_config_for
    from .train import DESK_SCENE

    config, raw = _load_config(args)
    base, unused = apply_overrides(DESK_SCENE, {k: v for k, v in config.items()
                                                if k in {f.name for f in fields(SceneConfig)}})
    flags = {"extent": args.extent, "noise_fraction": args.noise_fraction, "prf": args.prf,
             "altitude": args.altitude}
    base = replace(base, **{k: v for k, v in flags.items() if v is not None})
    st = _resolve(args, config, {"seed": 0, "scenes": 1, "format": "npc"})
    _warn_unused(config, {f.name for f in fields(SceneConfig)}, st)
    if st["scenes"] < 1:
        raise UsageError("--scenes must be >= 1")
    if st["format"] not in ("npc", "csv"):
        raise UsageError("--format must be npc or csv")
    os.makedirs(args.out, exist_ok=True)
    man = _manifest(args, raw, {**st, **{f.name: getattr(base, f.name) for f in fields(base)}},
                    st["seed"])
    jobs, outputs = [], []
    for i in range(st["scenes"]):
        cfg = scene_config_for(i, base, st["seed"])
        cloud_path = os.path.join(args.out, f"scene_{i:03d}.{st['format']}")
        traj_path = os.path.join(args.out, f"scene_{i:03d}_traj.csv")
        jobs.append((cfg, cloud_path, traj_path, st["format"]))
        outputs += [cloud_path, traj_path]
    results = pmap(_simulate_one, jobs, args.workers)
    print("scene,cloud,trajectory,points,noise_points")
    for i, ((_, cp, tp, _), (n, k)) in enumerate(zip(jobs, results)):
        print(f"{i},{cp},{tp},{n},{k}")
    man.finish(outputs).write(manifest_path(args.out))
    return EXIT_OK


# ---------------------------------------------------------------- priors

def cmd_priors(args):
    from .priors import SPEED_OF_LIGHT, PriorParams, annotate_cloud

    config, raw = _load_config(args)
    st = _resolve(args, config, {"prf": None, "c": SPEED_OF_LIGHT, "tol": 1e-2, "seed": 0})
    _warn_unused(config, st)
    if st["prf"] is None:
        raise UsageError("priors needs --prf (or 'prf' in --config)")
    prf = float(st["prf"])
    cloud = read_cloud(_require_file(args.cloud, "--cloud"))
    traj = read_trajectory(_require_file(args.traj, "--traj"))
    params = PriorParams(prf, float(st["c"]), float(st["tol"]))
    man = _manifest(args, raw, st, st["seed"])
    annotated, unmatched = annotate_cloud(cloud, traj, params, args.workers)
    write_cloud(annotated, _ensure_parent(args.out))
    print(f"unmatched = {unmatched}")
    print(f"points = {len(annotated)}")
    print(f"r_max = {params.r_max!r}")
    man.finish([args.out]).write(manifest_path(args.out))
    return EXIT_OK


# ---------------------------------------------------------------- voxelize

def _voxelize_tile(job):
    from .voxel import GridSpec, save_grid, voxelize

    cloud, origin, edge, vs, channels, mz_mode, prefix = job
    grid = voxelize(cloud, GridSpec(origin, edge, vs), channels, mz_mode)
    save_grid(grid, prefix)
    return int(grid.occupied.sum())


def _tile_specs(cloud, edge, vs, anchor):
    from .voxel import GridSpec, tile_origins

    out = []
    for origin in tile_origins(cloud, edge, vs, anchor):
        _, inside = GridSpec(origin, edge, vs).cell_index(cloud.xyz)
        if inside.any():
            out.append(origin)
    return out


def _parse_anchor(text):
    if text is None or text == "":
        return None
    parts = [float(p) for p in str(text).split(",")]
    if len(parts) != 3:
        raise UsageError("--anchor needs three comma-separated numbers x,y,z")
    return tuple(parts)


def cmd_voxelize(args):
    from .parallel import pmap

    config, raw = _load_config(args)
    st = _resolve(args, config, {"edge": 32, "voxel_size": 1.0, "channels": "occ,mz",
                                 "mz_mode": "grid", "anchor": "0,0,0", "seed": 0})
    _warn_unused(config, st)
    channels = _channels(st["channels"])
    cloud = read_cloud(_require_file(args.cloud, "--cloud"))
    anchor = _parse_anchor(st["anchor"])
    man = _manifest(args, raw, st, st["seed"])
    origins = _tile_specs(cloud, st["edge"], st["voxel_size"], anchor)
    _ensure_parent(args.out)
    prefixes = [f"{args.out}_t{i:03d}" for i in range(len(origins))]
    jobs = [(cloud, o, st["edge"], st["voxel_size"], channels, st["mz_mode"], p)
            for o, p in zip(origins, prefixes)]
    occupied = pmap(_voxelize_tile, jobs, args.workers)
    index = f"{args.out}.tiles"
    with open(index, "w") as fh:
        fh.write(f"channels = {','.join(channels)}\n")
        fh.write(f"tiles = {len(prefixes)}\n")
        for i, p in enumerate(prefixes):
            fh.write(f"tile_{i:03d} = {os.path.basename(p)}\n")
    print("tile,origin_x,origin_y,origin_z,occupied_voxels")
    for p, o, n in zip(prefixes, origins, occupied):
        print(f"{os.path.basename(p)},{o[0]!r},{o[1]!r},{o[2]!r},{n}")
    outputs = [index] + [f for p in prefixes for f in glob.glob(p + ".*")]
    man.finish(outputs).write(manifest_path(args.out))
    return EXIT_OK


# ---------------------------------------------------------------- train

TRAIN_DEFAULTS = {
    "epochs": 30, "batch_size": 8, "lr": 2e-3, "loss": "WCE", "class_weights": "",
    "focal_gamma": 2.0, "variant": "AET", "depth": 3, "base_channels": 8,
    "prior_gating": "affine", "skip_gating": "mul", "edge": 32, "voxel_size": 1.0,
    "channels": "occ,mz", "mz_mode": "grid", "anchor": "0,0,0", "eval_every": 1, "seed": 0,
}


def _cloud_samples(paths, depth, edge, vs, channels, mz_mode, anchor, workers=1):
    from .parallel import pmap

    jobs = [(p, depth, edge, vs, channels, mz_mode, anchor, i) for i, p in enumerate(paths)]
    out = []
    for samples in pmap(_samples_for, jobs, workers):
        out.extend(samples)
    return out


def _samples_for(job):
    from .priors import build_prior_pyramid
    from .train import Sample
    from .voxel import tile_cloud

    path, depth, edge, vs, channels, mz_mode, anchor, scene = job
    cloud = read_cloud(_require_file(path, "--cloud"))
    out = []
    for g in tile_cloud(cloud, edge, vs, channels, anchor, mz_mode):
        g.spec.check_depth(depth)
        out.append(Sample(g, build_prior_pyramid(g, depth).levels, cloud.labels.copy(), scene))
    return out


def _class_weights(text):
    if text in (None, ""):
        return None
    parts = [float(p) for p in str(text).split(",")]
    if len(parts) != 2:
        raise UsageError("--class-weights needs two numbers w0,w1")
    return tuple(parts)


def cmd_train(args):
    from .model import ModelConfig, NSANet, Variant
    from .plotting import plot_history
    from .train import TrainConfig, save_model_dir, train, write_history_csv

    config, raw = _load_config(args)
    st = _resolve(args, config, TRAIN_DEFAULTS)
    _warn_unused(config, st)
    channels = _channels(st["channels"])
    try:
        variant = Variant(str(st["variant"]).upper())
    except ValueError:
        raise UsageError(f"--variant must be one of {[v.value for v in Variant]}") from None
    mcfg = ModelConfig(depth=st["depth"], base_channels=st["base_channels"],
                       in_channels=len(channels), variant=variant,
                       prior_gating=st["prior_gating"], skip_gating=st["skip_gating"],
                       seed=st["seed"])
    tcfg = TrainConfig(epochs=st["epochs"], batch_size=st["batch_size"], lr=st["lr"],
                       loss=str(st["loss"]).upper(), class_weights=_class_weights(st["class_weights"]),
                       focal_gamma=st["focal_gamma"], seed=st["seed"],
                       eval_every=st["eval_every"] if args.eval_cloud else 0,
                       channel_set=channels)
    if tcfg.loss not in ("CE", "FL", "WCE"):
        raise UsageError("--loss must be CE, FL or WCE")
    anchor = _parse_anchor(st["anchor"])
    samples = _cloud_samples(args.cloud, mcfg.depth, st["edge"], st["voxel_size"], channels,
                             st["mz_mode"], anchor, args.workers)
    evals = _cloud_samples(args.eval_cloud or [], mcfg.depth, st["edge"], st["voxel_size"],
                           channels, st["mz_mode"], anchor, args.workers)
    if (mcfg.encoder_prior or mcfg.decoder_prior) and not any(
            np.any(s.grid.priors > 0) for s in samples):
        log.warning("all prior values are zero; run 'nsanet priors' on the clouds first")
    man = _manifest(args, raw, st, st["seed"])
    model = NSANet(mcfg)
    result = train(model, samples, tcfg, eval_samples=evals or None)
    meta = {"channel_set": channels, "edge": st["edge"], "voxel_size": st["voxel_size"],
            "mz_mode": st["mz_mode"], "anchor": st["anchor"], "loss": tcfg.loss,
            "class_weights": result.class_weights, "epochs": tcfg.epochs}
    os.makedirs(args.out, exist_ok=True)
    outputs = save_model_dir(args.out, model, meta)
    outputs.append(write_history_csv(result.history, os.path.join(args.out, "loss.csv")))
    outputs.append(plot_history(result.history, os.path.join(args.out, "loss.png")))
    print("epoch,loss,precision,recall,f1")
    with open(os.path.join(args.out, "loss.csv")) as fh:
        sys.stdout.write("".join(fh.readlines()[1:]))
    man.finish(outputs).write(manifest_path(args.out))
    return EXIT_OK


# ---------------------------------------------------------------- infer / postprocess / eval

RUN_FILE = "run.cfg"


def _model_samples(model, meta, cloud_path, workers):
    anchor = _parse_anchor(meta.get("anchor", "0,0,0"))
    return _cloud_samples([cloud_path], model.cfg.depth, int(meta["edge"]),
                          float(meta["voxel_size"]), meta["channel_set"],
                          meta.get("mz_mode", "grid"), anchor, workers)


def _write_run_file(out_dir, **items):
    path = os.path.join(out_dir, RUN_FILE)
    with open(path, "w") as fh:
        for k in sorted(items):
            fh.write(f"{k} = {items[k]}\n")
    return path


def _tile_prefixes(pred_dir):
    path = os.path.join(pred_dir, RUN_FILE)
    if not os.path.exists(path):
        raise FileNotFoundError(f"{pred_dir!r} is not an infer/postprocess output (no {RUN_FILE})")
    run, _ = read_config(path)
    n = int(run["tiles"])
    return run, [os.path.join(pred_dir, f"tile_{i:03d}") for i in range(n)]


def cmd_infer(args):
    from .train import infer, load_model_dir
    from .voxel import project_labels, save_grid, write_array

    config, raw = _load_config(args)
    st = _resolve(args, config, {"seed": 0, "batch_size": 4})
    _warn_unused(config, st)
    model, meta = load_model_dir(args.model)
    _require_file(args.cloud, "--cloud")
    man = _manifest(args, raw, {**st, **{k: str(v) for k, v in meta.items()}}, st["seed"])
    samples = _model_samples(model, meta, args.cloud, args.workers)
    scores = infer(model, samples, st["batch_size"], channels=meta["channel_set"])
    os.makedirs(args.out, exist_ok=True)
    cloud = read_cloud(args.cloud)
    point_pred = np.zeros(len(cloud), dtype=np.uint8)
    outputs = []
    print("tile,occupied_voxels,predicted_noise_voxels")
    for i, (s, sc) in enumerate(zip(samples, scores)):
        prefix = os.path.join(args.out, f"tile_{i:03d}")
        save_grid(s.grid, prefix)
        pred = (sc[1] >= sc[0]).astype(np.int8)
        write_array(f"{prefix}.scores.f32", sc)
        write_array(f"{prefix}.pred.f32", pred)
        inside = s.grid.point_cell >= 0
        point_pred[inside] = project_labels(s.grid, pred)[inside]
        outputs += glob.glob(prefix + ".*")
        n_noise = int(np.sum((pred == 1) & s.grid.occupied))
        print(f"tile_{i:03d},{int(s.grid.occupied.sum())},{n_noise}")
    pred_cloud = cloud.with_field("label", point_pred)
    pred_path = os.path.join(args.out, "pred.npc")
    write_cloud(pred_cloud, pred_path)
    outputs += [pred_path, _write_run_file(args.out, stage="infer", vpp="false",
                                           tiles=len(samples), cloud=args.cloud)]
    man.finish(outputs).write(manifest_path(args.out))
    return EXIT_OK


def cmd_postprocess(args):
    import shutil

    from .voxel import read_array, read_sidecar, vpp_refine, write_array

    config, raw = _load_config(args)
    st = _resolve(args, config, {"tau": 0.5, "mode": "promote", "seed": 0})
    _warn_unused(config, st)
    if not 0.0 <= st["tau"] <= 1.0:
        raise UsageError("--tau must lie in [0, 1]")
    run, prefixes = _tile_prefixes(args.pred)
    man = _manifest(args, raw, st, st["seed"])
    os.makedirs(args.out, exist_ok=True)
    outputs = []
    print("tile,noise_before,noise_after")
    for i, src in enumerate(prefixes):
        shape, _ = read_sidecar(src)
        scores = read_array(f"{src}.scores.f32", shape)
        occ = read_array(f"{src}.occupancy.f32", shape)[0]
        dst = os.path.join(args.out, f"tile_{i:03d}")
        for ext in (".grid", ".features.f32", ".occupancy.f32", ".labels.f32", ".priors.f32",
                    ".scores.f32"):
            if os.path.exists(src + ext) and os.path.abspath(src) != os.path.abspath(dst):
                shutil.copyfile(src + ext, dst + ext)
        before = read_array(f"{src}.pred.f32", shape)[0]
        pred = vpp_refine(np.moveaxis(scores, 0, -1), occ, st["tau"], st["mode"])
        write_array(f"{dst}.pred.f32", pred)
        outputs += glob.glob(dst + ".*")
        occupied = occ > 0
        print(f"tile_{i:03d},{int(np.sum((before == 1) & occupied))},"
              f"{int(np.sum((pred == 1) & occupied))}")
    outputs.append(_write_run_file(args.out, stage="postprocess", vpp="true",
                                   tiles=len(prefixes), cloud=run.get("cloud", ""),
                                   tau=st["tau"], mode=st["mode"]))
    man.finish(outputs).write(manifest_path(args.out))
    return EXIT_OK


def _eval_from_pred(pred_dir, cloud_path, levels):
    from .voxel import read_array, read_sidecar, voxelize

    run, prefixes = _tile_prefixes(pred_dir)
    cloud = read_cloud(_require_file(cloud_path, "--cloud"))
    vpp = run.get("vpp", "false") == "true"
    reports = {lv: EvalReport(0, 0, 0, 0, lv, vpp) for lv in levels}
    for prefix in prefixes:
        shape, spec = read_sidecar(prefix)
        pred = read_array(f"{prefix}.pred.f32", shape)[0].astype(np.int8)
        truth = voxelize(cloud, spec, ("occ",))
        for lv in levels:
            if lv == "voxel":
                rep = confusion(pred, truth.labels, lv, vpp)
            else:
                inside = truth.point_cell >= 0
                pts = pred.reshape(-1)[truth.point_cell[inside]]
                rep = confusion(pts, cloud.labels[inside].astype(np.int64), lv, vpp)
            reports[lv] = reports[lv] + rep
    return reports


def _eval_from_model(args, levels, tau, mode):
    from .train import evaluate, infer, load_model_dir

    model, meta = load_model_dir(args.model)
    samples = _model_samples(model, meta, _require_file(args.cloud, "--cloud"), args.workers)
    scores = infer(model, samples, channels=meta["channel_set"])
    return {lv: evaluate(model, samples, args.vpp, lv, tau, scores=scores, vpp_mode=mode)
            for lv in levels}


def cmd_eval(args):
    import json

    config, raw = _load_config(args)
    st = _resolve(args, config, {"level": "both", "tau": 0.5, "mode": "promote", "seed": 0})
    _warn_unused(config, st)
    if st["level"] not in ("voxel", "point", "both"):
        raise UsageError("--level must be voxel, point or both")
    levels = ("voxel", "point") if st["level"] == "both" else (st["level"],)
    if (args.pred is None) == (args.model is None):
        raise UsageError("eval needs exactly one of --pred DIR or --model DIR")
    if args.pred is not None and args.vpp:
        raise UsageError("--vpp applies to --model runs; use 'postprocess' on --pred outputs")
    man = _manifest(args, raw, st, st["seed"])
    if args.pred is not None:
        reports = _eval_from_pred(args.pred, args.cloud, levels)
    else:
        reports = _eval_from_model(args, levels, st["tau"], st["mode"])
    rows = []
    for lv in levels:
        d = reports[lv].to_dict()
        d["name"] = "eval"
        d["vpp"] = d["vpp_applied"]
        rows.append(d)
    print(format_table(rows, ("level", "vpp", "tp", "fp", "fn", "tn", "precision", "recall", "f1")))
    lines = "".join(json.dumps(reports[lv].to_dict(), sort_keys=True) + "\n" for lv in levels)
    print("# jsonl")
    sys.stdout.write(lines)
    outputs = []
    if args.out:
        with open(_ensure_parent(args.out), "w") as fh:
            fh.write(lines)
        outputs.append(args.out)
        man.finish(outputs).write(manifest_path(args.out))
    return EXIT_OK


# ---------------------------------------------------------------- export-ablation

ABLATION_DEFAULTS = {"preset": "attention", "seeds": "0", "scenes": 10, "test_scenes": 2,
                     "epochs": 30, "batch_size": 8, "lr": 2e-3, "depth": 3,
                     "base_channels": 8, "tau": 0.5, "extent": 64.0, "seed": 0}


def cmd_export_ablation(args):
    from .ablation import (AblationConfig, PRESETS, run_ablation, rows_to_csv, rows_to_jsonl)
    from .plotting import plot_loss_curves, plot_metric_bars
    from .train import DESK_SCENE, DatasetConfig, TrainConfig

    config, raw = _load_config(args)
    st = _resolve(args, config, ABLATION_DEFAULTS)
    _warn_unused(config, st)
    if st["preset"] not in PRESETS:
        raise UsageError(f"--preset must be one of {','.join(PRESETS)}")
    seeds = tuple(int(s) for s in str(st["seeds"]).split(",") if s.strip())
    if not seeds:
        raise UsageError("--seeds needs at least one seed")
    if not 0 < st["test_scenes"] < st["scenes"]:
        raise UsageError("need 0 < --test-scenes < --scenes")
    scale = st["extent"] / DESK_SCENE.extent
    scene = replace(DESK_SCENE, extent=st["extent"],
                    n_trees=max(1, round(DESK_SCENE.n_trees * scale ** 2)),
                    n_buildings=max(1, round(DESK_SCENE.n_buildings * scale ** 2)))
    from .ablation import ALL_CHANNELS

    acfg = AblationConfig(
        dataset=DatasetConfig(n_scenes=st["scenes"], n_test=st["test_scenes"],
                              channels=ALL_CHANNELS, scene=scene),
        train=TrainConfig(epochs=st["epochs"], batch_size=st["batch_size"], lr=st["lr"]),
        depth=st["depth"], base_channels=st["base_channels"], vpp_tau=st["tau"])
    man = _manifest(args, raw, st, st["seed"])
    rows, curves = run_ablation(st["preset"], acfg, seeds, args.workers)
    os.makedirs(args.out, exist_ok=True)
    stem = os.path.join(args.out, f"ablation_{st['preset']}")
    csv_text = rows_to_csv(rows)
    with open(stem + ".csv", "w") as fh:
        fh.write(csv_text)
    with open(stem + ".jsonl", "w") as fh:
        fh.write(rows_to_jsonl(rows))
    figs = [plot_metric_bars(rows, stem + "_metrics.png", "voxel", f"{st['preset']} ablation"),
            plot_metric_bars(rows, stem + "_metrics_point.png", "point",
                             f"{st['preset']} ablation"),
            plot_loss_curves({f"{n} s{s}": c for (n, s), c in curves.items()},
                             stem + "_loss.png")]
    table_rows = [dict(r, vpp=r["vpp"]) for r in rows]
    print(format_table(table_rows, ("name", "seed", "level", "recall", "precision", "f1")))
    print("# csv begin")
    sys.stdout.write(csv_text)
    print("# csv end")
    for f in figs:
        print(f"# figure {f}")
    man.finish([stem + ".csv", stem + ".jsonl", *figs]).write(manifest_path(args.out))
    return EXIT_OK


# ---------------------------------------------------------------- parser

def _common(p):
    p.add_argument("--config", metavar="PATH", help="key = value settings file")
    p.add_argument("--seed", type=int, help="master seed (default 0)")
    p.add_argument("--workers", type=int, default=1, metavar="N",
                   help="parallel processes; results do not depend on N (default 1)")
    p.add_argument("-v", "--verbose", action="store_true")
    p.add_argument("--version", action="version", version=f"nsanet {__version__}")


def build_parser():
    parser = argparse.ArgumentParser(prog="nsanet", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"nsanet {__version__}")
    sub = parser.add_subparsers(dest="command", metavar="STAGE")
    sub.required = True

    p = sub.add_parser("simulate", help="synthetic labelled scenes and trajectories")
    _common(p)
    p.add_argument("--out", required=True, metavar="DIR")
    p.add_argument("--scenes", type=int)
    p.add_argument("--format", choices=("npc", "csv"))
    p.add_argument("--extent", type=float)
    p.add_argument("--noise-fraction", dest="noise_fraction", type=float)
    p.add_argument("--prf", type=float)
    p.add_argument("--altitude", type=float)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("priors", help="annotate a cloud with range-ambiguity priors")
    _common(p)
    p.add_argument("--cloud", required=True)
    p.add_argument("--traj", required=True)
    p.add_argument("--prf", type=float, help="pulse repetition frequency, Hz")
    p.add_argument("--c", type=float, help="pulse speed, m/s")
    p.add_argument("--tol", type=float, help="time match tolerance, s")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_priors)

    p = sub.add_parser("voxelize", help="tile a cloud into feature grids")
    _common(p)
    p.add_argument("--cloud", required=True)
    p.add_argument("--out", required=True, metavar="PREFIX")
    p.add_argument("--edge", type=int)
    p.add_argument("--voxel-size", dest="voxel_size", type=float)
    p.add_argument("--channels", help="comma list of occ,mz,nr,ins,r")
    p.add_argument("--mz-mode", dest="mz_mode", choices=("grid", "absolute"))
    p.add_argument("--anchor", help="tile anchor x,y,z (default 0,0,0)")
    p.set_defaults(func=cmd_voxelize)

    p = sub.add_parser("train", help="train a model on annotated clouds")
    _common(p)
    p.add_argument("--cloud", action="append", required=True, help="training cloud (repeatable)")
    p.add_argument("--eval-cloud", dest="eval_cloud", action="append")
    p.add_argument("--out", required=True, metavar="DIR")
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--loss", choices=("CE", "FL", "WCE", "ce", "fl", "wce"))
    p.add_argument("--class-weights", dest="class_weights", help="w0,w1 (default: derived)")
    p.add_argument("--focal-gamma", dest="focal_gamma", type=float)
    p.add_argument("--variant", help="AET, FIT_V1, FIT_V2 or NONE")
    p.add_argument("--depth", type=int)
    p.add_argument("--base-channels", dest="base_channels", type=int)
    p.add_argument("--prior-gating", dest="prior_gating", choices=("affine", "raw"))
    p.add_argument("--skip-gating", dest="skip_gating", choices=("mul", "sum"))
    p.add_argument("--edge", type=int)
    p.add_argument("--voxel-size", dest="voxel_size", type=float)
    p.add_argument("--channels")
    p.add_argument("--mz-mode", dest="mz_mode", choices=("grid", "absolute"))
    p.add_argument("--anchor")
    p.add_argument("--eval-every", dest="eval_every", type=int)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("infer", help="score a cloud with a trained model")
    _common(p)
    p.add_argument("--model", required=True, metavar="DIR")
    p.add_argument("--cloud", required=True)
    p.add_argument("--out", required=True, metavar="DIR")
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("postprocess", help="voxel post-processing of infer output")
    _common(p)
    p.add_argument("--pred", required=True, metavar="DIR", help="infer output directory")
    p.add_argument("--out", required=True, metavar="DIR")
    p.add_argument("--tau", type=float)
    p.add_argument("--mode", choices=("promote", "smooth"))
    p.set_defaults(func=cmd_postprocess)

    p = sub.add_parser("eval", help="noise-class precision, recall and F1")
    _common(p)
    p.add_argument("--cloud", required=True, help="labelled reference cloud")
    p.add_argument("--pred", metavar="DIR", help="infer or postprocess output")
    p.add_argument("--model", metavar="DIR", help="score the cloud with this model instead")
    p.add_argument("--vpp", action="store_true", help="apply VPP (with --model)")
    p.add_argument("--tau", type=float)
    p.add_argument("--mode", choices=("promote", "smooth"))
    p.add_argument("--level", choices=("voxel", "point", "both"))
    p.add_argument("--out", help="write JSONL records here")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("export-ablation", help="train an ablation preset and write the report")
    _common(p)
    p.add_argument("--preset", choices=("features", "loss", "attention", "directional"))
    p.add_argument("--out", required=True, metavar="DIR")
    p.add_argument("--seeds", help="comma list of seeds")
    p.add_argument("--scenes", type=int)
    p.add_argument("--test-scenes", dest="test_scenes", type=int)
    p.add_argument("--extent", type=float)
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--depth", type=int)
    p.add_argument("--base-channels", dest="base_channels", type=int)
    p.add_argument("--tau", type=float)
    p.set_defaults(func=cmd_export_ablation)
    return parser


def main(argv=None):
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    args = parser.parse_args(argv)
    args.argv = argv
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    if args.workers < 1:
        parser.error("--workers must be >= 1")
    try:
        return args.func(args)
    except (UsageError, ConfigError, FormatError, FileNotFoundError, KeyError,
            ValueError) as exc:
        msg = exc.args[0] if isinstance(exc, KeyError) and exc.args else exc
        print(f"nsanet {args.command}: error: {msg}", file=sys.stderr)
        return EXIT_INVALID
    except Exception as exc:  # noqa: BLE001 - report and map to the runtime exit code
        log.debug("runtime failure", exc_info=True)
        print(f"nsanet {args.command}: runtime error: {type(exc).__name__}: {exc}",
              file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
