"""Dataset assembly, training loop, inference and evaluation."""

import logging
import math
import os
from dataclasses import dataclass, field, replace

import numpy as np

from .metrics import EvalReport, confusion
from .model import ModelConfig, NSANet, Variant, predict
from .nn import Adam, make_loss
from .nn.losses import VOID
from .points import PointCloud
from .priors import PriorParams, annotate_cloud, build_prior_pyramid
from .sim import SceneConfig, scene_config_for, simulate_scene
from .voxel import DEFAULT_CHANNELS, GridSpec, project_labels, tile_cloud, voxelize, vpp_refine

log = logging.getLogger(__name__)


@dataclass
class Sample:
    """One voxel grid with everything training and evaluation need."""

    grid: object                 # FeatureGrid
    pyramid: list                # prior maps, level l at edge / 2**l
    point_labels: np.ndarray     # ground truth of the grid's source points
    scene: int = 0


def model_input(grid, channels=None):
    """Network input for one grid.

    ``channels`` selects and orders grid channels by name (default: all).
    Occupancy is log-compressed; other channels pass through.
    """
    names = list(grid.channel_names)
    channels = names if channels is None else list(channels)
    missing = [c for c in channels if c not in names]
    if missing:
        raise ValueError(f"grid lacks channels {missing}; it has {names}")
    x = grid.channels[[names.index(c) for c in channels]].astype(np.float32)
    for i, name in enumerate(channels):
        if name == "occ":
            x[i] = np.log1p(x[i])
    return x


def make_samples(cloud, depth, edge=32, voxel_size=1.0, channels=DEFAULT_CHANNELS,
                 spec=None, anchor=None, scene=0):
    """Voxelize an annotated cloud into samples (one per non-empty tile)."""
    if spec is not None:
        grids = [voxelize(cloud, spec, channels)]
    else:
        grids = tile_cloud(cloud, edge, voxel_size, channels, anchor)
    out = []
    for g in grids:
        g.spec.check_depth(depth)
        pyr = build_prior_pyramid(g, depth)
        out.append(Sample(g, pyr.levels, cloud.labels.copy(), scene))
    return out


# 64 m scenes tile into four 32^3 grids; object counts keep the default density
DESK_SCENE = SceneConfig(extent=64.0, n_trees=24, n_buildings=8)


@dataclass
class DatasetConfig:
    n_scenes: int = 10
    n_test: int = 2
    seed: int = 0
    edge: int = 32
    voxel_size: float = 1.0
    channels: tuple = DEFAULT_CHANNELS
    scene: SceneConfig = field(default_factory=lambda: DESK_SCENE)


def build_dataset(dcfg, depth):
    """Simulate, annotate and voxelize ``n_scenes`` scenes.

    Returns ``(train_samples, test_samples)``; the last ``n_test`` scenes are
    held out.  Scenes are tiled into grids anchored at the scene origin.
    """
    train, test = [], []
    for i in range(dcfg.n_scenes):
        cfg = scene_config_for(i, dcfg.scene, dcfg.seed)
        cloud, traj = simulate_scene(cfg)
        cloud, _ = annotate_cloud(cloud, traj, PriorParams(cfg.prf, cfg.c))
        samples = make_samples(cloud, depth, dcfg.edge, dcfg.voxel_size, dcfg.channels,
                               anchor=(0.0, 0.0, 0.0), scene=i)
        (test if i >= dcfg.n_scenes - dcfg.n_test else train).extend(samples)
    return train, test


def derive_class_weights(samples):
    """Inverse-frequency weights over labelled voxels, normalised so ``w0 == 1``."""
    n0 = n1 = 0
    for s in samples:
        lab = s.grid.labels
        n0 += int(np.sum(lab == 0))
        n1 += int(np.sum(lab == 1))
    if n0 == 0 or n1 == 0:
        raise ValueError(f"need both classes to derive weights, got {n0} non-noise / {n1} noise")
    return 1.0, n0 / n1


def _batch(samples, depth, channels=None):
    x = np.stack([model_input(s.grid, channels) for s in samples])
    y = np.stack([s.grid.labels.astype(np.int64) for s in samples])
    priors = [np.stack([s.pyramid[l][None] for s in samples]) for l in range(depth)]
    return x, y, priors


@dataclass
class TrainConfig:
    epochs: int = 30
    batch_size: int = 8
    lr: float = 2e-3
    loss: str = "WCE"
    class_weights: tuple = None      # None: derive from the training data
    focal_gamma: float = 2.0
    seed: int = 0
    eval_every: int = 1
    channel_set: tuple = DEFAULT_CHANNELS

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.class_weights is not None and min(self.class_weights) <= 0:
            raise ValueError("class weights must be positive")


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainResult:
    losses: list
    history: list                     # per-eval dicts: epoch, loss, precision, recall, f1
    class_weights: tuple


def train(model, samples, cfg, eval_samples=None):
    """Fit ``model`` in place.

    Batches are drawn from a permutation fixed by ``cfg.seed`` so identical
    inputs give bitwise identical weights.
    """
    if not samples:
        raise ValueError("no training samples")
    edges = {s.grid.spec.edge_voxels for s in samples}
    if len(edges) != 1:
        raise ValueError(f"inconsistent grid edges {sorted(edges)}")
    if len(cfg.channel_set) != model.cfg.in_channels:
        raise ValueError(f"channel_set {cfg.channel_set} does not match model in_channels "
                         f"{model.cfg.in_channels}")
    depth = model.cfg.depth
    weights = cfg.class_weights
    if cfg.loss.upper() == "WCE" and weights is None:
        weights = derive_class_weights(samples)
    weights = tuple(weights) if weights is not None else (1.0, 1.0)
    loss_fn = make_loss(cfg.loss, weights, cfg.focal_gamma)
    opt = Adam(cfg.lr)
    rng = np.random.default_rng(cfg.seed)
    losses, history = [], []
    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(len(samples))
        total = 0.0
        n_batches = 0
        for b, start in enumerate(range(0, len(order), cfg.batch_size)):
            batch = [samples[i] for i in order[start:start + cfg.batch_size]]
            x, y, priors = _batch(batch, depth, cfg.channel_set)
            if np.all(y == VOID):
                continue
            probs = model.forward(x, priors, mode="train")
            loss, dprobs = loss_fn(probs, y)
            model.backward(dprobs)
            if not math.isfinite(loss):
                gmax = max(float(np.max(np.abs(g))) for g in model.grads.values())
                raise TrainingDiverged(
                    f"non-finite loss at epoch {epoch}, batch {b}; max |grad| = {gmax:.3g}")
            opt.step(model.params, model.grads)
            total += loss
            n_batches += 1
        epoch_loss = total / max(n_batches, 1)
        losses.append(epoch_loss)
        rec = {"epoch": epoch, "loss": epoch_loss}
        if eval_samples and cfg.eval_every and epoch % cfg.eval_every == 0:
            rep = evaluate(model, eval_samples, channels=cfg.channel_set)
            rec.update(precision=rep.precision, recall=rep.recall, f1=rep.f1)
        history.append(rec)
        log.info("epoch %d loss %.5f", epoch, epoch_loss)
    return TrainResult(losses, history, weights)


def infer(model, samples, batch_size=4, channels=None):
    """Class scores (2, D, H, W) per sample, batch-norm in eval mode.

    Items do not interact in eval mode, so batching does not change results.
    """
    out = []
    depth = model.cfg.depth
    for start in range(0, len(samples), batch_size):
        batch = samples[start:start + batch_size]
        x, _, priors = _batch(batch, depth, channels)
        probs = model.forward(x, priors, mode="eval")
        model._tape = None
        out.extend(probs[i] for i in range(len(batch)))
    return out


def voxel_predictions(scores, grid, vpp=False, tau=0.5, vpp_mode="promote"):
    if vpp:
        return vpp_refine(np.moveaxis(scores, 0, -1), grid.occupancy, tau, vpp_mode)
    return predict(scores[None])[0]


def evaluate(model, samples, vpp=False, level="voxel", tau=0.5, scores=None,
             channels=None, vpp_mode="promote"):
    """Noise-class confusion over all labelled voxels (or in-grid points)."""
    if level not in ("voxel", "point"):
        raise ValueError(f"level must be voxel or point, got {level!r}")
    if scores is None:
        scores = infer(model, samples, channels=channels)
    report = EvalReport(0, 0, 0, 0, level, vpp)
    for s, sc in zip(samples, scores):
        pred = voxel_predictions(sc, s.grid, vpp, tau, vpp_mode)
        if level == "voxel":
            report = report + confusion(pred, s.grid.labels, level, vpp)
        else:
            inside = s.grid.point_cell >= 0
            pts = project_labels(s.grid, pred)
            report = report + confusion(pts[inside], s.point_labels[inside].astype(np.int64),
                                        level, vpp)
    return report


def new_model(depth=3, base_channels=8, variant=Variant.AET, channels=DEFAULT_CHANNELS,
              seed=0, **kw):
    cfg = ModelConfig(depth=depth, base_channels=base_channels, in_channels=len(channels),
                      variant=variant, seed=seed, **kw)
    return NSANet(cfg)


MODEL_FILE = "model.nsw"
MODEL_CFG = "model.cfg"
TRAIN_CFG = "train.cfg"


def save_model_dir(out_dir, model, meta):
    """Checkpoint, model config and the preprocessing settings needed to reuse it."""
    from .nn import save_tensors

    os.makedirs(out_dir, exist_ok=True)
    save_tensors(os.path.join(out_dir, MODEL_FILE), model.state_tensors())
    with open(os.path.join(out_dir, MODEL_CFG), "w") as fh:
        fh.write(model.cfg.to_text())
    with open(os.path.join(out_dir, TRAIN_CFG), "w") as fh:
        for key in sorted(meta):
            value = meta[key]
            if isinstance(value, (tuple, list)):
                value = ",".join(str(v) for v in value)
            fh.write(f"{key} = {value}\n")
    return [os.path.join(out_dir, f) for f in (MODEL_FILE, MODEL_CFG, TRAIN_CFG)]


def load_model_dir(model_dir):
    """Returns ``(model, meta)``; ``meta`` values are strings except ``channel_set``."""
    from .config import read_config
    from .nn import load_tensors

    for name in (MODEL_FILE, MODEL_CFG, TRAIN_CFG):
        path = os.path.join(model_dir, name)
        if not os.path.exists(path):
            raise FileNotFoundError(f"model directory {model_dir!r} lacks {name}")
    with open(os.path.join(model_dir, MODEL_CFG)) as fh:
        cfg = ModelConfig.from_text(fh.read())
    model = NSANet(cfg)
    model.load_state_tensors(load_tensors(os.path.join(model_dir, MODEL_FILE)))
    meta, _ = read_config(os.path.join(model_dir, TRAIN_CFG))
    meta["channel_set"] = tuple(c.strip() for c in meta.get("channel_set", "occ,mz").split(","))
    return model, meta


def write_history_csv(history, path):
    """Loss curve as ``epoch,loss,precision,recall,f1`` (metrics blank when not evaluated)."""
    with open(path, "w") as fh:
        fh.write("epoch,loss,precision,recall,f1\n")
        for h in history:
            vals = [h.get(k) for k in ("precision", "recall", "f1")]
            cells = ["" if v is None else repr(float(v)) for v in vals]
            fh.write(f"{h['epoch']},{h['loss']!r},{','.join(cells)}\n")
    return path
