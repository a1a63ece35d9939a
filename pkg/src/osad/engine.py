"""Training, evaluation, prediction, ablation sweeps and checkpoints."""

from __future__ import annotations

import csv
import json
import logging
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import safetensors.torch
import torch
import torch.nn.functional as F
from PIL import Image

from osad.backbone import normalize_images
from osad.config import RunConfig
from osad.data import (
    DatasetIndex,
    Episode,
    FoldConfig,
    SupportAnnotation,
    load_dataset,
    load_folds,
    sample_episode,
)
from osad.decoder import deep_supervision_loss
from osad.errors import ConfigError, DataError, DivergenceError, InsufficientQueriesError, UnwritablePathError
from osad.metrics import MetricReport, image_scores, threshold_curves
from osad.model import OSADNet

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = 1


# ---------------------------------------------------------------------------
# preprocessing
# ---------------------------------------------------------------------------


def _to_tensor(image: np.ndarray) -> torch.Tensor:
    return torch.from_numpy(np.array(image, copy=True)).permute(2, 0, 1).float() / 255.0


def _resize(t: torch.Tensor, size, mode: str = "bilinear") -> torch.Tensor:
    if tuple(t.shape[-2:]) == tuple(size):
        return t
    kw = {"align_corners": False} if mode == "bilinear" else {}
    return F.interpolate(t.unsqueeze(0), size=tuple(size), mode=mode, **kw).squeeze(0)


@dataclass(frozen=True)
class View:
    """Resize to ``scaled``, crop ``size`` at ``offset``, optionally mirror."""

    scaled: tuple[int, int]  # (h, w)
    offset: tuple[int, int]  # (top, left)
    size: int
    flip: bool = False

    def image(self, t: torch.Tensor, mode: str = "bilinear") -> torch.Tensor:
        t = _resize(t, self.scaled, mode)
        top, left = self.offset
        t = t[..., top:top + self.size, left:left + self.size]
        return t.flip(-1) if self.flip else t

    def annotation(self, ann: SupportAnnotation, width: int, height: int) -> SupportAnnotation:
        sx, sy = self.scaled[1] / width, self.scaled[0] / height
        out = ann.affine(sx, sy, -self.offset[1], -self.offset[0])
        return out.hflip(self.size) if self.flip else out


def plain_view(size: int) -> View:
    return View((size, size), (0, 0), size)


def random_view(size: int, rng: np.random.Generator, crop: bool, crop_scale: float, flip: bool) -> View:
    big = int(round(size * crop_scale)) if crop else size
    top = int(rng.integers(big - size + 1))
    left = int(rng.integers(big - size + 1))
    return View((big, big), (top, left), size, bool(flip and rng.random() < 0.5))


def _box_survives(box, size: int) -> bool:
    x0, y0, x1, y1 = box
    return min(x1, size) > max(x0, 0) and min(y1, size) > max(y0, 0)


def _clip_annotation(ann: SupportAnnotation, size: int) -> SupportAnnotation:
    def clip(box):
        x0, y0, x1, y1 = (min(max(v, 0.0), float(size)) for v in box)
        return (x0, y0, max(x1, x0), max(y1, y0))

    return SupportAnnotation(clip(ann.human_box), clip(ann.object_box), ann.pose, ann.schema)


@dataclass
class EpisodeTensors:
    support: torch.Tensor  # (3, S, S), normalized
    human_box: torch.Tensor  # (4,) in [0, 1]
    object_box: torch.Tensor
    pose: torch.Tensor  # (K, 3), coordinates in [0, 1]
    queries: torch.Tensor  # (N, 3, S, S), normalized
    masks: torch.Tensor  # (N, S, S)


def prepare_support(image: np.ndarray, ann: SupportAnnotation, size: int, view: View | None = None):
    h, w = image.shape[:2]
    view = view or View((size, size), (0, 0), size)
    img = view.image(_to_tensor(image))
    a = _clip_annotation(view.annotation(ann, w, h), size)
    human, obj, pose = a.normalized(size, size)
    return (normalize_images(img.unsqueeze(0)).squeeze(0),
            torch.tensor(human, dtype=torch.float32),
            torch.tensor(obj, dtype=torch.float32),
            torch.tensor(pose, dtype=torch.float32))


def prepare_episode(ep: Episode, size: int, rng: np.random.Generator | None = None,
                    config: RunConfig | None = None) -> EpisodeTensors:
    """Resize (and, given ``rng``, randomly crop and flip) every image of an episode.

    Boxes and keypoints follow their image; crops that push the object box
    out of view are redrawn.
    """
    augment = rng is not None and config is not None

    def draw(valid=None):
        if not augment:
            return plain_view(size)
        for _ in range(10):
            v = random_view(size, rng, config.augment_crop, config.augment_crop_scale, config.augment_flip)
            if valid is None or valid(v):
                return v
        return plain_view(size)

    h, w = ep.support_image.shape[:2]
    sview = draw(lambda v: _box_survives(v.annotation(ep.annotation, w, h).object_box, size))
    support, human, obj, pose = prepare_support(ep.support_image, ep.annotation, size, sview)

    queries, masks = [], []
    for img, mask in zip(ep.query_images, ep.query_masks):
        m = torch.from_numpy(mask.astype(np.float32)).unsqueeze(0)
        qview = draw(lambda v: not mask.any() or bool(v.image(m, "nearest").any()))
        queries.append(normalize_images(qview.image(_to_tensor(img)).unsqueeze(0)).squeeze(0))
        masks.append(qview.image(m, "nearest").squeeze(0))
    return EpisodeTensors(support, human, obj, pose, torch.stack(queries), torch.stack(masks))


def collate(items: Sequence[EpisodeTensors]) -> dict[str, torch.Tensor]:
    return {name: torch.stack([getattr(it, name) for it in items])
            for name in ("support", "human_box", "object_box", "pose", "queries", "masks")}


def run_model(model: OSADNet, batch: dict, generator=None):
    return model(batch["support"], batch["human_box"], batch["object_box"], batch["pose"],
                 batch["queries"], generator)


def batch_loss(sides, masks: torch.Tensor) -> torch.Tensor:
    """Mean over episodes of the per-episode summed deep-supervision loss."""
    totals = [deep_supervision_loss([d[b] for d in sides], masks[b]).total for b in range(masks.shape[0])]
    return torch.stack(totals).mean()


def _generator(rng: np.random.Generator) -> torch.Generator:
    return torch.Generator().manual_seed(int(rng.integers(2**31 - 1)))


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------


@dataclass
class Checkpoint:
    model_state: dict
    config: dict
    adjacency: np.ndarray
    epoch: int = 0
    step: int = 0
    optimizer_state: dict | None = None
    registry: dict = field(default_factory=dict)
    format_version: int = CHECKPOINT_FORMAT

    @property
    def run_config(self) -> RunConfig:
        return RunConfig.from_dict(self.config)

    def build_model(self) -> OSADNet:
        model = OSADNet(self.run_config.model_config(), self.adjacency)
        model.load_state_dict(self.model_state)
        model.eval()
        return model

    def to_bytes(self) -> bytes:
        """safetensors payload; tensors sorted by name, the rest as sorted JSON."""
        tensors = {f"model/{k}": v.contiguous() for k, v in self.model_state.items()}
        tensors["adjacency"] = torch.as_tensor(np.asarray(self.adjacency)).contiguous()
        optim = None
        if self.optimizer_state is not None:
            scalars = {}
            for pid, entry in self.optimizer_state["state"].items():
                for key, value in entry.items():
                    if torch.is_tensor(value):
                        tensors[f"optim/{pid}/{key}"] = value.contiguous()
                    else:
                        scalars.setdefault(str(pid), {})[key] = value
            optim = {"param_groups": self.optimizer_state["param_groups"], "scalars": scalars}
        meta = {
            "format_version": self.format_version,
            "variant": self.config.get("backbone.variant"),
            "epoch": self.epoch,
            "step": self.step,
            "config": self.config,
            "registry": self.registry,
            "optimizer": optim,
        }
        return safetensors.torch.save(tensors, {"osad": json.dumps(meta, sort_keys=True)})

    @classmethod
    def from_bytes(cls, data: bytes) -> "Checkpoint":
        try:
            (header_len,) = struct.unpack("<Q", data[:8])
            meta = json.loads(json.loads(data[8:8 + header_len])["__metadata__"]["osad"])
            tensors = safetensors.torch.load(data)
        except Exception as exc:  # any parse failure means this is not one of ours
            raise ConfigError(f"not a checkpoint file ({exc})") from None
        if meta.get("format_version") != CHECKPOINT_FORMAT:
            raise ConfigError(f"unsupported checkpoint format {meta.get('format_version')!r}")
        model_state = {k[len("model/"):]: v for k, v in tensors.items() if k.startswith("model/")}
        optimizer_state = None
        if meta["optimizer"] is not None:
            state: dict = {}
            for name, value in tensors.items():
                if name.startswith("optim/"):
                    _, pid, key = name.split("/", 2)
                    state.setdefault(int(pid), {})[key] = value
            for pid, entry in meta["optimizer"]["scalars"].items():
                state.setdefault(int(pid), {}).update(entry)
            optimizer_state = {"state": dict(sorted(state.items())),
                               "param_groups": meta["optimizer"]["param_groups"]}
        return cls(model_state=model_state, config=meta["config"], adjacency=tensors["adjacency"].numpy(),
                   epoch=meta["epoch"], step=meta["step"], optimizer_state=optimizer_state,
                   registry=meta["registry"], format_version=meta["format_version"])


def save_checkpoint(ckpt: Checkpoint, path) -> Path:
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(ckpt.to_bytes())
    except OSError as exc:
        raise UnwritablePathError(f"cannot write checkpoint ({exc.strerror})", path) from None
    return path


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"checkpoint not found: {path}")
    return Checkpoint.from_bytes(path.read_bytes())


def _snapshot(model, optimizer, config: RunConfig, adjacency, epoch, step, registry) -> Checkpoint:
    clone = lambda sd: {k: v.detach().clone() if torch.is_tensor(v) else v for k, v in sd.items()}  # noqa: E731
    opt_state = None
    if optimizer is not None:
        sd = optimizer.state_dict()
        opt_state = {"state": {k: clone(v) for k, v in sd["state"].items()}, "param_groups": sd["param_groups"]}
    return Checkpoint(model_state=clone(model.state_dict()), config=config.to_dict(),
                      adjacency=np.asarray(adjacency), epoch=epoch, step=step,
                      optimizer_state=opt_state, registry=dict(registry))


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------


def lr_at_epoch(epoch: int, base: float, decay_epoch: int, factor: float = 0.5) -> float:
    """Epochs count from 1; the rate drops once, after ``decay_epoch``."""
    return base * factor if epoch > decay_epoch else base


def resolve_fold(config: RunConfig, index: DatasetIndex) -> FoldConfig:
    folds = {f.fold_id: f for f in load_folds(config.folds_dir, index.registry)}
    if config.fold not in folds:
        raise ConfigError(f"fold {config.fold} not found in {config.folds_dir}")
    return folds[config.fold]


def dataset_adjacency(index: DatasetIndex) -> np.ndarray:
    from osad.data import load_support_annotation

    names = {load_support_annotation(r.support_path).schema for r in index.records if r.is_support}
    if len(names) != 1:
        raise DataError(f"support annotations must share one keypoint schema, found {sorted(names)}", index.root)
    return index.schema(names.pop()).adjacency()


@dataclass
class TrainResult:
    model: OSADNet
    checkpoint: Checkpoint
    log: list[dict]

    @property
    def losses(self) -> list[float]:
        return [row["loss"] for row in self.log]


def build_model(config: RunConfig, adjacency) -> OSADNet:
    torch.manual_seed(config.seed)
    return OSADNet(config.model_config(), adjacency)


def train(config: RunConfig, index: DatasetIndex | None = None, write: bool = True,
          callback=None) -> TrainResult:
    """Episodic training. Deterministic for a fixed seed (single process).

    ``callback(step, model)`` runs after every optimization step.
    """
    index = index or load_dataset(config.dataset)
    fold = resolve_fold(config, index)
    adjacency = dataset_adjacency(index)
    model = build_model(config, adjacency)
    model.train()
    params = [p for p in model.parameters() if p.requires_grad]
    optimizer = torch.optim.Adam(params, lr=config.lr, betas=(0.9, 0.999), eps=1e-8)
    rng = np.random.default_rng(config.seed)

    n_train_images = sum(len(index.queries(c)) for c in fold.train if c in index.registry)
    episodes_per_epoch = max(1, math.ceil(n_train_images / config.queries))
    steps_per_epoch = max(1, math.ceil(episodes_per_epoch / config.batch_size))
    out = Path(config.out)
    last_good = None
    history: list[dict] = []
    step = 0
    epoch = 0
    for epoch in range(1, config.epochs + 1):
        lr = lr_at_epoch(epoch, config.lr, config.lr_decay_epoch, config.lr_decay_factor)
        for group in optimizer.param_groups:
            group["lr"] = lr
        for _ in range(steps_per_epoch):
            if config.max_steps and step >= config.max_steps:
                break
            items = [prepare_episode(sample_episode(index, fold, "train", config.queries, rng),
                                     config.image_size, rng, config)
                     for _ in range(config.batch_size)]
            batch = collate(items)
            sides = run_model(model, batch, _generator(rng))
            loss = batch_loss(sides, batch["masks"])
            if not torch.isfinite(loss):
                path = None
                if write and last_good is not None:
                    path = save_checkpoint(last_good, out / "last_good.safetensors")
                raise DivergenceError(f"non-finite loss at step {step + 1}", path)
            optimizer.zero_grad(set_to_none=True)
            loss.backward()
            optimizer.step()
            step += 1
            history.append({"step": step, "epoch": epoch, "lr": lr, "loss": loss.item()})
            if callback is not None:
                callback(step, model)
        last_good = _snapshot(model, optimizer, config, adjacency, epoch, step, index.registry)
        if write and config.checkpoint_every and epoch % config.checkpoint_every == 0:
            save_checkpoint(last_good, out / f"checkpoint_epoch{epoch:03d}.safetensors")
        if config.max_steps and step >= config.max_steps:
            break

    ckpt = last_good
    if write:
        save_checkpoint(ckpt, out / "last.safetensors")
        write_train_log(history, out / "train_log.csv")
        from osad.plotting import plot_losses

        plot_losses({f"N={config.queries}": [r["loss"] for r in history]}, out / "loss_curve.png")
    model.eval()
    return TrainResult(model, ckpt, history)


def write_train_log(history, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=["step", "epoch", "lr", "loss"])
        w.writeheader()
        w.writerows(history)


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------


def _category_fold(fold: FoldConfig, category: str) -> FoldConfig:
    return FoldConfig(fold.fold_id, frozenset({category}), frozenset())


def evaluation_episodes(config: RunConfig, index: DatasetIndex, split: str = "test"):
    """Fixed-seed episodes, ``eval.episodes_per_category`` for every category of the split."""
    fold = resolve_fold(config, index)
    rng = np.random.default_rng(config.eval_seed)
    for cat in sorted(fold.categories(split)):
        if cat not in index.registry:
            continue
        for _ in range(config.eval_episodes_per_category):
            try:
                ep = sample_episode(index, _category_fold(fold, cat), "test", config.queries, rng)
            except InsufficientQueriesError:
                log.warning("skipping category %s: not enough images for N=%d", cat, config.queries)
                break
            yield ep, _generator(rng)


def episode_probabilities(model: OSADNet, ep: Episode, size: int, generator=None) -> list[np.ndarray]:
    """Stage-1 probability map of every query, resized to that query's mask."""
    batch = collate([prepare_episode(ep, size)])
    probs = model.predict(batch["support"], batch["human_box"], batch["object_box"], batch["pose"],
                          batch["queries"], generator)[0]
    out = []
    for p, mask in zip(probs, ep.query_masks):
        out.append(_resize(p.unsqueeze(0), mask.shape).squeeze(0).clamp(0, 1).double().numpy())
    return out


def evaluate(config: RunConfig, checkpoint: Checkpoint | str | Path | None = None,
             index: DatasetIndex | None = None, model: OSADNet | None = None,
             oracle: bool = False, split: str = "test", out_dir=None) -> MetricReport:
    """Score a model on fixed-seed episodes of ``split``.

    ``oracle=True`` replaces the predictions with the ground truth.
    """
    if isinstance(checkpoint, (str, Path)):
        checkpoint = load_checkpoint(checkpoint)
    if checkpoint is not None:
        if int(checkpoint.config.get("fold", config.fold)) != config.fold:
            raise ConfigError(f"checkpoint was trained on fold {checkpoint.config.get('fold')}, "
                              f"config asks for fold {config.fold}")
        model = model or checkpoint.build_model()
    if model is None and not oracle:
        raise ConfigError("evaluate needs a checkpoint or a model")
    index = index or load_dataset(config.dataset)
    if model is not None:
        model.eval()

    report = MetricReport(fold_id=config.fold)
    preds, gts = [], []
    for ep, gen in evaluation_episodes(config, index, split):
        if oracle:
            probs = [m.astype(np.float64) for m in ep.query_masks]
        else:
            probs = episode_probabilities(model, ep, config.image_size, gen)
        for rec, prob, mask in zip(ep.query_records, probs, ep.query_masks):
            report.add(rec.image_id, ep.category_name,
                       image_scores(prob, mask, config.threshold, config.metrics_beta, config.metrics_beta_squared))
            preds.append(prob)
            gts.append(mask)
    if not report.rows:
        raise InsufficientQueriesError(f"no {split} episodes could be drawn for fold {config.fold}", index.root)
    report.curves = threshold_curves(preds, gts, config.metrics_beta, config.metrics_beta_squared)
    if out_dir is not None:
        write_report(report, out_dir)
    return report


def write_report(report: MetricReport, out_dir, label: str = "ours") -> None:
    from osad.plotting import plot_curves

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    report.to_csv(out / "metrics.csv")
    report.to_json(out / "metrics.json")
    report.category_table_csv(out / "categories.csv")
    curves = getattr(report, "curves", None)
    if curves is not None:
        curves.to_csv(out / "curves.csv")
        plot_curves({label: curves}, out)


# ---------------------------------------------------------------------------
# prediction
# ---------------------------------------------------------------------------


def predict(support_image: np.ndarray, annotation: SupportAnnotation, query_images: Sequence[np.ndarray],
            checkpoint: Checkpoint | str | Path, threshold: float = 0.5, seed: int | None = None):
    """Probability maps and binary masks, one pair per query at its own resolution."""
    if len(query_images) < 2:
        raise InsufficientQueriesError("prediction needs at least two query images")
    if isinstance(checkpoint, (str, Path)):
        checkpoint = load_checkpoint(checkpoint)
    cfg = checkpoint.run_config
    model = checkpoint.build_model()
    size = cfg.image_size
    h, w = support_image.shape[:2]
    support, human, obj, pose = prepare_support(support_image, annotation.clamped(w, h), size)
    queries = torch.stack([normalize_images(_resize(_to_tensor(q), (size, size)).unsqueeze(0)).squeeze(0)
                           for q in query_images])
    gen = torch.Generator().manual_seed(cfg.seed if seed is None else seed)
    probs = model.predict(support[None], human[None], obj[None], pose[None], queries[None], gen)[0]
    out = []
    for p, q in zip(probs, query_images):
        prob = _resize(p.unsqueeze(0), q.shape[:2]).squeeze(0).clamp(0, 1).numpy()
        out.append((prob, (prob >= threshold).astype(np.uint8)))
    return out


def write_predictions(results, names, out_dir) -> list[Path]:
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise UnwritablePathError(f"cannot create output directory ({exc.strerror})", out) from None
    written = []
    for (prob, mask), name in zip(results, names):
        p = out / f"{name}_prob.png"
        Image.fromarray(np.rint(prob * 255).astype(np.uint8), mode="L").save(p)
        m = out / f"{name}_mask.png"
        Image.fromarray(mask.astype(np.uint8) * 255, mode="L").save(m)
        written += [p, m]
    return written


# ---------------------------------------------------------------------------
# ablation sweeps
# ---------------------------------------------------------------------------

SWEEP_AXES = ("N", "K", "T", "similarity", "modules")
MODULE_COMBINATIONS = ("none", "apl", "dce", "apl+mpt", "apl+dce", "apl+mpt+dce")


def parse_modules(value: str) -> dict:
    parts = set() if value in ("none", "") else set(value.split("+"))
    unknown = parts - {"apl", "mpt", "dce"}
    if unknown:
        raise ConfigError(f"unknown module(s) {sorted(unknown)} in {value!r}")
    return {"modules_apl": "apl" in parts, "modules_mpt": "mpt" in parts, "modules_dce": "dce" in parts}


def sweep_config(config: RunConfig, axis: str, value) -> RunConfig:
    if axis == "N":
        return config.replace(queries=int(value))
    if axis == "K":
        return config.replace(mpt_bases=int(value))
    if axis == "T":
        return config.replace(mpt_iterations=int(value))
    if axis == "similarity":
        return config.replace(dce_similarity=str(value))
    if axis == "modules":
        return config.replace(**parse_modules(str(value)))
    raise ConfigError(f"unknown sweep axis {axis!r}; choose from {SWEEP_AXES}")


@dataclass
class SweepResult:
    axis: str
    rows: list[dict]
    losses: dict
    note: str = ""

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=[self.axis, "iou", "fbeta", "ephi", "cc", "mae"])
            w.writeheader()
            for r in self.rows:
                w.writerow({k: (f"{v:.4f}" if isinstance(v, float) else v) for k, v in r.items()})


def sweep(config: RunConfig, axis: str, values: Sequence, index: DatasetIndex | None = None,
          out_dir=None) -> SweepResult:
    """Train and evaluate once per value of ``axis``."""
    configs = [(v, sweep_config(config, axis, v)) for v in values]  # validate before training
    index = index or load_dataset(config.dataset)
    rows, losses = [], {}
    for value, cfg in configs:
        result = train(cfg, index, write=False)
        report = evaluate(cfg, result.checkpoint, index=index, model=result.model)
        rows.append({axis: value, **report.means()})
        losses[f"{axis}={value}"] = result.losses
    note = ""
    if axis == "N" and len(rows) > 1:
        ious = [r["iou"] for r in rows]
        monotone = all(b >= a for a, b in zip(ious, ious[1:]))
        note = "IoU rises monotonically with N" if monotone else "IoU is not monotone in N"
    res = SweepResult(axis, rows, losses, note)
    if out_dir is not None:
        from osad.plotting import plot_losses, plot_sweep

        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        res.to_csv(out / f"sweep_{axis}.csv")
        plot_losses(losses, out / f"sweep_{axis}_loss.png")
        plot_sweep(rows, axis, out / f"sweep_{axis}.png")
    return res
