"""Training loop, checkpoints, evaluation, cross-validation and inference."""
from __future__ import annotations

import json
import logging
import time
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np
from PIL import Image

from . import augment, io, losses, nn, postprocess
from . import tensor as T
from .config import TrainConfig, copy_config
from .data import kfold_split
from .metrics import MetricsReport, aji, confusion_counts, f_score, iou, mean_iou
from .nn import ConfigError, ParameterStore
from .tensor import Tensor

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# optimiser
# ---------------------------------------------------------------------------


@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def adam_step(params: ParameterStore, state: AdamState, lr: float) -> None:
    """One bias-corrected Adam update using each parameter's ``.grad``."""
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.t
    c2 = 1.0 - b2**state.t
    for name, p in params.items():
        g = p.grad
        if name not in state.m:
            state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        if g is None:
            g = np.zeros_like(p.data)
        if g.shape != p.shape:
            raise T.ShapeError(f"gradient for {name} has shape {g.shape}, parameter {p.shape}")
        m, v = state.m[name], state.v[name]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * (g * g)
        p.data -= (lr * (m / c1) / (np.sqrt(v / c2) + state.eps)).astype(p.dtype)


# ---------------------------------------------------------------------------
# training state and checkpoints
# ---------------------------------------------------------------------------


@dataclass
class TrainState:
    config: TrainConfig
    params: ParameterStore
    adam: AdamState
    stats: augment.NormalizationStats
    rng: np.random.Generator
    epoch: int = 0  # completed epochs
    best_fscore: float = -1.0


def new_state(config: TrainConfig, stats: augment.NormalizationStats) -> TrainState:
    config.validate()
    params = nn.build_params(config.network, seed=config.seed)
    return TrainState(config, params, AdamState(), stats, np.random.default_rng(config.seed))


MAGIC = b"TUBESEG-CKPT\n"
FORMAT_VERSION = 1


def save_checkpoint(path, state: TrainState) -> None:
    """Self-describing container: magic line, header length, JSON header, raw LE values."""
    table = []
    chunks = []
    offset = 0

    def put(kind, name, arr):
        nonlocal offset
        arr = np.ascontiguousarray(arr)
        le = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
        raw = le.tobytes()
        table.append({"kind": kind, "name": name, "shape": list(arr.shape), "dtype": le.dtype.str, "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)

    for name, p in state.params.items():
        put("param", name, p.data)
    for name, s in state.params.buffers.items():
        put("bn_mean", name, s.mean)
        put("bn_var", name, s.var)
    for name in state.adam.m:
        put("adam_m", name, state.adam.m[name])
        put("adam_v", name, state.adam.v[name])
    header = {
        "format": "tubeseg-checkpoint",
        "version": FORMAT_VERSION,
        "train_config": state.config.to_dict(),
        "network": state.config.network.to_dict(),
        "normalization": {"mean": state.stats.mean, "std": state.stats.std, "source": state.stats.source},
        "epoch": state.epoch,
        "best_fscore": state.best_fscore,
        "adam": {"t": state.adam.t, "beta1": state.adam.beta1, "beta2": state.adam.beta2, "eps": state.adam.eps},
        "bn_counts": {name: s.count for name, s in state.params.buffers.items()},
        "rng_state": state.rng.bit_generator.state,
        "tensors": table,
    }
    head = json.dumps(header, sort_keys=True).encode("utf-8")
    io.atomic_write_bytes(path, MAGIC + f"{len(head)}\n".encode() + head + b"\n" + b"".join(chunks))


def load_checkpoint(path) -> TrainState:
    path = Path(path)
    try:
        blob = path.read_bytes()
    except OSError as exc:
        raise FileNotFoundError(f"cannot read checkpoint {path}: {exc}") from exc
    if not blob.startswith(MAGIC):
        raise ValueError(f"{path} is not a tubeseg checkpoint")
    pos = len(MAGIC)
    nl = blob.index(b"\n", pos)
    size = int(blob[pos:nl])
    header = json.loads(blob[nl + 1 : nl + 1 + size])
    if header.get("version") != FORMAT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {header.get('version')}")
    data = memoryview(blob)[nl + 1 + size + 1 :]

    config = TrainConfig.from_dict(header["train_config"]).validate()
    arrays: dict = {}
    for entry in header["tensors"]:
        raw = data[entry["offset"] : entry["offset"] + entry["nbytes"]]
        arr = np.frombuffer(raw, dtype=np.dtype(entry["dtype"])).reshape(entry["shape"])
        arrays[(entry["kind"], entry["name"])] = arr.astype(arr.dtype.newbyteorder("="))

    with T.precision(_precision_of(arrays)):
        params = nn.build_params(config.network, seed=config.seed)
    for name, p in params.items():
        p.data = arrays[("param", name)].copy()
    for name, s in params.buffers.items():
        s.mean = arrays[("bn_mean", name)].copy()
        s.var = arrays[("bn_var", name)].copy()
        s.count = header["bn_counts"][name]
    a = header["adam"]
    adam = AdamState(t=a["t"], beta1=a["beta1"], beta2=a["beta2"], eps=a["eps"])
    for (kind, name), arr in arrays.items():
        if kind == "adam_m":
            adam.m[name] = arr.copy()
        elif kind == "adam_v":
            adam.v[name] = arr.copy()
    rng = np.random.default_rng()
    rng.bit_generator.state = header["rng_state"]
    stats = augment.NormalizationStats(**header["normalization"])
    return TrainState(config, params, adam, stats, rng, epoch=header["epoch"], best_fscore=header["best_fscore"])


def _precision_of(arrays: dict) -> str:
    for (kind, _), arr in arrays.items():
        if kind == "param":
            return "float64" if arr.dtype == np.float64 else "float32"
    return "float32"


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------


def _target_mask(rec: dict, num_classes: int) -> np.ndarray:
    return rec["mask2"] if num_classes == 2 else rec["mask3"]


def make_batch(records: list, stats: augment.NormalizationStats, num_classes: int, aug: Optional[augment.AugmentationConfig] = None, seeds=None):
    images, masks = [], []
    for i, rec in enumerate(records):
        img, mask = rec["image"], _target_mask(rec, num_classes)
        if aug is not None:
            img, mask = augment.apply_pipeline(img, mask, aug, seeds[i])
        images.append(augment.normalize(img, stats, dtype=T.get_dtype()))
        masks.append(mask)
    return np.stack(images), np.stack(masks)


def train_step(state: TrainState, x: np.ndarray, masks: np.ndarray, lr: float, weights=None) -> float:
    cfg = state.config
    onehot = losses.one_hot(masks, cfg.num_classes)
    logits = nn.network_forward(Tensor(x), state.params, cfg.network, train=True)
    probs = T.softmax(logits, axis=1)
    if cfg.loss == "dice_wce" and weights is None:
        weights = losses.class_weights(onehot.sum(axis=(0, 2, 3)))
    loss = losses.compute_loss(cfg.loss, probs, onehot, cfg.tversky_alpha, cfg.tversky_beta, weights, cfg.tversky_doubled)
    value = loss.item()
    if not np.isfinite(value):
        raise TrainingError(f"non-finite loss {value} at epoch {state.epoch + 1}, step {state.adam.t + 1}")
    state.params.zero_grad()
    T.backward(loss)
    adam_step(state.params, state.adam, lr)
    return value


def predict_probs(state_or_params, config: nn.NetworkConfig, image: np.ndarray, stats: augment.NormalizationStats, tta: bool) -> np.ndarray:
    params = state_or_params.params if isinstance(state_or_params, TrainState) else state_or_params

    def model(batch):
        with T.no_grad():
            return nn.network_forward(Tensor(batch), params, config, train=False).data

    return augment.tta_predict(image, model, stats, tta=tta, dtype=T.get_dtype())


def predicted_instances(pred: np.ndarray, num_classes: int, min_distance: float) -> np.ndarray:
    if num_classes == 3:
        return postprocess.instances_from_three_class(pred)
    return postprocess.split_touching(pred, min_distance=min_distance)


def evaluate(params: ParameterStore, config: TrainConfig, records: list, stats: augment.NormalizationStats, tta: Optional[bool] = None, with_aji: bool = True):
    """Per-image rows (image, iou, fscore, mean_iou, aji) and pooled counts."""
    tta = config.tta if tta is None else tta
    rows = []
    pooled = None
    for rec in records:
        probs = predict_probs(params, config.network, rec["image"], stats, tta)
        pred = postprocess.argmax_mask(probs)
        gt = _target_mask(rec, config.num_classes)
        counts = confusion_counts(pred, gt, config.num_classes)
        pooled = counts if pooled is None else pooled + counts
        row = {"image": rec["name"], "iou": iou(counts, 1), "fscore": f_score(counts, 1), "mean_iou": mean_iou(counts)}
        if with_aji:
            row["aji"] = aji(rec["instances"], predicted_instances(pred, config.num_classes, config.min_distance))
        rows.append(row)
    return rows, pooled


def compute_stats(config: TrainConfig, records: list) -> augment.NormalizationStats:
    if config.normalization == "imagenet":
        return augment.IMAGENET_STATS
    return augment.dataset_stats(r["image"] for r in records)


@dataclass
class TrainResult:
    state: TrainState
    log: list  # dicts: epoch, lr, train_loss, val_iou, val_fscore
    best_path: Optional[Path] = None
    final_path: Optional[Path] = None
    seconds: float = 0.0


LOG_COLUMNS = ("epoch", "lr", "train_loss", "val_iou", "val_fscore")


def write_log(path, rows: list) -> None:
    lines = [",".join(LOG_COLUMNS)]
    for r in rows:
        lines.append(
            f"{r['epoch']},{r['lr']:.8g},{r['train_loss']:.8f},"
            + ",".join("" if r[k] is None else f"{r[k]:.6f}" for k in ("val_iou", "val_fscore"))
        )
    io.atomic_write_text(path, "\n".join(lines) + "\n")


def run_epoch(state: TrainState, records: list, train_idx: list, aug: augment.AugmentationConfig, dataset_weights=None) -> float:
    cfg = state.config
    epoch = state.epoch + 1
    lr = cfg.lr_at(epoch)
    order = state.rng.permutation(np.asarray(train_idx))
    total, n = 0.0, 0
    for start in range(0, len(order), cfg.batch_size):
        idx = [int(i) for i in order[start : start + cfg.batch_size]]
        seeds = [(cfg.seed, epoch, i) for i in idx]
        x, masks = make_batch([records[i] for i in idx], state.stats, cfg.num_classes, aug, seeds)
        total += train_step(state, x, masks, lr, dataset_weights) * len(idx)
        n += len(idx)
    state.epoch = epoch
    return total / max(n, 1)


def train(
    records: list,
    train_idx: list,
    val_idx: list,
    config: TrainConfig,
    out_dir=None,
    state: Optional[TrainState] = None,
    on_epoch: Optional[Callable[[dict], None]] = None,
) -> TrainResult:
    """Train on ``records[train_idx]``, validating on ``records[val_idx]``.

    With ``out_dir`` the per-epoch log (``log.csv``), the best-validation
    (``best.ckpt``) and final (``final.ckpt``) checkpoints are written there.
    Passing ``state`` resumes from it.
    """
    config = copy_config(config).validate()
    t0 = time.perf_counter()
    if not train_idx:
        raise ValueError("no training records")
    if state is None:
        state = new_state(config, compute_stats(config, [records[i] for i in train_idx]))
    aug = augment.AugmentationConfig.from_preset(config.augment)
    dataset_weights = None
    if config.class_weights == "dataset" and config.loss == "dice_wce":
        counts = sum(np.bincount(_target_mask(records[i], config.num_classes).ravel(), minlength=config.num_classes) for i in train_idx)
        dataset_weights = losses.class_weights(counts)
    out = Path(out_dir) if out_dir is not None else None
    val_records = [records[i] for i in val_idx]
    rows: list = []
    best_path = final_path = None
    while state.epoch < config.epochs:
        loss = run_epoch(state, records, train_idx, aug, dataset_weights)
        row = {"epoch": state.epoch, "lr": config.lr_at(state.epoch), "train_loss": loss, "val_iou": None, "val_fscore": None}
        validate_now = val_records and (state.epoch % config.val_every == 0 or state.epoch == config.epochs)
        if validate_now:
            _, pooled = evaluate(state.params, config, val_records, state.stats, with_aji=False)
            row["val_iou"], row["val_fscore"] = iou(pooled, 1), f_score(pooled, 1)
            if row["val_fscore"] > state.best_fscore:
                state.best_fscore = row["val_fscore"]
                if out is not None:
                    best_path = out / "best.ckpt"
                    save_checkpoint(best_path, state)
        rows.append(row)
        log.info("epoch %d lr %.3g loss %.5f val_f %s", row["epoch"], row["lr"], loss, row["val_fscore"])
        if out is not None:
            write_log(out / "log.csv", rows)
        if on_epoch is not None:
            on_epoch(row)
        if config.stop_at_fscore and row["val_fscore"] is not None and row["val_fscore"] >= config.stop_at_fscore:
            break
    if out is not None:
        final_path = out / "final.ckpt"
        save_checkpoint(final_path, state)
        if best_path is None:
            best_path = out / "best.ckpt"
            save_checkpoint(best_path, state)
    return TrainResult(state, rows, best_path, final_path, time.perf_counter() - t0)


def cross_validate(records: list, config: TrainConfig, k: int = 5, out_dir=None, on_fold: Optional[Callable] = None) -> MetricsReport:
    """Train ``k`` models on complementary folds; report held-out metrics.

    Fold ``f`` uses seed ``config.seed + f``; the fold split itself uses
    ``config.seed``. Held-out evaluation uses the final model of each fold.
    """
    split = kfold_split(len(records), k, seed=config.seed)
    report = MetricsReport()
    out = Path(out_dir) if out_dir is not None else None
    for fold in range(k):
        train_idx, val_idx = split.train_val(fold)
        cfg = copy_config(config)
        cfg.seed = config.seed + fold
        fold_dir = out / f"fold{fold}" if out is not None else None
        result = train(records, train_idx, val_idx, cfg, out_dir=fold_dir)
        rows, _ = evaluate(result.state.params, cfg, [records[i] for i in val_idx], result.state.stats)
        for r in rows:
            r["fold"] = fold
        summary = report.add_fold(fold, rows)
        report.audit.append(
            {"fold": fold, "train_ids": [records[i]["name"] for i in train_idx], "val_ids": [records[i]["name"] for i in val_idx]}
        )
        if on_fold is not None:
            on_fold(fold, summary, result)
    if out is not None:
        report.write_csv(out / "metrics.csv")
        io.atomic_write_text(out / "audit.json", json.dumps(report.audit, indent=1) + "\n")
    return report


# ---------------------------------------------------------------------------
# inference
# ---------------------------------------------------------------------------


def _nearest_multiple(n: int, m: int = 32) -> int:
    return max(m, int(round(n / m)) * m)


def overlay(image: np.ndarray, instances: np.ndarray, color=(255, 255, 0)) -> np.ndarray:
    """Input image with instance boundaries painted in ``color``."""
    _, edges = postprocess.seeded_watershed(np.zeros(instances.shape), [], instances > 0, return_boundary=True)
    padded = np.pad(instances, 1)
    h, w = instances.shape
    outer = np.zeros(instances.shape, dtype=bool)
    for dy, dx in postprocess.OFFSETS:
        outer |= (instances > 0) & (padded[1 + dy : 1 + dy + h, 1 + dx : 1 + dx + w] != instances)
    out = image.copy()
    out[outer | edges] = color
    return out


def infer_image(state: TrainState, image: np.ndarray, tta: bool = True, seeds=None, min_distance: Optional[float] = None) -> dict:
    cfg = state.config
    h, w = image.shape[:2]
    work = image
    if h % 32 or w % 32:
        nh, nw = _nearest_multiple(h), _nearest_multiple(w)
        warnings.warn(f"input {h}x{w} is not divisible by 32; resizing to {nh}x{nw}", stacklevel=2)
        work = np.asarray(Image.fromarray(image).resize((nw, nh), Image.BILINEAR))
    probs = predict_probs(state, cfg.network, work, state.stats, tta)
    pred = postprocess.argmax_mask(probs)
    if pred.shape != (h, w):
        pred = np.asarray(Image.fromarray(pred).resize((w, h), Image.NEAREST))
    md = cfg.min_distance if min_distance is None else min_distance
    if cfg.num_classes == 3 and seeds is None:
        instances = postprocess.instances_from_three_class(pred)
    else:
        fg = (pred > 0).astype(np.uint8)
        instances = postprocess.split_touching(fg, seeds=seeds, min_distance=md)
    return {"probs": probs, "mask": pred, "instances": instances, "overlay": overlay(image, instances)}


def infer(inputs, checkpoint, out_dir, tta: bool = True, seeds=None, min_distance: Optional[float] = None) -> Path:
    """Segment an image file or every PNG in a directory.

    Writes ``<stem>_mask.png``, ``<stem>_instances.png`` and
    ``<stem>_overlay.png`` per image plus ``predictions.tsv``, a manifest
    usable by :func:`evaluate_manifests`. Returns the manifest path.
    """
    state = load_checkpoint(checkpoint)
    src = Path(inputs)
    if src.is_dir():
        files = sorted(p for p in src.iterdir() if p.suffix.lower() in (".png", ".tif", ".tiff", ".jpg", ".jpeg"))
    elif src.exists():
        files = [src]
    else:
        raise FileNotFoundError(f"no such image or directory: {src}")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    records = []
    with T.precision(_precision_of({("param", n): p.data for n, p in state.params.items()})):
        for f in files:
            image = io.read_image(f)
            res = infer_image(state, image, tta=tta, seeds=seeds, min_distance=min_distance)
            stem = f.stem
            mask2 = (res["mask"] > 0).astype(np.uint8)
            rec = io.Record(f.resolve(), out / f"{stem}_mask2.png", out / f"{stem}_mask.png", out / f"{stem}_instances.png", "pred")
            io.write_mask(rec.mask3, res["mask"])
            io.write_mask(rec.mask2, mask2)
            io.write_mask(rec.instances, res["instances"], instances=True)
            io.write_image(out / f"{stem}_overlay.png", res["overlay"])
            records.append(rec)
    manifest = out / "predictions.tsv"
    io.write_manifest(manifest, records)
    return manifest


def evaluate_manifests(pred_records: list, gt_records: list, num_classes: int = 2) -> MetricsReport:
    """Metrics for prediction/ground-truth record pairs matched by image name."""
    by_name = {r.name: r for r in pred_records}
    report = MetricsReport()
    rows = []
    for g in gt_records:
        p = by_name.get(g.name)
        if p is None:
            raise ValueError(f"no prediction for ground-truth image {g.name}")
        pred_mask = io.read_mask(p.mask2 if num_classes == 2 else p.mask3)
        gt_mask = io.read_mask(g.mask2 if num_classes == 2 else g.mask3)
        counts = confusion_counts(pred_mask, gt_mask, num_classes)
        rows.append(
            {
                "image": g.name,
                "fold": 0,
                "iou": iou(counts, 1),
                "fscore": f_score(counts, 1),
                "mean_iou": mean_iou(counts),
                "aji": aji(io.read_mask(g.instances), io.read_mask(p.instances)),
            }
        )
    report.add_fold(0, rows)
    return report


def load_records(manifest) -> list:
    return [io.load_record(r) for r in io.read_manifest(manifest)]

