"""Class-incremental training loop.

A run first fits the whole detector on task 1 without memory and freezes
everything except the class head, box head, memory pool and ranking head.
Each task then trains only those parts, with:

* future-class logits forced to -inf,
* gradients of earlier classes' class-head rows zeroed,
* memory chunks of other tasks frozen,
* the box head at a reduced learning rate,
* confident predictions of earlier classes added as pseudo-labels.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from .detector import Detector, DetectorConfig, DetectorOutput
from .errors import CompatibilityError, InvariantViolation, StartupError
from .matching import Assignment, LossDiagnostics, LossWeights, batched_detr_loss, hungarian_match, total_loss
from .memory import MemoryPool, freeze_for_task
from .metrics import Detection, EvalReport, average_precision, continual_map, iou_matrix
from .query import RankingHead, batched_query_loss
from .synth import SynthImage, TaskStream
from .tensor import GradientMask, Tensor, apply_gradient_mask, no_grad, softmax

logger = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "mdcdet-checkpoint"
CHECKPOINT_VERSION = 1


@dataclass
class TrainConfig:
    lr: float = 0.01
    weight_decay: float = 0.0004
    bbox_lr_factor: float = 0.1
    memory_lr_factor: float = 0.1
    lambda_q: float = 0.01
    delta_bt: float = 0.65
    epochs_first: int = 50
    epochs_later: int = 25
    pretrain_epochs: int = 50
    pretrain_lr: float = 0.001
    batch_size: int = 16
    seed: int = 0
    n_units: int = 100
    mem_length: int = 10
    use_memory: bool = True
    use_bt: bool = True
    use_ql: bool = True
    zero_memory_init: bool = True
    dedup_iou: float = 0.3
    cls_weight: float = 1.0
    l1_weight: float = 5.0
    giou_weight: float = 2.0
    bg_weight: float = 0.1
    log_match_cost: bool = False
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    dim: int = 32
    n_heads: int = 2
    n_points: int = 4
    n_proposals: int = 12
    enc_layers: int = 2
    dec_layers: int = 2
    ffn_dim: int = 64
    patch: int = 4
    test_mode: bool = False
    log_timing: bool = False

    def __post_init__(self):
        if not 0.0 <= self.delta_bt <= 1.0:
            raise ValueError("delta_bt must lie in [0, 1]")
        if not 0.0 < self.bbox_lr_factor <= 1.0:
            raise ValueError("bbox_lr_factor must lie in (0, 1]")
        if self.lambda_q < 0:
            raise ValueError("lambda_q must be non-negative")
        if self.use_memory and self.mem_length % 2:
            raise ValueError("mem_length must be even")

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name: f for f in fields(cls)}
        unknown = set(d) - set(known)
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    def hash(self) -> str:
        d = asdict(self)
        d.pop("test_mode")
        d.pop("log_timing")
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:16]

    def loss_weights(self) -> LossWeights:
        return LossWeights(self.cls_weight, self.l1_weight, self.giou_weight, self.bg_weight, self.log_match_cost)

    def detector_config(self, n_classes: int, image_size: int) -> DetectorConfig:
        return DetectorConfig(
            n_classes=n_classes,
            image_size=image_size,
            patch=self.patch,
            dim=self.dim,
            n_heads=self.n_heads,
            n_points=self.n_points,
            n_proposals=self.n_proposals,
            enc_layers=self.enc_layers,
            dec_layers=self.dec_layers,
            ffn_dim=self.ffn_dim,
            memory_length=self.mem_length,
        )

    def epochs_for(self, t: int) -> int:
        return self.epochs_first if t == 1 else self.epochs_later


# ablation rows: which of memory, background thresholding and query loss are on
COMPONENTS: dict[str, dict[str, bool]] = {
    "FT": dict(use_memory=False, use_bt=False, use_ql=False),
    "FT+Mem": dict(use_memory=True, use_bt=False, use_ql=False),
    "FT+Mem+BT": dict(use_memory=True, use_bt=True, use_ql=False),
    "FT+Mem+QL": dict(use_memory=True, use_bt=False, use_ql=True),
    "FT+Mem+BT+QL": dict(use_memory=True, use_bt=True, use_ql=True),
}


def with_components(config: TrainConfig, name: str) -> TrainConfig:
    if name not in COMPONENTS:
        raise KeyError(f"unknown component set {name!r}; expected one of {sorted(COMPONENTS)}")
    return replace(config, **COMPONENTS[name])


@dataclass
class PseudoLabel:
    cls: int
    box: tuple[float, float, float, float]
    confidence: float
    image_id: str


# optimizer --------------------------------------------------------------------


class Adam:
    """Adam with L2 weight decay folded into the gradient and per-parameter lr.

    Masks are applied after the decay term, so masked entries see a zero
    gradient, zero moments and therefore an exactly zero update.
    """

    def __init__(self, params: dict[str, Tensor], lrs: dict[str, float], betas=(0.9, 0.999), eps=1e-8,
                 weight_decay=0.0):
        self.params = params
        self.lrs = lrs
        self.b1, self.b2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.m = {n: np.zeros_like(p.data) for n, p in params.items()}
        self.v = {n: np.zeros_like(p.data) for n, p in params.items()}
        self.steps = 0

    def step(self, masks: dict[str, list[GradientMask]] | None = None) -> None:
        self.steps += 1
        c1 = 1 - self.b1**self.steps
        c2 = 1 - self.b2**self.steps
        for name, p in self.params.items():
            if p.grad is None:
                continue
            g = p.grad + self.weight_decay * p.data
            for mask in (masks or {}).get(name, ()):
                g = apply_gradient_mask(g, mask)
            self.m[name] = self.b1 * self.m[name] + (1 - self.b1) * g
            self.v[name] = self.b2 * self.v[name] + (1 - self.b2) * g * g
            p.data -= self.lrs[name] * (self.m[name] / c1) / (np.sqrt(self.v[name] / c2) + self.eps)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None


# class bookkeeping --------------------------------------------------------------


def visible_logit_set(t: int, class_splits: Sequence[Sequence[int]]) -> list[int]:
    """Classes of tasks 1..t followed by the background index."""
    if not 1 <= t <= len(class_splits):
        raise IndexError(f"task {t} outside 1..{len(class_splits)}")
    n_classes = sum(len(c) for c in class_splits)
    return sorted(c for cs in class_splits[:t] for c in cs) + [n_classes]


def past_class_gradient_mask(t: int, class_splits: Sequence[Sequence[int]]) -> GradientMask:
    """Rows of the class head (weight and bias) owned by tasks before ``t``."""
    if not 1 <= t <= len(class_splits):
        raise IndexError(f"task {t} outside 1..{len(class_splits)}")
    return GradientMask("class_embed", tuple(sorted(c for cs in class_splits[: t - 1] for c in cs)), axis=0)


def _mask_targets(mask: GradientMask, names: Iterable[str]) -> list[str]:
    return [n for n in names if n == mask.target or n.startswith(mask.target + ".")]


# pseudo-labels ------------------------------------------------------------------


def select_pseudo_labels(
    probs: np.ndarray,
    boxes: np.ndarray,
    gt_boxes: np.ndarray,
    past_classes: Iterable[int],
    delta_bt: float,
    image_id: str = "",
    dedup_iou: float = 0.3,
) -> list[PseudoLabel]:
    """Pseudo-labels from one image's (P, C+1) scores and (P, 4) boxes.

    A proposal is kept when its best foreground class belongs to an earlier
    task, that score exceeds ``delta_bt``, and its box overlaps no existing
    annotation or already kept pseudo box above ``dedup_iou``. Candidates
    are visited by descending confidence.
    """
    past = set(past_classes)
    if not past:
        return []
    fg = probs[:, :-1]
    labels = fg.argmax(axis=1)
    conf = fg[np.arange(len(fg)), labels]
    keep_boxes = [b for b in np.asarray(gt_boxes).reshape(-1, 4)]
    kept: list[PseudoLabel] = []
    for p in sorted(range(len(fg)), key=lambda i: (-conf[i], i)):
        if int(labels[p]) not in past or not conf[p] > delta_bt:
            continue
        if keep_boxes and iou_matrix(boxes[p][None], np.stack(keep_boxes)).max() > dedup_iou:
            continue
        keep_boxes.append(boxes[p])
        kept.append(PseudoLabel(int(labels[p]), tuple(float(v) for v in boxes[p]), float(conf[p]), image_id))
    return kept


# model container ------------------------------------------------------------------


@dataclass
class ContinualModel:
    detector: Detector
    pool: MemoryPool | None
    ranker: RankingHead | None
    class_names: list[str]
    class_splits: list[list[int]]
    config: TrainConfig
    trained_tasks: int = 0
    pretrained: bool = False
    _cache: dict = field(default_factory=dict, repr=False)

    @classmethod
    def build(cls, stream: TaskStream, config: TrainConfig) -> "ContinualModel":
        det = Detector(config.detector_config(stream.n_classes, stream.spec.image_size), seed=config.seed)
        pool = ranker = None
        if config.use_memory:
            pool = MemoryPool.create(config.n_units, config.mem_length, config.dim, len(stream.tasks),
                                     seed=config.seed + 1, zero_units=config.zero_memory_init)
            if config.use_ql:
                ranker = RankingHead(config.dim)
        return cls(det, pool, ranker, list(stream.class_names), [list(t.classes) for t in stream.tasks], config)

    def trainable(self) -> dict[str, Tensor]:
        params = {n: self.detector.params[n] for n in self.detector.head_names()}
        if self.pool is not None:
            params.update(self.pool.parameters())
        if self.ranker is not None:
            params.update(self.ranker.parameters())
        return params

    def all_parameters(self) -> dict[str, Tensor]:
        params = dict(self.detector.params)
        if self.pool is not None:
            params.update(self.pool.parameters())
        if self.ranker is not None:
            params.update(self.ranker.parameters())
        return params

    def frozen_features(self, images: Sequence[SynthImage]) -> tuple[Tensor, Tensor]:
        """Encoder grid and memory-free proposals, cached per image id.

        Only valid once the backbone is frozen.
        """
        missing = [im for im in images if im.id not in self._cache]
        for start in range(0, len(missing), 64):
            chunk = missing[start : start + 64]
            pix = np.stack([im.pixels for im in chunk])
            with no_grad():
                fmap = self.detector.encode(pix)
                props = self.detector.decode(fmap)
            for i, im in enumerate(chunk):
                self._cache[im.id] = (fmap.data[i], props.data[i])
        fm = np.stack([self._cache[im.id][0] for im in images])
        pr = np.stack([self._cache[im.id][1] for im in images])
        return Tensor(fm), Tensor(pr)

    def forward_images(self, images: Sequence[SynthImage], visible) -> DetectorOutput:
        fmap, props = self.frozen_features(images)
        if self.pool is None:
            # without memory the cached proposals already are the decoder output
            logits, boxes = self.detector.heads(props, visible)
            return DetectorOutput(logits, softmax(logits, axis=-1), boxes, None, None)
        return self.detector.forward_features(fmap, props, self.pool, visible, self.ranker)


def background_threshold(
    model: ContinualModel,
    batch: Sequence[SynthImage],
    past_classes: Iterable[int],
    delta_bt: float,
    visible: Iterable[int] | None = None,
    dedup_iou: float = 0.3,
) -> list[PseudoLabel]:
    """Run inference on ``batch`` and collect confident earlier-class predictions."""
    past = sorted(past_classes)
    if visible is None:
        visible = past
    with no_grad():
        out = model.forward_images(batch, visible)
    labels = []
    for b, im in enumerate(batch):
        labels += select_pseudo_labels(out.probs.data[b], out.boxes.data[b], im.boxes(), past, delta_bt, im.id,
                                       dedup_iou)
    return labels


# training ------------------------------------------------------------------------


def _batches(n: int, size: int, rng) -> list[np.ndarray]:
    order = rng.permutation(n)
    return [order[i : i + size] for i in range(0, n, size)]


def _targets(images: Sequence[SynthImage]) -> list[tuple[list[int], np.ndarray]]:
    return [(im.classes(), im.boxes()) for im in images]


def _match_all(out: DetectorOutput, targets, weights: LossWeights) -> list[Assignment]:
    return [
        hungarian_match(out.probs.data[b], out.boxes.data[b], cls, boxes, weights)
        for b, (cls, boxes) in enumerate(targets)
    ]


class JsonlLog:
    def __init__(self, path: Path | None, timing: bool):
        self.path = path
        self.timing = timing
        self.records: list[dict] = []
        if path is not None:
            path.write_text("", encoding="utf-8")

    def write(self, record: dict, wall_ms: float) -> None:
        if self.timing:
            record = dict(record, wall_ms=round(wall_ms, 3))
        self.records.append(record)
        if self.path is not None:
            with open(self.path, "a", encoding="utf-8") as fh:
                fh.write(json.dumps(record, sort_keys=True) + "\n")


def pretrain_backbone(model: ContinualModel, stream: TaskStream, log: JsonlLog | None = None) -> None:
    """Fit every detector weight on task 1 without memory, then freeze the backbone."""
    cfg = model.config
    det = model.detector
    task = stream.tasks[0]
    images = [im.training_view() for im in task.train]
    visible = visible_logit_set(1, model.class_splits)
    params = dict(det.params)
    opt = Adam(params, {n: cfg.pretrain_lr for n in params}, (cfg.beta1, cfg.beta2), cfg.adam_eps, cfg.weight_decay)
    weights = cfg.loss_weights()
    decay_at = int(round(0.8 * cfg.pretrain_epochs))
    for epoch in range(cfg.pretrain_epochs):
        if epoch == decay_at:
            opt.lrs = {n: lr * 0.1 for n, lr in opt.lrs.items()}
        start = time.perf_counter()
        total, n_batches = 0.0, 0
        for idx in _batches(len(images), cfg.batch_size, np.random.default_rng([cfg.seed, 0, epoch])):
            batch = [images[i] for i in idx]
            out = det.forward(np.stack([im.pixels for im in batch]), visible=visible)
            targets = _targets(batch)
            loss = batched_detr_loss(out.probs, out.boxes, targets, _match_all(out, targets, weights),
                                     weights) * (1.0 / len(batch))
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += loss.item()
            n_batches += 1
        if log is not None:
            log.write({"phase": "pretrain", "task": 1, "epoch": epoch, "loss": total / n_batches, "l_q": 0.0,
                       "n_pseudo_labels": 0}, (time.perf_counter() - start) * 1e3)
    det.freeze_backbone()
    model.pretrained = True
    model._cache.clear()


def _snapshot(model: ContinualModel, t: int) -> dict[str, np.ndarray]:
    snap = {n: model.detector.params[n].data.copy() for n in model.detector.backbone_names()}
    past = [c for cs in model.class_splits[: t - 1] for c in cs]
    snap["class_embed.weight[past]"] = model.detector.params["class_embed.weight"].data[past].copy()
    snap["class_embed.bias[past]"] = model.detector.params["class_embed.bias"].data[past].copy()
    if model.pool is not None:
        frozen = sorted(i for c in model.pool.frozen_chunks for i in range(c * model.pool.chunk_size,
                                                                             (c + 1) * model.pool.chunk_size))
        snap["memory.units[frozen]"] = model.pool.memory.data[:, :, frozen].copy()
        snap["memory.keys[frozen]"] = model.pool.keys.data[frozen].copy()
        snap["memory.attention[frozen]"] = model.pool.attention.data[:, frozen].copy()
    return snap


def _check_snapshot(before: dict[str, np.ndarray], after: dict[str, np.ndarray]) -> None:
    for name, value in before.items():
        if value.tobytes() != after[name].tobytes():
            raise InvariantViolation(f"{name} changed while it should be frozen")


def _lr_factor(cfg: TrainConfig, name: str) -> float:
    if name.startswith(Detector.BBOX_PREFIX):
        return cfg.bbox_lr_factor
    if name.startswith("memory."):
        return cfg.memory_lr_factor
    return 1.0


def train_task(
    model: ContinualModel,
    stream: TaskStream,
    t: int,
    log: JsonlLog | None = None,
    on_batch: Callable[[DetectorOutput], None] | None = None,
) -> dict:
    """Train task ``t`` (1-based) and return its checkpoint document."""
    cfg = model.config
    if not model.pretrained:
        raise StartupError("the backbone must be pretrained before continual training")
    if model.trained_tasks != t - 1:
        raise StartupError(f"task {t} needs the checkpoint of task {t - 1}; model has {model.trained_tasks}")
    det = model.detector
    task = stream.tasks[t - 1]
    images = [im.training_view() for im in task.train]
    visible = visible_logit_set(t, model.class_splits)
    past = [c for cs in model.class_splits[: t - 1] for c in cs]
    future = [c for cs in model.class_splits[t:] for c in cs]
    if model.pool is not None:
        freeze_for_task(model.pool, t - 1)

    params = model.trainable()
    lrs = {n: cfg.lr * _lr_factor(cfg, n) for n in params}
    opt = Adam(params, lrs, (cfg.beta1, cfg.beta2), cfg.adam_eps, cfg.weight_decay)
    masks: dict[str, list[GradientMask]] = {}
    class_mask = past_class_gradient_mask(t, model.class_splits)
    pool_masks = model.pool.gradient_masks() if model.pool is not None else []
    for mask in [class_mask] + pool_masks:
        for name in _mask_targets(mask, params):
            masks.setdefault(name, []).append(mask)

    weights = cfg.loss_weights()
    use_bt = cfg.use_bt and t >= 2
    diagnostics = LossDiagnostics()
    for epoch in range(cfg.epochs_for(t)):
        start = time.perf_counter()
        before = _snapshot(model, t) if cfg.test_mode else None
        total = total_lq = 0.0
        n_batches = n_pseudo = 0
        for idx in _batches(len(images), cfg.batch_size, np.random.default_rng([cfg.seed, t, epoch])):
            batch = [images[i] for i in idx]
            out = model.forward_images(batch, visible)
            if cfg.test_mode and future and np.any(out.probs.data[..., future] != 0.0):
                raise InvariantViolation("a future class received non-zero probability")
            if on_batch is not None:
                on_batch(out)
            targets = _targets(batch)
            if use_bt:
                for b, im in enumerate(batch):
                    pseudo = select_pseudo_labels(out.probs.data[b], out.boxes.data[b], targets[b][1], past,
                                                  cfg.delta_bt, im.id, cfg.dedup_iou)
                    pseudo = pseudo[: cfg.n_proposals - len(targets[b][0])]
                    if pseudo:
                        n_pseudo += len(pseudo)
                        targets[b] = (targets[b][0] + [p.cls for p in pseudo],
                                      np.vstack([targets[b][1], np.array([p.box for p in pseudo])]))
            assignments = _match_all(out, targets, weights)
            loss = batched_detr_loss(out.probs, out.boxes, targets, assignments, weights, diagnostics)
            loss = loss * (1.0 / len(batch))
            lq = None
            if model.ranker is not None and cfg.lambda_q > 0:
                lq = batched_query_loss(out.alpha, [a.proposals for a in assignments])
            if lq is not None:
                total_lq += lq.item()
                loss = total_loss(loss, lq, cfg.lambda_q)
            opt.zero_grad()
            loss.backward()
            opt.step(masks)
            total += loss.item()
            n_batches += 1
        if cfg.test_mode:
            _check_snapshot(before, _snapshot(model, t))
        if log is not None:
            log.write({"phase": "task", "task": t, "epoch": epoch, "loss": total / n_batches,
                       "l_q": total_lq / n_batches, "n_pseudo_labels": n_pseudo},
                      (time.perf_counter() - start) * 1e3)
    if diagnostics.clamped_logs:
        logger.info("task %d: %d log-probabilities clamped at 1e-12", t, diagnostics.clamped_logs)
    model.trained_tasks = t
    return checkpoint_document(model)


# evaluation ----------------------------------------------------------------------


def _threads() -> int:
    try:
        return max(1, int(os.environ.get("MDCDET_THREADS", "1")))
    except ValueError:
        return 1


def _infer(model: ContinualModel, images: Sequence[SynthImage], visible, batch: int = 64):
    """Probabilities and boxes for every image, fanned out over threads."""
    chunks = [images[i : i + batch] for i in range(0, len(images), batch)]

    def run(chunk):
        with no_grad():
            if model.pretrained:
                out = model.forward_images(chunk, visible)
            else:
                out = model.detector.forward(np.stack([im.pixels for im in chunk]), visible=visible)
        return out.probs.data, out.boxes.data

    n = _threads()
    if n > 1 and len(chunks) > 1:
        # the feature cache is filled up front so worker threads only read it
        if model.pretrained:
            model.frozen_features(images)
        with ThreadPoolExecutor(max_workers=n) as pool:
            results = list(pool.map(run, chunks))
    else:
        results = [run(c) for c in chunks]
    return np.concatenate([r[0] for r in results]), np.concatenate([r[1] for r in results])


def class_average_precisions(
    model: ContinualModel, images: Sequence[SynthImage], classes: Sequence[int], visible
) -> dict[int, float | None]:
    probs, boxes = _infer(model, images, visible)
    ap = {}
    for c in classes:
        dets = [Detection(im.id, float(probs[i, p, c]), tuple(boxes[i, p]))
                for i, im in enumerate(images) for p in range(probs.shape[1])]
        gts = {im.id: [b for k, b in im.annotations if k == c] for im in images}
        ap[c] = average_precision(dets, gts, 0.5)
    return ap


def evaluate(model: ContinualModel, stream: TaskStream, t: int) -> EvalReport:
    """Evaluate the current model on the held-out images of tasks 1..t."""
    visible = visible_logit_set(t, model.class_splits)
    seen = [c for cs in model.class_splits[:t] for c in cs]
    images = [im for task in stream.tasks[:t] for im in task.eval]
    ap = class_average_precisions(model, images, seen, visible)
    map_p, map_c, map_a = continual_map(ap, t, model.class_splits)
    return EvalReport(
        task=t,
        map_p=map_p,
        map_c=map_c,
        map_a=map_a,
        per_class_ap={model.class_names[c]: ap[c] for c in seen},
        tasks_evaluated=list(range(1, t + 1)),
        config_hash=model.config.hash(),
        seed=model.config.seed,
    )


# checkpoints ----------------------------------------------------------------------


def checkpoint_document(model: ContinualModel) -> dict:
    params = {
        n: {"shape": list(p.data.shape), "values": p.data.ravel().tolist()}
        for n, p in sorted(model.all_parameters().items())
    }
    return {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "config": asdict(model.config),
        "config_hash": model.config.hash(),
        "seed": model.config.seed,
        "detector": model.detector.config_dict(),
        "class_names": model.class_names,
        "class_splits": model.class_splits,
        "trained_tasks": model.trained_tasks,
        "pretrained": model.pretrained,
        "pool": model.pool.state_dict() if model.pool is not None else None,
        "ranker": model.ranker is not None,
        "params": params,
    }


def save_checkpoint(doc: dict, path) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(json.dumps(doc, sort_keys=True), encoding="utf-8")
    os.replace(tmp, path)


def load_checkpoint(path) -> ContinualModel:
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    if doc.get("format") != CHECKPOINT_FORMAT or doc.get("version") != CHECKPOINT_VERSION:
        raise CompatibilityError(f"{path}: not a version-{CHECKPOINT_VERSION} checkpoint")
    return model_from_document(doc)


def model_from_document(doc: dict) -> ContinualModel:
    config = TrainConfig.from_dict(doc["config"])
    det = Detector(DetectorConfig(**doc["detector"]), seed=config.seed)
    values = {n: np.array(v["values"], dtype=np.float64).reshape(v["shape"]) for n, v in doc["params"].items()}
    for n, p in det.params.items():
        p.data = values[n]
    pool = ranker = None
    if doc["pool"] is not None:
        pool = MemoryPool(
            memory=Tensor(values["memory.units"], requires_grad=True),
            keys=Tensor(values["memory.keys"], requires_grad=True),
            attention=Tensor(values["memory.attention"], requires_grad=True),
            n_tasks=doc["pool"]["n_tasks"],
            frozen_chunks=set(doc["pool"]["frozen_chunks"]),
        )
    if doc["ranker"]:
        ranker = RankingHead(config.dim)
        ranker.weight.data = values["ranker.weight"]
        ranker.bias.data = values["ranker.bias"]
    model = ContinualModel(det, pool, ranker, list(doc["class_names"]), [list(c) for c in doc["class_splits"]],
                           config, doc["trained_tasks"], doc["pretrained"])
    if model.pretrained:
        det.freeze_backbone()
    return model


def check_compatible(model: ContinualModel, stream: TaskStream) -> None:
    if model.class_names != stream.class_names or model.class_splits != [t.classes for t in stream.tasks]:
        raise CompatibilityError("checkpoint class universe does not match the stream")


# full stream -----------------------------------------------------------------------


def run_stream(
    stream: TaskStream,
    config: TrainConfig,
    out_dir=None,
    max_tasks: int | None = None,
    pretrained: dict | None = None,
) -> list[EvalReport]:
    """Pretrain, then train and evaluate each task in order.

    ``pretrained`` may hold a checkpoint document of an already pretrained
    backbone (same seed and architecture) to skip the pretraining phase.
    """
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    log = JsonlLog(out / "train_log.jsonl" if out is not None else None, config.log_timing)
    model = ContinualModel.build(stream, config)
    if pretrained is not None:
        load_backbone(model, pretrained)
    else:
        pretrain_backbone(model, stream, log)
    n = len(stream.tasks) if max_tasks is None else min(max_tasks, len(stream.tasks))
    reports = []
    for t in range(1, n + 1):
        doc = train_task(model, stream, t, log)
        if out is not None:
            save_checkpoint(doc, out / f"ckpt_task{t}.json")
        report = evaluate(model, stream, t)
        logger.info("task %d: mAP@P=%s mAP@C=%s mAP@A=%s", t, report.map_p, report.map_c, report.map_a)
        reports.append(report)
    if out is not None:
        (out / "reports.json").write_text(json.dumps([r.to_dict() for r in reports], sort_keys=True, indent=2),
                                          encoding="utf-8")
    return reports


def backbone_document(model: ContinualModel) -> dict:
    """Detector weights right after pretraining, for reuse across runs."""
    return {n: model.detector.params[n].data.copy() for n in model.detector.params}


def load_backbone(model: ContinualModel, weights: dict) -> None:
    for n, p in model.detector.params.items():
        if weights[n].shape != p.data.shape:
            raise CompatibilityError(f"pretrained weight {n} has shape {weights[n].shape}, expected {p.data.shape}")
        p.data = weights[n].copy()
    model.detector.freeze_backbone()
    model.pretrained = True
    model._cache.clear()


def pretrain_only(stream: TaskStream, config: TrainConfig) -> dict:
    model = ContinualModel.build(stream, config)
    pretrain_backbone(model, stream)
    return backbone_document(model)
