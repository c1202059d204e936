"""SGD training loop, step learning-rate schedule, and evaluation.

The optimizer is SGD with momentum and L2-in-gradient weight decay;
decay applies to weight matrices and convolution kernels but not to
biases or batch-norm affine parameters. The schedule multiplies the
initial rate by a fixed factor every ``lr_decay_every`` epochs.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .backbones import BackboneSpec, build_backbone
from .data import SplitDataset, batches
from .errors import ConfigError, DivergenceError, FormatError
from .fileio import read_checkpoint, write_checkpoint
from .heads import HeadKind, build_head
from .tensor import Tensor, backward, no_grad, softmax_cross_entropy

LOG_HEADER = "epoch,lr,train_loss,test_top1"


@dataclass
class TrainConfig:
    """Optimizer, schedule, and model-selection settings."""

    lr0: float = 0.001
    momentum: float = 0.9
    weight_decay: float = 1e-4
    batch_size: int = 16
    epochs: int = 50
    lr_decay_factor: float = 0.1
    lr_decay_every: int = 15
    seed: int = 0
    head: HeadKind = HeadKind.QUIC
    backbone: BackboneSpec = field(default_factory=BackboneSpec)
    l2_normalize: bool = False
    a_init: str = "zeros"
    bn_enabled: bool = True
    bn_eps: float = 1e-5
    bn_momentum: float = 0.1
    bias_inside_bn: bool = False
    freeze_a: bool = False
    se_reduction: int = 16

    def validate(self):
        if self.lr0 <= 0:
            raise ConfigError(f"learning rate must be positive, got {self.lr0}")
        if not 0.0 <= self.momentum < 1.0:
            raise ConfigError(f"momentum must lie in [0, 1), got {self.momentum}")
        if self.weight_decay < 0:
            raise ConfigError(f"weight decay must be non-negative, got {self.weight_decay}")
        if not 0.0 < self.lr_decay_factor <= 1.0:
            raise ConfigError(f"lr decay factor must lie in (0, 1], got {self.lr_decay_factor}")
        if self.lr_decay_every < 1:
            raise ConfigError(f"lr decay interval must be >= 1, got {self.lr_decay_every}")
        if self.batch_size < 1:
            raise ConfigError(f"batch size must be >= 1, got {self.batch_size}")
        if self.epochs < 0:
            raise ConfigError(f"epochs must be >= 0, got {self.epochs}")
        if self.bn_eps <= 0:
            raise ConfigError(f"bn eps must be positive, got {self.bn_eps}")
        if not 0.0 <= self.bn_momentum <= 1.0:
            raise ConfigError(f"bn momentum must lie in [0, 1], got {self.bn_momentum}")
        self.backbone.validate()


def config_to_dict(cfg):
    d = asdict(cfg)
    d["head"] = HeadKind(cfg.head).value
    d["backbone"] = {"kind": cfg.backbone.kind,
                     "mlp_widths": list(cfg.backbone.mlp_widths),
                     "cnn_channels": list(cfg.backbone.cnn_channels)}
    return d


def config_from_dict(d, base=None):
    cfg = base if base is not None else TrainConfig()
    known = set(asdict(TrainConfig()).keys())
    unknown = set(d) - known
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    updates = dict(d)
    if "head" in updates:
        try:
            updates["head"] = HeadKind(updates["head"])
        except ValueError:
            raise ConfigError(f"unknown head kind {updates['head']!r}") from None
    if "backbone" in updates:
        bb = updates["backbone"]
        if isinstance(bb, str):
            updates["backbone"] = BackboneSpec(kind=bb)
        elif isinstance(bb, dict):
            spec = BackboneSpec(
                kind=bb.get("kind", "identity"),
                mlp_widths=tuple(bb.get("mlp_widths", BackboneSpec.mlp_widths)),
                cnn_channels=tuple(bb.get("cnn_channels", BackboneSpec.cnn_channels)))
            updates["backbone"] = spec
        elif not isinstance(bb, BackboneSpec):
            raise ConfigError(f"invalid backbone spec {bb!r}")
    return replace(cfg, **updates)


def lr_at_epoch(epoch, cfg):
    """Step schedule: ``lr0 * factor ** floor(epoch / every)``."""
    if epoch < 0:
        raise ConfigError(f"epoch must be >= 0, got {epoch}")
    return cfg.lr0 * cfg.lr_decay_factor ** (epoch // cfg.lr_decay_every)


def sgd_step(param, grad, velocity, lr, momentum, weight_decay):
    """One in-place SGD update; returns the updated velocity.

    ``g' = g + weight_decay * p``; ``v <- momentum * v + g'``;
    ``p <- p - lr * v``.
    """
    data = param.data if isinstance(param, Tensor) else param
    if not np.all(np.isfinite(grad)):
        raise DivergenceError("non-finite gradient in optimizer step")
    g = grad + weight_decay * data if weight_decay else grad
    velocity *= momentum
    velocity += g
    data -= np.asarray(lr * velocity, dtype=data.dtype)
    return velocity


class SGD:
    """Momentum SGD over named parameters with per-parameter decay flags."""

    def __init__(self, named_params, momentum=0.9, weight_decay=0.0):
        self.params = list(named_params)
        self.momentum = float(momentum)
        self.weight_decay = float(weight_decay)
        self.velocities = {name: np.zeros_like(t.data) for name, t, _ in self.params}

    def step(self, lr):
        for name, t, decay in self.params:
            if t.grad is None:
                continue
            wd = self.weight_decay if decay else 0.0
            try:
                sgd_step(t, t.grad, self.velocities[name], lr, self.momentum, wd)
            except DivergenceError as e:
                raise DivergenceError(f"{e} (parameter {name})") from None

    def zero_grads(self):
        for _, t, _ in self.params:
            t.grad = None


class Model:
    """A backbone and a head trained as one unit."""

    def __init__(self, backbone, head):
        self.backbone = backbone
        self.head = head

    def forward(self, x, mode="train"):
        z, fmap = self.backbone.forward(x, mode=mode)
        return self.head.forward(z, fmap=fmap, mode=mode)

    def named_params(self):
        return self.backbone.named_params() + self.head.named_params()

    def state_tensors(self):
        out = {name: t.data for name, t, _ in self.named_params()}
        out.update({name: arr for name, arr in self.head.named_buffers()})
        return out

    def snapshot(self):
        return {name: arr.copy() for name, arr in self.state_tensors().items()}

    def load_state(self, tensors):
        own = self.state_tensors()
        for name, current in own.items():
            if name not in tensors:
                raise FormatError(f"checkpoint is missing tensor {name!r}")
            arr = tensors[name]
            if tuple(arr.shape) != tuple(current.shape):
                raise FormatError(
                    f"checkpoint tensor {name!r} has shape {arr.shape}, "
                    f"expected {current.shape}")
        for name, t, _ in self.named_params():
            t.data[...] = tensors[name]
        self.head.load_buffers(tensors)


@dataclass
class Checkpoint:
    tensors: dict
    meta: dict

    def save(self, path):
        write_checkpoint(path, self.tensors, self.meta)

    @classmethod
    def load(cls, path):
        tensors, meta = read_checkpoint(path)
        return cls(tensors, meta)


def build_model(cfg, sample_shape, num_classes):
    """Construct backbone + head with one seeded init stream."""
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    backbone = build_backbone(cfg.backbone, sample_shape, rng=rng)
    head = build_head(cfg.head, backbone.out_features, num_classes,
                      fc_in_features=backbone.fc_in_features,
                      se_ratio=cfg.se_reduction, l2_normalize=cfg.l2_normalize,
                      a_init=cfg.a_init, bn_enabled=cfg.bn_enabled,
                      bn_eps=cfg.bn_eps, bn_momentum=cfg.bn_momentum,
                      bias_inside_bn=cfg.bias_inside_bn, rng=rng)
    return Model(backbone, head)


def model_meta(cfg, sample_shape, num_classes):
    return {"format": "quic-checkpoint", "config": config_to_dict(cfg),
            "sample_shape": list(sample_shape), "num_classes": int(num_classes)}


def model_from_checkpoint(ckpt):
    if not isinstance(ckpt, Checkpoint):
        ckpt = Checkpoint(*ckpt)
    meta = ckpt.meta
    if meta.get("format") != "quic-checkpoint":
        raise FormatError("not a model checkpoint (missing format marker)")
    cfg = config_from_dict(meta["config"])
    model = build_model(cfg, tuple(meta["sample_shape"]), meta["num_classes"])
    model.load_state(ckpt.tensors)
    return model, cfg


@dataclass
class EvalReport:
    """Top-1 accuracy, confusion counts, and most-confused class pairs."""

    top1: float
    confusion: np.ndarray
    top_confused_pairs: list

    def to_dict(self):
        return {"top1": self.top1,
                "confusion": self.confusion.tolist(),
                "top_confused_pairs": [[int(a), int(b), int(n)]
                                       for a, b, n in self.top_confused_pairs]}


def predict_logits(model, dataset, batch_size=256):
    chunks = []
    with no_grad():
        for batch in batches(dataset, batch_size):
            chunks.append(model.forward(batch.inputs, mode="eval").data)
    return np.concatenate(chunks, axis=0)


def evaluate(model, dataset, batch_size=256, top_pairs=10):
    """Argmax evaluation (ties resolve to the lowest class index)."""
    k = dataset.num_classes
    logits = predict_logits(model, dataset, batch_size)
    preds = logits.argmax(axis=1)
    confusion = np.zeros((k, k), dtype=np.int64)
    np.add.at(confusion, (dataset.labels, preds), 1)
    total = len(dataset)
    top1 = float(np.trace(confusion)) / total if total else float("nan")
    pairs = []
    for a in range(k):
        for b in range(a + 1, k):
            count = int(confusion[a, b] + confusion[b, a])
            if count:
                pairs.append((a, b, count))
    pairs.sort(key=lambda p: (-p[2], p[0], p[1]))
    if top_pairs is not None:
        pairs = pairs[:top_pairs]
    return EvalReport(top1, confusion, pairs)


@dataclass
class EpochLog:
    epoch: int
    lr: float
    train_loss: float
    test_top1: float


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    log: list
    model: Model


def check_compatibility(cfg, data):
    """Shape screening before any compute; raises ConfigError on mismatch."""
    sample_shape = data.sample_shape
    if cfg.backbone.kind in ("identity", "mlp") and len(sample_shape) != 1:
        raise ConfigError(
            f"backbone {cfg.backbone.kind!r} needs flat samples, got {sample_shape}")
    if cfg.backbone.kind == "tiny_cnn" and len(sample_shape) != 3:
        raise ConfigError(f"backbone 'tiny_cnn' needs image samples, got {sample_shape}")
    if data.num_classes < 2:
        raise ConfigError(f"need at least 2 classes, got {data.num_classes}")


def train(data: SplitDataset, cfg: TrainConfig) -> TrainResult:
    """Deterministic training run; returns checkpoint, per-epoch log, model.

    Batch norm runs in train mode during fitting and eval mode during the
    per-epoch test evaluation. A non-finite loss aborts with the last
    end-of-epoch checkpoint attached to the raised error.
    """
    cfg.validate()
    check_compatibility(cfg, data)
    train_set = data.train
    test_set = data.test
    model = build_model(cfg, data.sample_shape, data.num_classes)
    meta = model_meta(cfg, data.sample_shape, data.num_classes)
    trainable = [(name, t, decay) for name, t, decay in model.named_params()
                 if not (cfg.freeze_a and name == "head.A")]
    opt = SGD(trainable, momentum=cfg.momentum, weight_decay=cfg.weight_decay)

    log = []
    last_good = Checkpoint(model.snapshot(), meta)
    for epoch in range(cfg.epochs):
        lr = lr_at_epoch(epoch, cfg)
        loss_sum, n_batches = 0.0, 0
        for batch in batches(train_set, cfg.batch_size, shuffle_seed=cfg.seed, epoch=epoch):
            logits = model.forward(batch.inputs, mode="train")
            loss = softmax_cross_entropy(logits, batch.labels)
            loss_value = loss.item()
            if not math.isfinite(loss_value):
                raise DivergenceError(
                    f"loss became non-finite in epoch {epoch}", checkpoint=last_good)
            backward(loss)
            try:
                opt.step(lr)
            except DivergenceError as e:
                raise DivergenceError(str(e), checkpoint=last_good) from None
            opt.zero_grads()
            loss_sum += loss_value
            n_batches += 1
        train_loss = loss_sum / max(n_batches, 1)
        test_top1 = evaluate(model, test_set).top1 if len(test_set) else float("nan")
        log.append(EpochLog(epoch, lr, train_loss, test_top1))
        last_good = Checkpoint(model.snapshot(), meta)

    return TrainResult(last_good, log, model)


def log_to_csv(log):
    lines = [LOG_HEADER]
    for row in log:
        lines.append(f"{row.epoch},{row.lr:.12g},{row.train_loss:.12g},{row.test_top1:.12g}")
    return "\n".join(lines) + "\n"


def report_to_json(report):
    import json

    return json.dumps(report.to_dict(), sort_keys=True, indent=2) + "\n"


def confusion_to_csv(report):
    k = report.confusion.shape[0]
    lines = ["true\\pred," + ",".join(str(c) for c in range(k))]
    for a in range(k):
        lines.append(f"{a}," + ",".join(str(int(v)) for v in report.confusion[a]))
    return "\n".join(lines) + "\n"
