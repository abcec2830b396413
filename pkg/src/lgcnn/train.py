"""Mini-batch training, evaluation, and checkpointing.

The loss is standard cross entropy on softmax outputs; its gradient is
taken at the pre-softmax logits ((probs - onehot) / batch), which keeps the
backward pass numerically stable. Per-class quality is the detection ratio
TP / (TP + FN), i.e. the diagonal of the confusion matrix over its row sum.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from io import BytesIO
from pathlib import Path

import numpy as np

from .model import parse_model_spec
from .network import Network, build
from .tensor import Tensor

__all__ = [
    "TrainConfig",
    "TrainReport",
    "EvalReport",
    "TrainingDiverged",
    "cross_entropy_loss",
    "make_optimizer",
    "train",
    "evaluate",
    "save_checkpoint",
    "load_checkpoint",
    "restore_checkpoint",
]

OPTIMIZERS = ("sgd", "sgd_momentum", "adam")


@dataclass
class TrainConfig:
    epochs: int = 30
    batch_size: int = 64
    learning_rate: float = 1e-3
    optimizer: str = "adam"
    momentum: float = 0.9
    beta2: float = 0.999
    adam_epsilon: float = 1e-8
    seed: int = 0
    checkpoint_every: int = 0  # 0: checkpoint only when training finishes

    def __post_init__(self):
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        # zero is allowed on purpose: a null update is a useful probe
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be >= 0")
        if self.optimizer not in OPTIMIZERS:
            raise ValueError(f"optimizer must be one of {OPTIMIZERS}")
        if not (0 <= self.momentum < 1) or not (0 <= self.beta2 < 1):
            raise ValueError("momentum terms must lie in [0, 1)")


@dataclass
class TrainReport:
    model: str
    seed: int
    epoch_loss: list[float] = field(default_factory=list)
    epoch_accuracy: list[float] = field(default_factory=list)

    @property
    def final_loss(self) -> float | None:
        return self.epoch_loss[-1] if self.epoch_loss else None


@dataclass
class EvalReport:
    class_ids: tuple[int, ...]           # label index -> original class id
    confusion: np.ndarray                # rows: true label, cols: predicted
    per_class_fdr: dict[int, float]      # class id -> TP / (TP + FN)
    mean_fdr: float
    sample_count: int

    def __post_init__(self):
        row_sums = self.confusion.sum(axis=1)
        if int(row_sums.sum()) != self.sample_count:
            raise ValueError("confusion row sums must equal the sample count")


class TrainingDiverged(RuntimeError):
    """Loss became non-finite; the last checkpoint (if any) is retained."""

    def __init__(self, epoch: int, batch: int, last_checkpoint: str | None):
        self.epoch = epoch
        self.batch = batch
        self.last_checkpoint = last_checkpoint
        where = f"epoch {epoch}, batch {batch}"
        kept = f"; last checkpoint: {last_checkpoint}" if last_checkpoint else ""
        super().__init__(f"training diverged (non-finite loss) at {where}{kept}")


# ---- loss --------------------------------------------------------------------


def cross_entropy_loss(probs: Tensor, labels) -> tuple[float, Tensor]:
    """Mean negative log-likelihood and its gradient at the logits.

    ``probs`` must be softmax output: rows summing to one. The returned
    gradient is (probs - onehot) / batch, valid at the pre-softmax logits.
    """
    p = probs.data
    if p.ndim != 2:
        raise ValueError(f"probabilities must be (batch, classes), got {probs.shape}")
    batch, classes = p.shape
    sums = p.sum(axis=1)
    if np.any(np.abs(sums - 1.0) > 1e-5):
        raise ValueError("probability rows must sum to 1 within 1e-5")
    y = np.asarray(labels)
    if y.shape != (batch,):
        raise ValueError(f"expected {batch} labels, got shape {y.shape}")
    if y.min() < 0 or y.max() >= classes:
        raise ValueError(
            f"labels must lie in [0, {classes}), got range [{y.min()}, {y.max()}]")
    picked = p[np.arange(batch), y]
    loss = float(-np.log(np.maximum(picked, 1e-12)).mean())
    grad = p.astype(np.float64) / batch
    grad[np.arange(batch), y] -= 1.0 / batch
    return loss, Tensor(grad.astype(p.dtype))


# ---- optimizers ---------------------------------------------------------------


class _Sgd:
    def __init__(self, params, lr):
        self.params = params
        self.lr = lr

    def step(self, grads):
        for p, g in zip(self.params, grads):
            p.data -= self.lr * g.data


class _SgdMomentum:
    def __init__(self, params, lr, momentum):
        self.params = params
        self.lr = lr
        self.momentum = momentum
        self.velocity = [np.zeros_like(p.data) for p in params]

    def step(self, grads):
        for p, g, v in zip(self.params, grads, self.velocity):
            v *= self.momentum
            v += g.data
            p.data -= self.lr * v


class _Adam:
    def __init__(self, params, lr, beta1, beta2, eps):
        self.params = params
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.m = [np.zeros_like(p.data) for p in params]
        self.v = [np.zeros_like(p.data) for p in params]
        self.t = 0

    def step(self, grads):
        self.t += 1
        b1c = 1.0 - self.beta1 ** self.t
        b2c = 1.0 - self.beta2 ** self.t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            m *= self.beta1
            m += (1 - self.beta1) * g.data
            v *= self.beta2
            v += (1 - self.beta2) * np.square(g.data)
            p.data -= self.lr * (m / b1c) / (np.sqrt(v / b2c) + self.eps)


def make_optimizer(params, cfg: TrainConfig):
    if cfg.optimizer == "sgd":
        return _Sgd(params, cfg.learning_rate)
    if cfg.optimizer == "sgd_momentum":
        return _SgdMomentum(params, cfg.learning_rate, cfg.momentum)
    return _Adam(params, cfg.learning_rate, cfg.momentum, cfg.beta2, cfg.adam_epsilon)


# ---- training loop -------------------------------------------------------------


def train(net: Network, dataset, cfg: TrainConfig,
          checkpoint_dir: str | Path | None = None) -> TrainReport:
    """Train in place; returns per-epoch mean loss and training accuracy.

    Deterministic for a fixed config seed: it alone drives the shuffle
    order. On divergence the last written checkpoint survives and the
    raised error names it.
    """
    n = len(dataset.labels)
    if n == 0:
        raise ValueError("dataset is empty")
    labels = np.asarray(dataset.labels)
    rng = np.random.default_rng(cfg.seed)
    optimizer = make_optimizer(net.params(), cfg)
    report = TrainReport(model=net.spec.name, seed=cfg.seed)
    ckpt_dir = Path(checkpoint_dir) if checkpoint_dir else None
    if ckpt_dir:
        ckpt_dir.mkdir(parents=True, exist_ok=True)
    last_ckpt: str | None = None

    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        total_loss = 0.0
        total_correct = 0
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            x = dataset.images.take(idx)
            y = labels[idx]
            probs = net.forward(x, train=True)
            loss, dlogits = cross_entropy_loss(probs, y)
            if not np.isfinite(loss):
                raise TrainingDiverged(epoch, start // cfg.batch_size, last_ckpt)
            net.zero_grads()
            net.backward(dlogits, from_logits=True)
            optimizer.step(net.grads())
            total_loss += loss * len(idx)
            total_correct += int((np.argmax(probs.data, axis=1) == y).sum())
        report.epoch_loss.append(total_loss / n)
        report.epoch_accuracy.append(total_correct / n)
        if ckpt_dir and cfg.checkpoint_every and (epoch + 1) % cfg.checkpoint_every == 0:
            last_ckpt = str(ckpt_dir / f"epoch-{epoch + 1:04d}.lgck")
            save_checkpoint(net, last_ckpt)

    if ckpt_dir:
        save_checkpoint(net, ckpt_dir / "final.lgck")
    return report


def evaluate(net: Network, dataset, batch_size: int = 256) -> EvalReport:
    """Confusion matrix and per-class detection ratios on a labeled set."""
    labels = np.asarray(dataset.labels)
    n = len(labels)
    classes = dataset.num_classes
    confusion = np.zeros((classes, classes), dtype=np.int64)
    for start in range(0, n, batch_size):
        x = dataset.images.take(np.arange(start, min(start + batch_size, n)))
        pred = net.predict(x)
        true = labels[start:start + batch_size]
        np.add.at(confusion, (true, pred), 1)
    row_sums = confusion.sum(axis=1)
    per_class: dict[int, float] = {}
    for label in range(classes):
        if row_sums[label] > 0:
            per_class[dataset.class_ids[label]] = (
                float(confusion[label, label]) / float(row_sums[label]))
    mean = float(np.mean(list(per_class.values()))) if per_class else 0.0
    return EvalReport(
        class_ids=tuple(dataset.class_ids),
        confusion=confusion,
        per_class_fdr=per_class,
        mean_fdr=mean,
        sample_count=int(n),
    )


# ---- checkpoints ----------------------------------------------------------------

_MAGIC = b"LGCK"
_VERSION = 1


def save_checkpoint(net: Network, path: str | Path) -> None:
    """Write parameters and running stats, keyed by the model's spec text."""
    spec_text = net.spec.canonical_text().encode("utf-8")
    spec_hash = net.spec.spec_hash().encode("ascii")
    tensors = net.state_tensors()
    buf = BytesIO()
    buf.write(_MAGIC)
    buf.write(struct.pack("<I", _VERSION))
    buf.write(spec_hash)
    buf.write(struct.pack("<Q", len(spec_text)))
    buf.write(spec_text)
    buf.write(struct.pack("<Q", len(tensors)))
    for t in tensors:
        t.write_into(buf)
    Path(path).write_bytes(buf.getvalue())


def _read_checkpoint(path: str | Path):
    raw = Path(path).read_bytes()
    buf = BytesIO(raw)

    def take(n, what):
        chunk = buf.read(n)
        if len(chunk) != n:
            raise ValueError(f"truncated checkpoint: missing {what}")
        return chunk

    if take(4, "magic") != _MAGIC:
        raise ValueError(f"{path} is not a checkpoint file")
    version = struct.unpack("<I", take(4, "version"))[0]
    if version != _VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    spec_hash = take(64, "spec hash").decode("ascii")
    text_len = struct.unpack("<Q", take(8, "spec length"))[0]
    spec_text = take(text_len, "spec text").decode("utf-8")
    spec = parse_model_spec(spec_text)
    if spec.spec_hash() != spec_hash:
        raise ValueError("checkpoint spec hash does not match its spec text")
    count = struct.unpack("<Q", take(8, "tensor count"))[0]
    tensors = [Tensor.read_from(buf) for _ in range(count)]
    if buf.read(1):
        raise ValueError("trailing bytes after checkpoint payload")
    return spec, tensors


def restore_checkpoint(net: Network, path: str | Path) -> None:
    """Load state into an existing network; it is untouched on any error."""
    spec, tensors = _read_checkpoint(path)
    if spec.spec_hash() != net.spec.spec_hash():
        raise ValueError(
            f"checkpoint was built for model {spec.name!r} "
            f"(hash {spec.spec_hash()[:12]}...), not {net.spec.name!r}")
    slots = net.state_tensors()
    if len(slots) != len(tensors):
        raise ValueError(
            f"checkpoint holds {len(tensors)} tensors, model needs {len(slots)}")
    for slot, value in zip(slots, tensors):
        if slot.shape != value.shape:
            raise ValueError(
                f"checkpoint tensor shape {value.shape} does not fit {slot.shape}")
    for slot, value in zip(slots, tensors):
        slot.data[...] = value.data


def load_checkpoint(path: str | Path) -> Network:
    """Rebuild the network a checkpoint describes and load its state."""
    spec, _ = _read_checkpoint(path)
    net = build(spec, seed=0)
    restore_checkpoint(net, path)
    return net
