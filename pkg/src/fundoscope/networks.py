"""Local (patch lesion) and global (NPDR grade) architectures, training, inference heads."""
from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field

import numpy as np

from .nncore import Network, OptimizerState, gradient_check, sgd_step
from .nncore.functional import ShapeError, softmax
from .nncore.network import batchnorm, conv, dropout, fc, maxpool, relu, softmax_output

log = logging.getLogger(__name__)

LESION_CLASSES = ("normal", "microaneurysm", "hemorrhage", "exudate")
GRADES = ("normal", "mild NPDR", "moderate NPDR", "severe NPDR")

# Rows of the reference architecture tables: (row, type, kernel spec, stride).
LOCAL_TABLE = [
    (0, "input", "...", "..."),
    (1, "convolution", "3 × 3 × 64", "1"),
    (2, "convolution", "3 × 3 × 128", "1"),
    (3, "max-pooling", "2 × 2", "2"),
    (4, "convolution", "3 × 3 × 128", "1"),
    (5, "max-pooling", "2 × 2", "2"),
    (6, "convolution", "3 × 3 × 256", "1"),
    (7, "fully connected", "1 × 1 × 512", "..."),
    (8, "fully connected", "1 × 1 × 1024", "..."),
    (9, "soft-max", "...", "..."),
]

GLOBAL_TABLE = [(0, "input", "...", "...")]
for _i, _ch in enumerate((32, 32, 64, 64, 128, 128, 256, 256, 512, 512)):
    GLOBAL_TABLE.append((2 * _i + 1, "convolution", f"3 × 3 × {_ch}", "1"))
    if _i < 9:
        GLOBAL_TABLE.append((2 * _i + 2, "max-pooling", "2 × 2", "2"))
GLOBAL_TABLE += [
    (20, "fully connected", "1 × 1 × 1024", "..."),
    (21, "fully connected", "1 × 1 × 1024", "..."),
    (22, "fully connected", "1 × 1 × 4", "..."),
    (23, "soft-max", "...", "..."),
]

CLASSIFIER_NOTE = "inserted 1024→4 linear classifier (no table row; softmax needs class logits)"
CEIL_POOL_NOTE = "ceil-mode pass-through: input is already 1×1 at 256×256"


def _scaled(width, divisor):
    return max(1, width // divisor)


def _conv_block(out_channels, row, divisor):
    return [conv(_scaled(out_channels, divisor), bias=False, table_row=row), batchnorm(), relu()]


def _fc_block(width, row, divisor, dropout_rate):
    return [fc(_scaled(width, divisor), bias=False, table_row=row), batchnorm(), relu(),
            dropout(dropout_rate)]


def local_layers(width_divisor=1, dropout_rate=0.5, n_classes=4):
    d = width_divisor
    return [
        *_conv_block(64, 1, d),
        *_conv_block(128, 2, d),
        maxpool(table_row=3),
        *_conv_block(128, 4, d),
        maxpool(table_row=5),
        *_conv_block(256, 6, d),
        *_fc_block(512, 7, d, dropout_rate),
        *_fc_block(1024, 8, d, dropout_rate),
        fc(n_classes, note=CLASSIFIER_NOTE),
        softmax_output(),
    ]


def build_local(h=64, width_divisor=1, dropout_rate=0.5, dtype=np.float32, seed=0, channels=3):
    """Patch classifier over 4 lesion classes (conv64-conv128-pool-conv128-pool-conv256-fc512-fc1024)."""
    if h % 4:
        raise ValueError(f"patch side {h} must be divisible by 4 (two stride-2 pools)")
    layers = local_layers(width_divisor, dropout_rate)
    layers[-1].table_row = 9
    return Network(layers, (channels, h, h), dtype=dtype, seed=seed)


def global_layers(width_divisor=1, dropout_rate=0.5, n_classes=4, input_size=256):
    d = width_divisor
    layers = []
    size = input_size
    for i, ch in enumerate((32, 32, 64, 64, 128, 128, 256, 256, 512, 512)):
        layers += _conv_block(ch, 2 * i + 1, d)
        if i < 9:
            note = CEIL_POOL_NOTE if size == 1 and input_size == 256 else ""
            layers.append(maxpool(ceil_mode=True, table_row=2 * i + 2, note=note))
            size = max(1, -(-size // 2))
    layers += _fc_block(1024, 20, d, dropout_rate)
    layers += _fc_block(1024, 21, d, dropout_rate)
    layers += [fc(n_classes, table_row=22), softmax_output()]
    layers[-1].table_row = 23
    return layers


def build_global(input_size=256, width_divisor=1, dropout_rate=0.5, dtype=np.float32, seed=0, channels=3,
                 n_classes=4):
    """Grading network: ten same-padded 3×3 convs interleaved with nine ceil-mode pools, fc1024-fc1024-fc4."""
    if input_size < 1:
        raise ValueError("input_size must be positive")
    layers = global_layers(width_divisor, dropout_rate, n_classes, input_size=input_size)
    return Network(layers, (channels, input_size, input_size), dtype=dtype, seed=seed)


def miniature(kind, seed=0, size=32, width_divisor=8):
    """Float64 narrow copy of the local or global architecture for gradient checking."""
    if kind == "local":
        return build_local(size, width_divisor, dtype=np.float64, seed=seed)
    if kind == "global":
        return build_global(size, width_divisor, dtype=np.float64, seed=seed)
    raise ValueError(f"kind must be 'local' or 'global', got {kind!r}")


def check_miniature(kind, seed=0, batch=8, max_entries=6, size=32, width_divisor=8, tolerance=1e-5):
    """Finite-difference check of one miniature network on random inputs and labels."""
    net = miniature(kind, seed, size, width_divisor)
    rng = np.random.default_rng([seed, 3])
    x = rng.normal(size=(batch,) + net.input_shape)
    labels = rng.integers(0, net.output_dim, batch)
    return gradient_check(net, x, labels, tolerance=tolerance, max_entries=max_entries, seed=seed)


def describe(network: Network, table=None):
    """Layer table grouped by reference row; rows absent from the table are flagged."""
    rows = [{"row": 0, "type": "input", "kernel": "...", "stride": "...",
             "shape": "×".join(map(str, network.input_shape)), "note": ""}]
    kinds = {"Conv2D": "convolution", "MaxPool2D": "max-pooling",
             "FullyConnected": "fully connected", "SoftmaxOutput": "soft-max"}
    for spec, shape in zip(network.layers, network.shapes):
        if spec.kind not in kinds:
            if rows and spec.kind in ("BatchNorm", "ReLU", "Dropout"):
                rows[-1].setdefault("extras", []).append(spec.kind)
                rows[-1]["shape"] = "×".join(map(str, shape))
            continue
        if spec.kind == "Conv2D":
            kernel, stride = f"{spec.kernel_h} × {spec.kernel_w} × {spec.out_channels}", str(spec.stride)
        elif spec.kind == "MaxPool2D":
            kernel, stride = f"{spec.kernel_h} × {spec.kernel_w}", str(spec.stride)
        elif spec.kind == "FullyConnected":
            kernel, stride = f"1 × 1 × {spec.out_channels}", "..."
        else:
            kernel, stride = "...", "..."
        rows.append({"row": spec.table_row, "type": kinds[spec.kind], "kernel": kernel,
                     "stride": stride, "shape": "×".join(map(str, shape)), "note": spec.note})
    return rows


def format_table(rows, title=""):
    lines = [title] if title else []
    lines.append(f"{'row':>4} {'type':<16} {'kernel':<14} {'stride':<6} {'output':<12} extras / note")
    for r in rows:
        row = "+" if r["row"] is None else str(r["row"])
        extra = "+".join(r.get("extras", []))
        note = r["note"]
        flag = f"[DEVIATION] {note}" if note else ""
        lines.append(f"{row:>4} {r['type']:<16} {r['kernel']:<14} {r['stride']:<6} {r['shape']:<12} "
                     f"{extra} {flag}".rstrip())
    return "\n".join(lines)


# ------------------------------------------------------------------ training

class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainConfig:
    epochs: int = 15
    batch_size: int = 32
    learning_rate: float = 0.01
    momentum: float = 0.9
    lr_decay: float = 1.0  # multiplicative factor applied after every epoch
    seed: int = 0
    patience: int = 0  # 0 disables early stopping
    class_balance: str = "oversample"  # or "none"

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 2:
            raise ValueError("epochs must be >= 1 and batch_size >= 2")
        if self.learning_rate < 0 or not 0 <= self.momentum < 1 or self.lr_decay <= 0:
            raise ValueError("invalid learning-rate / momentum / decay")
        if self.class_balance not in ("oversample", "none"):
            raise ValueError(f"unknown class_balance {self.class_balance!r}")


@dataclass
class TrainHistory:
    train_loss: list = field(default_factory=list)
    val_loss: list = field(default_factory=list)
    val_accuracy: list = field(default_factory=list)
    wall_time: list = field(default_factory=list)
    best_epoch: int = -1

    def __len__(self):
        return len(self.train_loss)

    def to_csv(self) -> str:
        rows = ["epoch,train_loss,val_loss,val_accuracy,wall_time"]
        for i in range(len(self)):
            rows.append(f"{i + 1},{self.train_loss[i]!r},{self.val_loss[i]!r},"
                        f"{self.val_accuracy[i]!r},{self.wall_time[i]:.3f}")
        return "\n".join(rows) + "\n"

    def metrics(self):
        """History without timings (deterministic under a fixed seed)."""
        return {"train_loss": self.train_loss, "val_loss": self.val_loss,
                "val_accuracy": self.val_accuracy, "best_epoch": self.best_epoch}


def _epoch_order(labels, rng, balance):
    if balance == "oversample":
        classes, counts = np.unique(labels, return_counts=True)
        target = counts.max()
        idx = []
        for cls in classes:
            members = np.flatnonzero(labels == cls)
            extra = rng.choice(members, target - len(members)) if target > len(members) else []
            idx.append(np.concatenate([members, extra]).astype(int))
        order = np.concatenate(idx)
    else:
        order = np.arange(len(labels))
    return rng.permutation(order)


def evaluate_loss_accuracy(network, x, y, batch_size=256):
    network.eval()
    probs = network.predict_proba(x, batch_size)
    eps = np.finfo(probs.dtype).tiny
    loss = float(-np.mean(np.log(np.maximum(probs[np.arange(len(y)), y], eps))))
    acc = float(np.mean(probs.argmax(axis=1) == y))
    return loss, acc


def train(network: Network, train_x, train_y, val_x, val_y, config: TrainConfig, progress=None):
    """Mini-batch momentum SGD; keeps the best-validation-accuracy weights.

    Returns ``(checkpoint_state, history)`` and leaves the network holding the
    best state in inference mode.
    """
    train_y = np.asarray(train_y)
    val_y = np.asarray(val_y)
    if len(train_x) == 0 or len(val_x) == 0:
        raise ValueError("training and validation sets must be non-empty")
    rng = np.random.default_rng([config.seed, 7])
    network.rng = np.random.default_rng([config.seed, 11])
    opt = OptimizerState(config.learning_rate, config.momentum)
    history = TrainHistory()
    best_state, best_acc, stale = network.state_dict(), -1.0, 0
    for epoch in range(config.epochs):
        t0 = time.perf_counter()
        network.train()
        order = _epoch_order(train_y, rng, config.class_balance)
        total, seen = 0.0, 0
        for start in range(0, len(order), config.batch_size):
            batch = order[start:start + config.batch_size]
            if len(batch) < 2:  # batch-norm needs two samples
                continue
            loss, grads = network.loss_and_grads(train_x[batch], train_y[batch])
            if not np.isfinite(loss):
                raise TrainingDiverged(f"non-finite loss at epoch {epoch + 1}, batch offset {start}")
            sgd_step(network, grads, opt)
            total += loss * len(batch)
            seen += len(batch)
        val_loss, val_acc = evaluate_loss_accuracy(network, val_x, val_y)
        if not np.isfinite(val_loss):
            raise TrainingDiverged(f"non-finite validation loss at epoch {epoch + 1}")
        history.train_loss.append(total / max(seen, 1))
        history.val_loss.append(val_loss)
        history.val_accuracy.append(val_acc)
        history.wall_time.append(time.perf_counter() - t0)
        log.info("epoch %d/%d loss %.4f val_loss %.4f val_acc %.4f", epoch + 1, config.epochs,
                 history.train_loss[-1], val_loss, val_acc)
        if progress:
            progress(epoch, history)
        if val_acc > best_acc:
            best_acc, best_state, stale = val_acc, network.state_dict(), 0
            history.best_epoch = epoch + 1
        else:
            stale += 1
            if config.patience and stale >= config.patience:
                break
        opt.learning_rate *= config.lr_decay
    network.load_state_dict(best_state)
    network.eval()
    return best_state, history


# ------------------------------------------------------------------ inference

def _argmax_low(probs):
    # np.argmax already returns the first (lowest-index) maximum
    return np.argmax(probs, axis=-1)


def infer_patches(network: Network, patches, batch_size=256):
    """Batch path: ``(labels, max_probabilities, probabilities)``."""
    patches = np.asarray(patches)
    if patches.shape[1:] != network.input_shape:
        raise ShapeError(f"expected patches of shape {network.input_shape}, got {patches.shape[1:]}")
    network.eval()
    probs = network.predict_proba(patches, batch_size)
    labels = _argmax_low(probs)
    return labels, probs[np.arange(len(probs)), labels], probs


def infer_patch(network: Network, patch):
    """Single patch -> ``(label, probability)``; ties resolve to the lower class."""
    patch = np.asarray(patch)
    if patch.shape != network.input_shape:
        raise ShapeError(f"expected a patch of shape {network.input_shape}, got {patch.shape}")
    labels, p, _ = infer_patches(network, patch[None])
    return int(labels[0]), float(p[0])


def grade(network: Network, weighted_image):
    """NPDR grade 0–3 and the 4-way probability vector for one weighted image."""
    img = np.asarray(weighted_image)
    if img.shape != network.input_shape:
        raise ShapeError(f"grading network expects {network.input_shape}, got {img.shape}")
    network.eval()
    probs = softmax(network.forward(img[None], keep_cache=False))[0]
    return int(_argmax_low(probs)), probs


def grade_batch(network: Network, images, batch_size=64):
    network.eval()
    probs = network.predict_proba(np.asarray(images), batch_size)
    return _argmax_low(probs), probs


def binary_lesion_score(patch_probs):
    """Lesion-vs-normal score ``1 - P(normal)``."""
    p = np.asarray(patch_probs, dtype=float)
    return 1.0 - p[..., 0]


def referable_score(probs):
    """Referable (moderate or worse) score ``P(grade 2) + P(grade 3)``."""
    p = np.asarray(probs, dtype=float)
    return p[..., 2] + p[..., 3]
