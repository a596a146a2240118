"""Sequential network over a fixed layer vocabulary."""
from __future__ import annotations

import contextlib
import hashlib
from dataclasses import dataclass, field

import numpy as np

from . import functional as F

KINDS = ("Conv2D", "MaxPool2D", "FullyConnected", "BatchNorm", "ReLU", "Dropout", "SoftmaxOutput")


@dataclass
class LayerSpec:
    kind: str
    kernel_h: int = 0
    kernel_w: int = 0
    out_channels: int = 0
    stride: int = 1
    padding: int = 0
    ceil_mode: bool = False
    bias: bool = True
    dropout_rate: float = 0.0
    bn_epsilon: float = 1e-5
    bn_momentum: float = 0.9
    # row of the reference architecture table this layer realises, if any
    table_row: int | None = None
    note: str = ""

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown layer kind {self.kind!r}")
        if self.stride < 1:
            raise ValueError(f"stride must be >= 1, got {self.stride}")
        if self.kind in ("Conv2D", "MaxPool2D") and (self.kernel_h < 1 or self.kernel_w < 1):
            raise ValueError(f"{self.kind} kernel dims must be >= 1")
        if self.kind in ("Conv2D", "FullyConnected") and self.out_channels < 1:
            raise ValueError(f"{self.kind} needs out_channels >= 1")
        if not 0 <= self.dropout_rate < 1:
            raise ValueError(f"dropout_rate must be in [0, 1), got {self.dropout_rate}")
        if self.bn_epsilon <= 0 or not 0 < self.bn_momentum < 1:
            raise ValueError("bn_epsilon must be > 0 and bn_momentum in (0, 1)")


def conv(out_channels, k=3, stride=1, padding=1, bias=True, **kw):
    return LayerSpec("Conv2D", kernel_h=k, kernel_w=k, out_channels=out_channels,
                     stride=stride, padding=padding, bias=bias, **kw)


def maxpool(k=2, stride=2, ceil_mode=True, **kw):
    return LayerSpec("MaxPool2D", kernel_h=k, kernel_w=k, stride=stride, ceil_mode=ceil_mode, **kw)


def fc(out_channels, bias=True, **kw):
    return LayerSpec("FullyConnected", out_channels=out_channels, bias=bias, **kw)


def batchnorm(**kw):
    return LayerSpec("BatchNorm", **kw)


def relu():
    return LayerSpec("ReLU")


def dropout(rate=0.5):
    return LayerSpec("Dropout", dropout_rate=rate)


def softmax_output():
    return LayerSpec("SoftmaxOutput")


@dataclass
class Network:
    """Ordered layers plus their parameters and batch-norm running statistics.

    ``forward`` returns class logits; the terminal ``SoftmaxOutput`` layer is
    applied by :meth:`predict_proba` and folded into the loss during training.
    """

    layers: list
    input_shape: tuple
    dtype: type = np.float32
    seed: int = 0
    mode: str = "infer"
    params: list = field(init=False)
    bn_state: list = field(init=False)
    shapes: list = field(init=False)

    def __post_init__(self):
        self.input_shape = tuple(int(s) for s in self.input_shape)
        self.dtype = np.dtype(self.dtype).type
        init_rng = np.random.default_rng(self.seed)
        self.rng = np.random.default_rng([self.seed, 1])
        self.dropout_enabled = True
        self.freeze_bn_stats = False
        self._caches = None
        self.params, self.bn_state, self.shapes = [], [], []
        shape = self.input_shape
        for spec in self.layers:
            p, bn = {}, None
            if spec.kind == "Conv2D":
                if len(shape) != 3:
                    raise F.ShapeError(f"Conv2D needs a C×H×W input, got {shape}")
                c, h, w = shape
                fan_in = c * spec.kernel_h * spec.kernel_w
                p["W"] = init_rng.normal(0, np.sqrt(2 / fan_in),
                                         (spec.out_channels, c, spec.kernel_h, spec.kernel_w))
                if spec.bias:
                    p["b"] = np.zeros(spec.out_channels)
                oh = F.conv_output_size(h, spec.kernel_h, spec.stride, spec.padding)
                ow = F.conv_output_size(w, spec.kernel_w, spec.stride, spec.padding)
                if oh < 1 or ow < 1:
                    raise F.ShapeError(f"conv kernel {spec.kernel_h}x{spec.kernel_w} does not fit {shape}")
                shape = (spec.out_channels, oh, ow)
            elif spec.kind == "MaxPool2D":
                c, h, w = shape
                oh = F.pool_output_size(h, spec.kernel_h, spec.stride, spec.ceil_mode)
                ow = F.pool_output_size(w, spec.kernel_w, spec.stride, spec.ceil_mode)
                if oh < 1 or ow < 1:
                    raise F.ShapeError(f"pool kernel {spec.kernel_h} does not fit {shape}")
                shape = (c, oh, ow)
            elif spec.kind == "FullyConnected":
                fan_in = int(np.prod(shape))
                p["W"] = init_rng.normal(0, np.sqrt(2 / fan_in), (fan_in, spec.out_channels))
                if spec.bias:
                    p["b"] = np.zeros(spec.out_channels)
                shape = (spec.out_channels,)
            elif spec.kind == "BatchNorm":
                ch = shape[0]
                p["gamma"] = np.ones(ch)
                p["beta"] = np.zeros(ch)
                bn = {"mean": np.zeros(ch), "var": np.ones(ch)}
            self.params.append({k: v.astype(self.dtype) for k, v in p.items()})
            self.bn_state.append(None if bn is None else {k: v.astype(self.dtype) for k, v in bn.items()})
            self.shapes.append(shape)

    # ------------------------------------------------------------- modes
    def train(self):
        self.mode = "train"
        return self

    def eval(self):
        self.mode = "infer"
        return self

    @contextlib.contextmanager
    def deterministic(self):
        """Batch statistics without dropout or running-stat updates (gradient checks)."""
        saved = (self.mode, self.dropout_enabled, self.freeze_bn_stats)
        self.mode, self.dropout_enabled, self.freeze_bn_stats = "train", False, True
        try:
            yield self
        finally:
            self.mode, self.dropout_enabled, self.freeze_bn_stats = saved

    # ---------------------------------------------------------- introspection
    @property
    def output_dim(self) -> int:
        return int(np.prod(self.shapes[-1]))

    def parameter_count(self) -> int:
        return int(sum(v.size for p in self.params for v in p.values()))

    def shape_trace(self):
        return [(spec.kind, shape) for spec, shape in zip(self.layers, self.shapes)]

    def named_parameters(self):
        for i, p in enumerate(self.params):
            for name, value in p.items():
                yield (i, name), value

    def astype(self, dtype):
        self.dtype = np.dtype(dtype).type
        self.params = [{k: v.astype(self.dtype) for k, v in p.items()} for p in self.params]
        self.bn_state = [None if s is None else {k: v.astype(self.dtype) for k, v in s.items()}
                         for s in self.bn_state]
        return self

    def state_dict(self):
        return {
            "params": [{k: v.copy() for k, v in p.items()} for p in self.params],
            "bn_state": [None if s is None else {k: v.copy() for k, v in s.items()} for s in self.bn_state],
        }

    def load_state_dict(self, state):
        for i, (p, ref) in enumerate(zip(state["params"], self.params)):
            for k, v in ref.items():
                if p[k].shape != v.shape:
                    raise F.ShapeError(f"layer {i} {k}: checkpoint shape {p[k].shape} != {v.shape}")
        self.params = [{k: np.asarray(v, dtype=self.dtype).copy() for k, v in p.items()}
                       for p in state["params"]]
        self.bn_state = [None if s is None else {k: np.asarray(v, dtype=self.dtype).copy()
                                                 for k, v in s.items()}
                         for s in state["bn_state"]]

    # ------------------------------------------------------------- passes
    def forward(self, x, keep_cache=None):
        x = np.asarray(x, dtype=self.dtype)
        if x.shape[1:] != self.input_shape:
            raise F.ShapeError(f"network expects input {self.input_shape}, got {x.shape[1:]}")
        if keep_cache is None:
            keep_cache = self.mode == "train"
        caches = []
        for spec, p, bn in zip(self.layers, self.params, self.bn_state):
            cache = None
            if spec.kind == "Conv2D":
                x, cache = F.conv2d_forward(x, p["W"], p.get("b"), spec.stride, spec.padding)
            elif spec.kind == "MaxPool2D":
                x, cache = F.maxpool_forward(x, spec.kernel_h, spec.stride, spec.ceil_mode)
            elif spec.kind == "FullyConnected":
                x, cache = F.fc_forward(x, p["W"], p.get("b"))
            elif spec.kind == "BatchNorm":
                x, cache = F.batchnorm_forward(
                    x, p["gamma"], p["beta"], bn["mean"], bn["var"], self.mode,
                    spec.bn_momentum, spec.bn_epsilon, update_running=not self.freeze_bn_stats)
            elif spec.kind == "ReLU":
                x, cache = F.relu_forward(x)
            elif spec.kind == "Dropout":
                mode = self.mode if self.dropout_enabled else "infer"
                x, cache = F.dropout(x, spec.dropout_rate, mode, self.rng)
            caches.append(cache)
        self._caches = caches if keep_cache else None
        return x

    def backward(self, grad):
        """Backpropagate a logit gradient; returns per-layer gradient dicts."""
        if self._caches is None:
            raise ValueError("backward requires a preceding forward pass with caching")
        grads = [dict() for _ in self.layers]
        for i in range(len(self.layers) - 1, -1, -1):
            spec, p, cache = self.layers[i], self.params[i], self._caches[i]
            if spec.kind == "Conv2D":
                grad, gw, gb = F.conv2d_backward(grad, cache)
                grads[i]["W"] = gw
                if "b" in p:
                    grads[i]["b"] = gb
            elif spec.kind == "MaxPool2D":
                grad = F.maxpool_backward(grad, cache)
            elif spec.kind == "FullyConnected":
                grad, gw, gb = F.fc_backward(grad, cache, p["W"])
                grads[i]["W"] = gw
                if "b" in p:
                    grads[i]["b"] = gb
            elif spec.kind == "BatchNorm":
                grad, gg, gbeta = F.batchnorm_backward(grad, cache)
                grads[i]["gamma"], grads[i]["beta"] = gg, gbeta
            elif spec.kind == "ReLU":
                grad = F.relu_backward(grad, cache)
            elif spec.kind == "Dropout":
                grad = F.dropout_backward(grad, cache)
        self.input_grad = grad
        return grads

    def loss_and_grads(self, x, labels):
        logits = self.forward(x, keep_cache=True)
        loss, dlogits = F.softmax_cross_entropy(logits, labels)
        return loss, self.backward(dlogits)

    def loss(self, x, labels) -> float:
        return F.softmax_cross_entropy(self.forward(x, keep_cache=False), labels)[0]

    def loss_and_branches(self, x, labels):
        """Loss plus a digest of every ReLU gate and max-pool winner it used.

        Two evaluations with different digests lie on different smooth pieces
        of the loss, i.e. a kink was crossed between them.
        """
        loss = F.softmax_cross_entropy(self.forward(x, keep_cache=True), labels)[0]
        digest = hashlib.blake2b(digest_size=16)
        for spec, cache in zip(self.layers, self._caches):
            if spec.kind == "ReLU":
                digest.update(np.packbits(cache).tobytes())
            elif spec.kind == "MaxPool2D":
                digest.update(cache.argmax.tobytes())
        self._caches = None
        return loss, digest.digest()

    def predict_proba(self, x, batch_size=256):
        out = []
        for start in range(0, len(x), batch_size):
            out.append(F.softmax(self.forward(x[start:start + batch_size], keep_cache=False)))
        return np.concatenate(out) if out else np.zeros((0, self.output_dim), dtype=self.dtype)
