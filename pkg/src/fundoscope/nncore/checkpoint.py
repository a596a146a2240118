"""Binary checkpoint format.

Layout (all integers little-endian u32, payloads little-endian float32)::

    b"FNDS" | version | n_records
    n_records x ( layer_index | kind_tag | role_tag | ndim | dims... | payload )
    n_bn x      ( layer_index | channels | running_mean | running_var )  preceded by n_bn

A sidecar ``<name>.txt`` lists the layer specs for human inspection.
"""
from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .network import KINDS, Network

MAGIC = b"FNDS"
VERSION = 1
KIND_TAGS = {kind: i for i, kind in enumerate(KINDS)}
ROLE_TAGS = {"W": 0, "b": 1, "gamma": 2, "beta": 3}
ROLE_NAMES = {v: k for k, v in ROLE_TAGS.items()}


class CheckpointError(ValueError):
    pass


def _u32(*values):
    return struct.pack(f"<{len(values)}I", *values)


def save_checkpoint(network: Network, path) -> Path:
    path = Path(path)
    records = list(network.named_parameters())
    chunks = [MAGIC, _u32(VERSION, len(records))]
    for (idx, name), value in records:
        chunks.append(_u32(idx, KIND_TAGS[network.layers[idx].kind], ROLE_TAGS[name], value.ndim))
        chunks.append(_u32(*value.shape))
        chunks.append(np.ascontiguousarray(value, dtype="<f4").tobytes())
    bn = [(i, s) for i, s in enumerate(network.bn_state) if s is not None]
    chunks.append(_u32(len(bn)))
    for idx, s in bn:
        chunks.append(_u32(idx, s["mean"].size))
        chunks.append(s["mean"].astype("<f4").tobytes())
        chunks.append(s["var"].astype("<f4").tobytes())
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(b"".join(chunks))
    path.with_suffix(".txt").write_text(describe_layers(network))
    return path


def describe_layers(network: Network) -> str:
    lines = [f"input {'x'.join(map(str, network.input_shape))}"]
    for i, (spec, shape) in enumerate(zip(network.layers, network.shapes)):
        bits = [f"{i:3d} {spec.kind:<15s}"]
        if spec.kind in ("Conv2D", "MaxPool2D"):
            bits.append(f"k={spec.kernel_h}x{spec.kernel_w} s={spec.stride}")
        if spec.kind == "Conv2D":
            bits.append(f"out={spec.out_channels} pad={spec.padding}")
        if spec.kind == "MaxPool2D" and spec.ceil_mode:
            bits.append("ceil")
        if spec.kind == "FullyConnected":
            bits.append(f"out={spec.out_channels}")
        if spec.kind == "Dropout":
            bits.append(f"rate={spec.dropout_rate}")
        bits.append(f"-> {'x'.join(map(str, shape))}")
        lines.append(" ".join(bits))
    return "\n".join(lines) + "\n"


class _Reader:
    def __init__(self, data: bytes):
        self.data, self.pos = data, 0

    def take(self, n):
        if self.pos + n > len(self.data):
            raise CheckpointError("truncated checkpoint")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self, count=1):
        vals = struct.unpack(f"<{count}I", self.take(4 * count))
        return vals if count > 1 else vals[0]

    def f32(self, count):
        return np.frombuffer(self.take(4 * count), dtype="<f4").copy()


def read_checkpoint(path):
    """Parse a checkpoint into ``(records, bn)`` without needing the network."""
    r = _Reader(Path(path).read_bytes())
    if r.take(4) != MAGIC:
        raise CheckpointError(f"{path}: bad magic bytes")
    version = r.u32()
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    records = []
    for _ in range(r.u32()):
        idx, kind_tag, role, ndim = r.u32(4)
        shape = tuple(r.u32(ndim)) if ndim > 1 else ((r.u32(),) if ndim == 1 else ())
        records.append((idx, KINDS[kind_tag], ROLE_NAMES[role], r.f32(int(np.prod(shape))).reshape(shape)))
    bn = {}
    for _ in range(r.u32()):
        idx, ch = r.u32(2)
        bn[idx] = {"mean": r.f32(ch), "var": r.f32(ch)}
    return records, bn


def load_checkpoint(network: Network, path) -> Network:
    records, bn = read_checkpoint(path)
    state = network.state_dict()
    seen = set()
    for idx, kind, role, value in records:
        if idx >= len(network.layers) or network.layers[idx].kind != kind:
            raise CheckpointError(f"record for layer {idx} ({kind}) does not match the network")
        if role not in state["params"][idx] or state["params"][idx][role].shape != value.shape:
            raise CheckpointError(f"layer {idx} {role}: shape {value.shape} does not match the network")
        state["params"][idx][role] = value
        seen.add((idx, role))
    missing = {key for key, _ in network.named_parameters()} - seen
    if missing:
        raise CheckpointError(f"checkpoint lacks parameters {sorted(missing)}")
    for idx, stats in bn.items():
        if state["bn_state"][idx] is None or state["bn_state"][idx]["mean"].shape != stats["mean"].shape:
            raise CheckpointError(f"batch-norm stats for layer {idx} do not match the network")
        state["bn_state"][idx] = stats
    network.load_state_dict(state)
    return network
