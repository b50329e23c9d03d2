"""Encoder f, projection head g and linear head l, plus checkpoint I/O."""

from __future__ import annotations

import hashlib
import json
import struct
import zlib
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Dict, Iterator, Optional, Tuple

import numpy as np

from . import tensor_core as tc

ENCODER, PROJECTOR, HEAD, BUFFER = "theta", "pi", "psi", "buffer"
TRAINABLE_TAGS = (ENCODER, PROJECTOR, HEAD)

CHECKPOINT_MAGIC = b"ROCL"
CHECKPOINT_VERSION = 1
BN_MOMENTUM = 0.9


class CheckpointError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    encoder_arch: str = "small_cnn"  # "small_cnn" | "mlp"
    channels: Tuple[int, ...] = (16, 32, 64)  # small_cnn channel plan, one conv block each
    widths: Tuple[int, ...] = (256,)  # mlp hidden widths
    input_dims: Tuple[int, int, int] = (3, 32, 32)
    feature_dim: int = 64
    projection_dim: int = 128
    num_classes: int = 10

    def __post_init__(self):
        object.__setattr__(self, "channels", tuple(int(c) for c in self.channels))
        object.__setattr__(self, "widths", tuple(int(w) for w in self.widths))
        object.__setattr__(self, "input_dims", tuple(int(d) for d in self.input_dims))
        if self.encoder_arch not in ("small_cnn", "mlp"):
            raise ValueError(f"unknown encoder_arch {self.encoder_arch!r}")
        dims = (*self.input_dims, self.feature_dim, self.projection_dim, self.num_classes)
        if len(self.input_dims) != 3 or any(d <= 0 for d in dims):
            raise ValueError("all model dimensions must be positive")
        if self.encoder_arch == "small_cnn":
            if not self.channels or any(c <= 0 for c in self.channels):
                raise ValueError("small_cnn needs a non-empty positive channel plan")
            if self.feature_dim != self.channels[-1]:
                raise ValueError("small_cnn feature_dim must equal the last channel count")
            _, h, w = self.input_dims
            blocks = len(self.channels)
            if h % 2 ** blocks or w % 2 ** blocks:
                raise ValueError(f"input {h}x{w} is not divisible by 2^{blocks} for pooling")

    def to_dict(self) -> Dict[str, Any]:
        d = asdict(self)
        return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}

    @classmethod
    def from_dict(cls, d: Dict[str, Any]) -> "ModelConfig":
        return cls(**{k: tuple(v) if isinstance(v, list) else v for k, v in d.items()})


@dataclass
class ModelParams:
    """Named tensors for f (theta), g (pi), l (psi) and BN running statistics."""

    tensors: Dict[str, np.ndarray]
    buffers: Dict[str, np.ndarray]
    tags: Dict[str, str]

    def copy(self) -> "ModelParams":
        return ModelParams({k: v.copy() for k, v in self.tensors.items()},
                           {k: v.copy() for k, v in self.buffers.items()}, dict(self.tags))

    def names(self, *tags: str) -> list:
        return [n for n in self.tensors if self.tags[n] in tags]

    def bindings(self) -> Dict[str, np.ndarray]:
        return {**self.tensors, **self.buffers}

    def items(self) -> Iterator[Tuple[str, np.ndarray]]:
        yield from self.tensors.items()
        yield from self.buffers.items()

    def fingerprint(self, *tags: str) -> str:
        """SHA-256 over the raw bytes of every tensor carrying one of ``tags``."""
        h = hashlib.sha256()
        for name, arr in self.items():
            tag = self.tags[name]
            if tags and tag not in tags:
                continue
            h.update(name.encode())
            h.update(np.ascontiguousarray(arr).tobytes())
        return h.hexdigest()


def _param_layout(config: ModelConfig):
    """(name, tag, shape, kind) for every tensor, in checkpoint order."""
    layout = []
    c, hgt, wid = config.input_dims
    if config.encoder_arch == "small_cnn":
        prev = c
        for i, ch in enumerate(config.channels):
            layout.append((f"enc.conv{i}.w", ENCODER, (ch, prev, 3, 3), "weight"))
            layout.append((f"enc.bn{i}.gamma", ENCODER, (ch,), "bn_scale"))
            layout.append((f"enc.bn{i}.beta", ENCODER, (ch,), "bn_shift"))
            prev = ch
    else:
        prev = c * hgt * wid
        for i, width in enumerate((*config.widths, config.feature_dim)):
            layout.append((f"enc.fc{i}.w", ENCODER, (prev, width), "weight"))
            layout.append((f"enc.fc{i}.b", ENCODER, (width,), "bias"))
            prev = width
    f, p = config.feature_dim, config.projection_dim
    layout += [
        ("proj.fc1.w", PROJECTOR, (f, f), "weight"),
        ("proj.fc1.b", PROJECTOR, (f,), "bias"),
        ("proj.fc2.w", PROJECTOR, (f, p), "weight"),
        ("proj.fc2.b", PROJECTOR, (p,), "bias"),
        ("head.w", HEAD, (f, config.num_classes), "weight"),
        ("head.b", HEAD, (config.num_classes,), "bias"),
    ]
    if config.encoder_arch == "small_cnn":
        for i, ch in enumerate(config.channels):
            layout.append((f"enc.bn{i}.running_mean", BUFFER, (ch,), "running_mean"))
            layout.append((f"enc.bn{i}.running_var", BUFFER, (ch,), "running_var"))
    return layout


def is_bn_param(name: str) -> bool:
    return ".bn" in name


def init_params(config: ModelConfig, seed: int) -> ModelParams:
    """He (fan-in) normal weights, zero biases, BN scale 1 / shift 0."""
    rng = np.random.default_rng(seed)
    dtype = tc.get_dtype()
    tensors, buffers, tags = {}, {}, {}
    for name, tag, shape, kind in _param_layout(config):
        if kind == "weight":
            fan_in = int(np.prod(shape[1:])) if len(shape) == 4 else shape[0]
            arr = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)
        elif kind in ("bn_scale", "running_var"):
            arr = np.ones(shape)
        else:
            arr = np.zeros(shape)
        arr = arr.astype(dtype)
        tags[name] = tag
        if tag == BUFFER:
            buffers[name] = arr
        else:
            tensors[name] = arr
    return ModelParams(tensors, buffers, tags)


# ---------------------------------------------------------------------------
# graph construction
# ---------------------------------------------------------------------------


def _leaf(g: tc.Graph, name: str) -> tc.Var:
    return g.var(g.leaves[name]) if name in g.leaves else g.leaf(name)


def build_encoder(g: tc.Graph, x: tc.Var, config: ModelConfig) -> tc.Var:
    if config.encoder_arch == "mlp":
        c, hgt, wid = config.input_dims
        h = x.reshape(-1, c * hgt * wid)
        for i in range(len(config.widths) + 1):
            h = (h @ _leaf(g, f"enc.fc{i}.w") + _leaf(g, f"enc.fc{i}.b")).relu()
        return h
    h = x
    for i, ch in enumerate(config.channels):
        h = g.conv2d(h, _leaf(g, f"enc.conv{i}.w"), stride=1, padding=1)
        h = g.batch_norm(h, _leaf(g, f"enc.bn{i}.gamma"), _leaf(g, f"enc.bn{i}.beta"),
                         _leaf(g, f"enc.bn{i}.running_mean"), _leaf(g, f"enc.bn{i}.running_var"),
                         name=f"enc.bn{i}")
        h = h.relu()
        # 2x2 average pool as reshape + mean
        n_h = config.input_dims[1] // 2 ** (i + 1)
        n_w = config.input_dims[2] // 2 ** (i + 1)
        h = h.reshape(-1, ch, n_h, 2, n_w, 2).mean(axis=(3, 5))
    return h.mean(axis=(2, 3))


def build_projector(g: tc.Graph, h: tc.Var) -> tc.Var:
    hidden = (h @ _leaf(g, "proj.fc1.w") + _leaf(g, "proj.fc1.b")).relu()
    return hidden @ _leaf(g, "proj.fc2.w") + _leaf(g, "proj.fc2.b")


def build_head(g: tc.Graph, h: tc.Var) -> tc.Var:
    return h @ _leaf(g, "head.w") + _leaf(g, "head.b")


def build_network(g: tc.Graph, x: tc.Var, config: ModelConfig) -> Dict[str, tc.Var]:
    """Append f, g and l on top of ``x``; returns {"h", "z", "logits"}."""
    h = build_encoder(g, x, config)
    return {"h": h, "z": build_projector(g, h), "logits": build_head(g, h)}


def _check_batch(config: ModelConfig, batch: np.ndarray) -> None:
    if batch.ndim != 4 or tuple(batch.shape[1:]) != config.input_dims:
        raise tc.ShapeError(f"batch shape {batch.shape} does not match input dims {config.input_dims}")


def run_network(params: ModelParams, config: ModelConfig, batch: np.ndarray, outputs=("h",),
                mode: str = "eval") -> Tuple[Dict[str, np.ndarray], Dict[str, Tuple[np.ndarray, np.ndarray]]]:
    batch = np.asarray(batch)
    _check_batch(config, batch)
    g = tc.Graph()
    nodes = build_network(g, g.leaf("x"), config)
    ev = tc.evaluate(g, {**params.bindings(), "x": batch}, [nodes[o] for o in outputs], mode=mode)
    return {o: ev[nodes[o]] for o in outputs}, ev.bn_stats


def encode(params: ModelParams, config: ModelConfig, batch: np.ndarray, mode: str = "eval") -> np.ndarray:
    """Penultimate features h = f(x), shape [m, feature_dim]."""
    return run_network(params, config, batch, ("h",), mode)[0]["h"]


def project(params: ModelParams, config: ModelConfig, h: np.ndarray) -> np.ndarray:
    """Raw projector output z = g(h); cosine similarity normalises later."""
    g = tc.Graph()
    z = build_projector(g, g.leaf("h"))
    return tc.forward(g, {**params.tensors, "h": h}, [z])[z.id]


def classify(params: ModelParams, config: ModelConfig, h: np.ndarray) -> np.ndarray:
    g = tc.Graph()
    logits = build_head(g, g.leaf("h"))
    return tc.forward(g, {**params.tensors, "h": h}, [logits])[logits.id]


def update_running_stats(params: ModelParams, bn_stats: Dict[str, Tuple[np.ndarray, np.ndarray]],
                         momentum: float = BN_MOMENTUM) -> None:
    for name, (mean, var) in bn_stats.items():
        rm, rv = params.buffers[f"{name}.running_mean"], params.buffers[f"{name}.running_var"]
        rm[...] = momentum * rm + (1 - momentum) * mean
        rv[...] = momentum * rv + (1 - momentum) * var


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------


def _dump_json(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode("utf-8")


def checkpoint_bytes(params: ModelParams, config: ModelConfig, metadata: Optional[Dict[str, Any]] = None) -> bytes:
    entries, payload = [], []
    for name, tag, shape, _ in _param_layout(config):
        arr = params.buffers[name] if tag == BUFFER else params.tensors[name]
        if tuple(arr.shape) != shape:
            raise CheckpointError(f"{name} has shape {arr.shape}, config expects {shape}")
        le = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
        entries.append({"name": name, "tag": tag, "dtype": le.dtype.str, "shape": list(shape)})
        payload.append(np.ascontiguousarray(le).tobytes())
    header = _dump_json({"config": config.to_dict(), "metadata": metadata or {}, "tensors": entries})
    body = b"".join(payload)
    return b"".join([
        CHECKPOINT_MAGIC,
        struct.pack("<I", CHECKPOINT_VERSION),
        struct.pack("<I", len(header)),
        header,
        body,
        struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF),
    ])


def save_checkpoint(params: ModelParams, config: ModelConfig, metadata: Optional[Dict[str, Any]], path) -> None:
    data = checkpoint_bytes(params, config, metadata)
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(data)
    tmp.replace(path)


def parse_checkpoint(data: bytes) -> Tuple[ModelParams, ModelConfig, Dict[str, Any]]:
    if len(data) < 12 or data[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError("not a checkpoint: bad magic bytes")
    (version,) = struct.unpack_from("<I", data, 4)
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version} (expected {CHECKPOINT_VERSION})")
    (hlen,) = struct.unpack_from("<I", data, 8)
    if 12 + hlen > len(data):
        raise CheckpointError("truncated checkpoint header")
    try:
        header = json.loads(data[12:12 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"corrupt checkpoint header: {exc}") from None
    config = ModelConfig.from_dict(header["config"])
    body = data[12 + hlen:-4]
    if len(data) < 12 + hlen + 4:
        raise CheckpointError("truncated checkpoint payload")
    expected = [(n, t, s) for n, t, s, _ in _param_layout(config)]
    listed = [(e["name"], e["tag"], tuple(e["shape"])) for e in header["tensors"]]
    if listed != expected:
        raise CheckpointError("shape table inconsistent with the model config")
    sizes = [int(np.prod(e["shape"])) * np.dtype(e["dtype"]).itemsize for e in header["tensors"]]
    if sum(sizes) != len(body):
        raise CheckpointError(f"payload is {len(body)} bytes, shape table needs {sum(sizes)}")
    (crc,) = struct.unpack("<I", data[-4:])
    if zlib.crc32(body) & 0xFFFFFFFF != crc:
        raise CheckpointError("payload CRC32 mismatch")
    tensors, buffers, tags = {}, {}, {}
    offset = 0
    for e, size in zip(header["tensors"], sizes):
        arr = np.frombuffer(body, dtype=np.dtype(e["dtype"]), count=size // np.dtype(e["dtype"]).itemsize,
                            offset=offset).reshape(e["shape"])
        arr = arr.astype(arr.dtype.newbyteorder("="), copy=True)
        offset += size
        tags[e["name"]] = e["tag"]
        (buffers if e["tag"] == BUFFER else tensors)[e["name"]] = arr
    return ModelParams(tensors, buffers, tags), config, header["metadata"]


def load_checkpoint(path) -> Tuple[ModelParams, ModelConfig, Dict[str, Any]]:
    return parse_checkpoint(Path(path).read_bytes())
