"""Binary checkpoint container.

Layout (all integers little-endian)::

    magic    8 bytes   b"MVIRCKPT"
    version  uint32    1
    hlen     uint64    byte length of the header
    header   hlen      compact canonical JSON (sorted keys, UTF-8)
    payload            float64 little-endian tensors, concatenated in header order

The header carries the model config, the training config, the step
counter, the RNG state and a ``tensors`` list of ``{"name", "shape"}``
entries describing the payload. Tensor names are ``param/<p>``,
``adam_m/<p>`` and ``adam_v/<p>``. Identical contents always serialize
to identical bytes.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .model import ModelConfig, MVNet

MAGIC = b"MVIRCKPT"
VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    step: int = 0


@dataclass
class Checkpoint:
    model_config: ModelConfig
    params: dict  # name -> float64 array
    adam: AdamState = field(default_factory=AdamState)
    train_config: dict = field(default_factory=dict)
    rng_state: dict | None = None
    meta: dict = field(default_factory=dict)

    @classmethod
    def from_model(cls, net: MVNet, adam: AdamState | None = None, train_config: dict | None = None,
                   rng: np.random.Generator | None = None, meta: dict | None = None) -> "Checkpoint":
        return cls(net.cfg, {k: np.array(v, dtype=np.float64) for k, v in net.state_dict().items()},
                   adam or AdamState(), dict(train_config or {}),
                   None if rng is None else rng.bit_generator.state, dict(meta or {}))

    def build_model(self) -> MVNet:
        net = MVNet(self.model_config)
        net.load_state_dict(self.params)
        return net

    def rng(self) -> np.random.Generator:
        g = np.random.default_rng()
        if self.rng_state is not None:
            g.bit_generator.state = self.rng_state
        return g


def _tensors(ck: Checkpoint) -> list[tuple[str, np.ndarray]]:
    out = [(f"param/{k}", ck.params[k]) for k in sorted(ck.params)]
    out += [(f"adam_m/{k}", ck.adam.m[k]) for k in sorted(ck.adam.m)]
    out += [(f"adam_v/{k}", ck.adam.v[k]) for k in sorted(ck.adam.v)]
    return out


def to_bytes(ck: Checkpoint) -> bytes:
    tensors = _tensors(ck)
    header = {
        "model": ck.model_config.to_dict(),
        "train": ck.train_config,
        "step": int(ck.adam.step),
        "rng": ck.rng_state,
        "meta": ck.meta,
        "tensors": [{"name": n, "shape": list(np.shape(a))} for n, a in tensors],
    }
    hbytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    parts = [MAGIC, struct.pack("<IQ", VERSION, len(hbytes)), hbytes]
    parts += [np.ascontiguousarray(a, dtype="<f8").tobytes() for _, a in tensors]
    return b"".join(parts)


def from_bytes(buf: bytes) -> Checkpoint:
    if buf[:8] != MAGIC:
        raise CheckpointError("not a checkpoint (bad magic)")
    version, hlen = struct.unpack_from("<IQ", buf, 8)
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    off = 8 + struct.calcsize("<IQ")
    header = json.loads(buf[off:off + hlen].decode())
    off += hlen
    params, m, v = {}, {}, {}
    dest = {"param": params, "adam_m": m, "adam_v": v}
    for t in header["tensors"]:
        n = int(np.prod(t["shape"], dtype=np.int64))
        if off + 8 * n > len(buf):
            raise CheckpointError(f"truncated payload at tensor {t['name']}")
        arr = np.frombuffer(buf, dtype="<f8", count=n, offset=off).astype(np.float64).reshape(t["shape"])
        off += 8 * n
        kind, name = t["name"].split("/", 1)
        dest[kind][name] = arr
    if off != len(buf):
        raise CheckpointError(f"{len(buf) - off} trailing bytes after payload")
    return Checkpoint(ModelConfig.from_dict(header["model"]), params, AdamState(m, v, header["step"]),
                      header["train"], header["rng"], header["meta"])


def save(path, ck: Checkpoint) -> Path:
    p = Path(path)
    p.parent.mkdir(parents=True, exist_ok=True)
    p.write_bytes(to_bytes(ck))
    return p


def load(path) -> Checkpoint:
    p = Path(path)
    if not p.exists():
        raise CheckpointError(f"checkpoint not found: {p}")
    return from_bytes(p.read_bytes())


def file_hash(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
