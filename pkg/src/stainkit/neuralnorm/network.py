"""Skip-connected encoder-decoder for stain normalization.

The downward path halves the spatial size per stage (strided conv + BN +
leaky ReLU); the upward path mirrors it (nearest upsample + conv + BN + leaky
ReLU), with the final stage dropping BN and ending in tanh. Long skip
connections concatenate each encoder activation (and the input itself at full
resolution) into the decoder stage of matching spatial size, giving the model
a direct copy path for spatial structure.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass

import numpy as np

from ..errors import ShapeMismatchError, StaleCacheError
from .layers import BatchNorm2d, Conv2d, LeakyReLU, NearestUpsample2x, Tanh
from .tensor import Tensor

WEIGHTS_MAGIC = b"SNN1"
WEIGHTS_SCHEMA_VERSION = 1


@dataclass(frozen=True)
class NetworkSpec:
    """Mirrored layer counts for the encoder-decoder; 3x3 kernels throughout."""

    in_channels: int = 3
    down_filters: tuple[int, ...] = (16, 32, 64)
    up_filters: tuple[int, ...] = (32, 16, 3)

    def __post_init__(self):
        if len(self.down_filters) != len(self.up_filters):
            raise ValueError("down/up paths must have equal depth")
        if len(self.down_filters) < 1:
            raise ValueError("network needs at least one stage")
        if self.up_filters[-1] != self.in_channels:
            raise ValueError("final stage must emit the input channel count")

    @property
    def depth(self) -> int:
        return len(self.down_filters)

    @property
    def size_multiple(self) -> int:
        return 1 << self.depth

    def to_dict(self) -> dict:
        return {
            "in_channels": self.in_channels,
            "down_filters": list(self.down_filters),
            "up_filters": list(self.up_filters),
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "NetworkSpec":
        return cls(
            in_channels=int(doc["in_channels"]),
            down_filters=tuple(doc["down_filters"]),
            up_filters=tuple(doc["up_filters"]),
        )


class StainNormNet:
    """Encoder-decoder with concatenating long skip connections."""

    def __init__(self, spec: NetworkSpec | None = None, *, seed: int = 0,
                 dtype=np.float32):
        self.spec = spec or NetworkSpec()
        self.dtype = dtype
        self.trained = False
        root = np.random.SeedSequence(entropy=int(seed) & 0xFFFFFFFFFFFFFFFF,
                                      spawn_key=(7,))
        rngs = iter(np.random.default_rng(s) for s in root.spawn(64))

        self.encoder = []
        in_ch = self.spec.in_channels
        for i, f in enumerate(self.spec.down_filters):
            conv = Conv2d(in_ch, f, stride=2, rng=next(rngs), dtype=dtype,
                          name=f"enc{i}.conv")
            bn = BatchNorm2d(f, dtype=dtype, name=f"enc{i}.bn")
            self.encoder.append((conv, bn, LeakyReLU()))
            in_ch = f

        self.decoder = []
        depth = self.spec.depth
        prev_ch = self.spec.down_filters[-1]
        for j, f in enumerate(self.spec.up_filters):
            skip_ch = (self.spec.down_filters[depth - 2 - j]
                       if j < depth - 1 else self.spec.in_channels)
            conv = Conv2d(prev_ch + skip_ch, f, stride=1, rng=next(rngs),
                          dtype=dtype, name=f"dec{j}.conv")
            last = j == depth - 1
            bn = None if last else BatchNorm2d(f, dtype=dtype, name=f"dec{j}.bn")
            act = Tanh() if last else LeakyReLU()
            self.decoder.append((NearestUpsample2x(), conv, bn, act))
            prev_ch = f

        self._cache = None

    # -- parameter plumbing -------------------------------------------------

    def parameters(self) -> list[Tensor]:
        out = []
        for conv, bn, _ in self.encoder:
            out.extend(conv.params())
            out.extend(bn.params())
        for _, conv, bn, _ in self.decoder:
            out.extend(conv.params())
            if bn is not None:
                out.extend(bn.params())
        return out

    def named_buffers(self) -> list[tuple[str, np.ndarray]]:
        out = []
        for i, (_, bn, _) in enumerate(self.encoder):
            for name, buf in bn.buffers():
                out.append((f"enc{i}.bn.{name}", buf))
        for j, (_, _, bn, _) in enumerate(self.decoder):
            if bn is not None:
                for name, buf in bn.buffers():
                    out.append((f"dec{j}.bn.{name}", buf))
        return out

    def _set_buffer(self, name: str, value: np.ndarray) -> None:
        stage, _, attr = name.split(".")
        idx = int(stage[3:])
        bn = self.encoder[idx][1] if stage.startswith("enc") else self.decoder[idx][2]
        setattr(bn, attr, value.astype(self.dtype))

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    # -- forward / backward --------------------------------------------------

    def validate_input(self, x: np.ndarray) -> None:
        if x.ndim != 4 or x.shape[3] != self.spec.in_channels:
            raise ShapeMismatchError(
                f"expected (N,H,W,{self.spec.in_channels}) input, got {x.shape}")
        mult = self.spec.size_multiple
        if x.shape[1] % mult or x.shape[2] % mult or x.shape[1] == 0 or x.shape[2] == 0:
            raise ShapeMismatchError(
                f"spatial dims must be positive multiples of {mult}, got {x.shape}")

    def forward(self, x: np.ndarray, training: bool = False) -> np.ndarray:
        self.validate_input(x)
        x = x.astype(self.dtype, copy=False)
        enc_acts = [x]
        h = x
        for conv, bn, act in self.encoder:
            h = act.forward(bn.forward(conv.forward(h, training), training), training)
            enc_acts.append(h)

        splits = []
        depth = self.spec.depth
        for j, (up, conv, bn, act) in enumerate(self.decoder):
            h_up = up.forward(h, training)
            skip = enc_acts[depth - 1 - j]
            splits.append(h_up.shape[3])
            h = np.concatenate([h_up, skip], axis=3)
            h = conv.forward(h, training)
            if bn is not None:
                h = bn.forward(h, training)
            h = act.forward(h, training)
        self._cache = (splits, [a.shape for a in enc_acts])
        if not np.all(np.isfinite(h)):
            raise FloatingPointError("non-finite activations in forward pass")
        return h

    def backward(self, dy: np.ndarray) -> np.ndarray:
        """Backpropagate dL/dy; accumulates parameter grads, returns dL/dx."""
        if self._cache is None:
            raise StaleCacheError("backward called without cached forward pass")
        splits, enc_shapes = self._cache
        self._cache = None
        depth = self.spec.depth
        denc = [np.zeros(shape, dtype=dy.dtype) for shape in enc_shapes]

        d = dy
        for j in range(depth - 1, -1, -1):
            up, conv, bn, act = self.decoder[j]
            d = act.backward(d)
            if bn is not None:
                d = bn.backward(d)
            d = conv.backward(d)
            d_up, d_skip = d[..., :splits[j]], d[..., splits[j]:]
            denc[depth - 1 - j] += d_skip
            d = up.backward(d_up)
        denc[depth] += d

        for i in range(depth - 1, -1, -1):
            conv, bn, act = self.encoder[i]
            d = act.backward(denc[i + 1])
            d = bn.backward(d)
            d = conv.backward(d)
            denc[i] += d
        return denc[0]

    # -- state dict ----------------------------------------------------------

    def copy_state(self) -> list[np.ndarray]:
        return ([p.data.copy() for p in self.parameters()]
                + [b.copy() for _, b in self.named_buffers()])

    def load_state(self, state: list[np.ndarray]) -> None:
        params = self.parameters()
        buffers = self.named_buffers()
        if len(state) != len(params) + len(buffers):
            raise ValueError("state length mismatch")
        for p, s in zip(params, state[:len(params)]):
            p.data[...] = s
        for (name, _), s in zip(buffers, state[len(params):]):
            self._set_buffer(name, s)


def save_weights(net: StainNormNet, path) -> None:
    """Write the SNN1 container: magic, JSON header, little-endian f32 blobs."""
    params = net.parameters()
    buffers = net.named_buffers()
    header = {
        "schema_version": WEIGHTS_SCHEMA_VERSION,
        "spec": net.spec.to_dict(),
        "trained": bool(net.trained),
        "params": [{"name": p.name, "shape": list(p.data.shape)} for p in params],
        "buffers": [{"name": name, "shape": list(b.shape)} for name, b in buffers],
    }
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(WEIGHTS_MAGIC)
        fh.write(struct.pack("<I", len(header_bytes)))
        fh.write(header_bytes)
        for p in params:
            fh.write(np.ascontiguousarray(p.data, dtype="<f4").tobytes())
        for _, b in buffers:
            fh.write(np.ascontiguousarray(b, dtype="<f4").tobytes())


def load_weights(path, dtype=np.float32) -> StainNormNet:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != WEIGHTS_MAGIC:
            raise ValueError(f"bad weights magic {magic!r}")
        (header_len,) = struct.unpack("<I", fh.read(4))
        header = json.loads(fh.read(header_len).decode("utf-8"))
        if header.get("schema_version") != WEIGHTS_SCHEMA_VERSION:
            raise ValueError("unsupported weights schema version")
        net = StainNormNet(NetworkSpec.from_dict(header["spec"]), dtype=dtype)
        state = []
        for entry in header["params"] + header["buffers"]:
            shape = tuple(entry["shape"])
            count = int(np.prod(shape)) if shape else 1
            raw = fh.read(4 * count)
            if len(raw) != 4 * count:
                raise ValueError("truncated weights blob")
            state.append(np.frombuffer(raw, dtype="<f4").reshape(shape).astype(dtype))
        net.load_state(state)
        net.trained = bool(header["trained"])
    return net
