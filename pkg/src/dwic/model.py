"""Declarative network layout, the assembled CNN, and checkpoint files.

Default shape chain for a 6x66x66 slice (no padding on the stem and the
max pool, so every stage divides evenly down to the 7x7 average pool)::

    input            6 x 66 x 66
    conv 7x7/2      64 x 30 x 30
    maxpool 3x3/2   64 x 14 x 14
    stage 1 (x4)   256 x 14 x 14
    stage 2 (x9)   512 x  7 x  7   (first block strided)
    bn, relu       512 x  7 x  7
    avgpool 7x7    512 x  1 x  1
    dropout, fc      2
    softmax          2
"""

import dataclasses
import hashlib
import io
import json
import struct

import numpy as np

from . import _kernels as K
from .layers import (AvgPool2d, BatchNorm2d, Bottleneck, Conv2d, Dropout, Flatten, Linear,
                     MaxPool2d, ReLU, Softmax, bce_loss)
from .tensor import get_default_dtype


@dataclasses.dataclass(frozen=True)
class ModelSpec:
    """Declarative layer stack; defaults reproduce the 41-layer network."""

    in_channels: int = 6
    input_size: int = 66
    n_classes: int = 2
    stem_channels: int = 64
    stem_kernel: int = 7
    stem_stride: int = 2
    stem_padding: int = 0
    pool_kernel: int = 3
    pool_stride: int = 2
    pool_padding: int = 0
    # (bottleneck width, output channels, blocks, stride of the first block)
    stages: tuple = ((64, 256, 4, 1), (128, 512, 9, 2))
    final_preact: bool = True
    avgpool_kernel: int = 7
    dropout: float = 0.9
    fc_hidden: int = 0
    bn_eps: float = 1e-5
    bn_momentum: float = 0.1

    def __post_init__(self):
        object.__setattr__(self, "stages", tuple(tuple(int(v) for v in s) for s in self.stages))
        self.shape_chain()

    @classmethod
    def toy(cls, width=8, blocks=(1, 1), **overrides):
        """Same topology at reduced width and depth."""
        stages = ((width // 2, width * 2, blocks[0], 1), (width, width * 4, blocks[1], 2))
        return cls(stem_channels=width, stages=stages, **overrides)

    @classmethod
    def reduced_width(cls, divisor=16, **overrides):
        """Full block counts (x4, x9) with every channel count divided by ``divisor``."""
        base = cls()
        stages = tuple((max(1, m // divisor), max(1, o // divisor), n, s) for m, o, n, s in base.stages)
        return cls(stem_channels=max(1, base.stem_channels // divisor), stages=stages, **overrides)

    def to_dict(self):
        d = dataclasses.asdict(self)
        d["stages"] = [list(s) for s in self.stages]
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["stages"] = tuple(tuple(s) for s in d["stages"])
        return cls(**d)

    def to_json(self):
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))

    def digest(self):
        return hashlib.sha256(self.to_json().encode()).digest()

    def shape_chain(self):
        """``[(name, (C, H, W)), ...]`` after each stage of the network."""
        c, h = self.in_channels, self.input_size
        chain = [("input", (c, h, h))]
        h = K.conv_out_size(h, self.stem_kernel, self.stem_stride, self.stem_padding)
        c = self.stem_channels
        chain.append(("stem.conv", (c, h, h)))
        h = K.conv_out_size(h, self.pool_kernel, self.pool_stride, self.pool_padding)
        chain.append(("stem.pool", (c, h, h)))
        for si, (mid, out, n, stride) in enumerate(self.stages, 1):
            if n < 1:
                raise ValueError(f"stage {si} needs at least one block")
            h = K.conv_out_size(h, 3, stride, 1)
            c = out
            chain.append((f"stage{si}", (c, h, h)))
        h = K.conv_out_size(h, self.avgpool_kernel, self.avgpool_kernel, 0)
        if h < 1:
            raise ValueError(f"average pool {self.avgpool_kernel}x{self.avgpool_kernel} does not fit the stage output")
        chain.append(("head.avgpool", (c, h, h)))
        chain.append(("head.fc", (self.n_classes,)))
        return chain

    def weighted_layer_count(self):
        """Stem conv + residual-branch convs + fully connected layer(s).

        Projection shortcuts are not counted, following the usual ResNet
        depth convention.
        """
        return 1 + sum(3 * n for _, _, n, _ in self.stages) + (2 if self.fc_hidden else 1)


class Network:
    """The assembled CNN: ``layers`` is an ordered list of ``(name, layer)``."""

    def __init__(self, spec=None, seed=0, dtype=None):
        self.spec = spec = spec or ModelSpec()
        self.dtype = np.dtype(dtype or get_default_dtype()).type
        rng = np.random.default_rng(seed)
        dt = self.dtype
        eps, mom = spec.bn_eps, spec.bn_momentum
        layers = [
            ("stem.conv", Conv2d(spec.in_channels, spec.stem_channels, spec.stem_kernel,
                                 spec.stem_stride, spec.stem_padding, bias=True, rng=rng, dtype=dt)),
            ("stem.pool", MaxPool2d(spec.pool_kernel, spec.pool_stride, spec.pool_padding)),
        ]
        c = spec.stem_channels
        for si, (mid, out, n, stride) in enumerate(spec.stages, 1):
            for bi in range(n):
                blk = Bottleneck(c, mid, out, stride if bi == 0 else 1, eps, mom, rng=rng, dtype=dt)
                layers.append((f"stage{si}.block{bi}", blk))
                c = out
        if spec.final_preact:
            layers += [("head.bn", BatchNorm2d(c, eps, mom, dt)), ("head.relu", ReLU())]
        layers += [("head.avgpool", AvgPool2d(spec.avgpool_kernel)), ("head.flatten", Flatten())]
        feat = c * spec.shape_chain()[-2][1][1] ** 2
        if spec.fc_hidden:
            layers += [("head.hidden", Linear(feat, spec.fc_hidden, rng=rng, dtype=dt)), ("head.hidden_relu", ReLU())]
            feat = spec.fc_hidden
        self.dropout = Dropout(spec.dropout)
        layers += [("head.dropout", self.dropout),
                   ("head.fc", Linear(feat, spec.n_classes, rng=rng, dtype=dt)),
                   ("head.softmax", Softmax())]
        self.layers = layers
        self.seed_dropout(seed)

    def seed_dropout(self, seed):
        self.dropout.rng = np.random.default_rng(seed)

    def _leaves(self):
        for name, layer in self.layers:
            if isinstance(layer, Bottleneck):
                for sub, sl in layer.sublayers():
                    yield f"{name}.{sub}", sl
            else:
                yield name, layer

    def named_params(self):
        return {f"{n}.{k}": v for n, layer in self._leaves() for k, v in layer.params.items()}

    def named_grads(self):
        return {f"{n}.{k}": layer.grads[k] for n, layer in self._leaves() for k in layer.params}

    def named_buffers(self):
        return {f"{n}.{k}": v for n, layer in self._leaves() for k, v in layer.buffers.items()}

    def state_dict(self):
        """Parameters then buffers, in layer order (copies)."""
        out = {k: v.copy() for k, v in self.named_params().items()}
        out.update({k: v.copy() for k, v in self.named_buffers().items()})
        return out

    def load_state_dict(self, state):
        targets = {**self.named_params(), **self.named_buffers()}
        missing = set(targets) - set(state)
        extra = set(state) - set(targets)
        if missing or extra:
            raise ValueError(f"state mismatch: missing {sorted(missing)[:3]}, unexpected {sorted(extra)[:3]}")
        for k, dst in targets.items():
            src = np.asarray(state[k])
            if src.shape != dst.shape:
                raise ValueError(f"{k}: shape {src.shape} does not match {dst.shape}")
            dst[...] = src

    def conv_layers(self):
        return [layer for _, layer in self._leaves() if isinstance(layer, Conv2d)]

    def blocks(self):
        return [layer for _, layer in self.layers if isinstance(layer, Bottleneck)]

    def forward(self, x, train=False):
        s = self.spec
        expect = (s.in_channels, s.input_size, s.input_size)
        if x.ndim != 4 or tuple(x.shape[1:]) != expect:
            raise ValueError(f"expected a batch of shape (N, {expect[0]}, {expect[1]}, {expect[2]}), got {x.shape}")
        out = np.asarray(x, dtype=self.dtype)
        for _, layer in self.layers:
            out = layer.forward(out, train)
        return out

    def backward(self, dprobs):
        d = dprobs
        for _, layer in reversed(self.layers):
            d = layer.backward(d)
        return d

    def loss_and_backward(self, x, labels, class_weights=None):
        """Train-mode forward, BCE loss, full backward. Returns ``(loss, probs)``.

        The softmax/cross-entropy gradient is applied in its fused
        ``(p - onehot) * w / sum(w)`` form so saturated probabilities still
        produce a gradient.
        """
        probs = self.forward(x, train=True)
        loss, _ = bce_loss(probs, labels, class_weights=class_weights)
        labels = np.asarray(labels, dtype=np.int64)
        n = labels.shape[0]
        w = np.ones(n) if class_weights is None else np.asarray(class_weights, dtype=np.float64)[labels]
        dlogits = probs.copy()
        dlogits[np.arange(n), labels] -= 1
        dlogits *= (w / w.sum()).astype(self.dtype)[:, None]
        softmax = self.layers[-1][1]
        softmax._take_cache()
        d = dlogits.astype(self.dtype)
        stem = self.layers[0][1]
        stem.input_grad = False
        try:
            for _, layer in reversed(self.layers[:-1]):
                d = layer.backward(d)
        finally:
            stem.input_grad = True
        return loss, probs

    def predict_proba(self, x, batch_size=32):
        """Eval-mode class probabilities, computed in fixed-size chunks."""
        outs = [self.forward(x[i:i + batch_size], train=False) for i in range(0, len(x), batch_size)]
        if not outs:
            return np.zeros((0, self.spec.n_classes), dtype=self.dtype)
        return np.concatenate(outs, axis=0)


# ---------------------------------------------------------------------------
# checkpoint files
# ---------------------------------------------------------------------------

CHECKPOINT_MAGIC = b"PCNN"
CHECKPOINT_VERSION = 1


class CheckpointError(ValueError):
    pass


def _write_str(buf, s):
    b = s.encode("utf-8")
    buf.write(struct.pack("<I", len(b)))
    buf.write(b)


def _read_exact(f, n):
    b = f.read(n)
    if len(b) != n:
        raise CheckpointError("truncated file")
    return b


def _read_str(f):
    (n,) = struct.unpack("<I", _read_exact(f, 4))
    return _read_exact(f, n).decode("utf-8")


def checkpoint_bytes(spec, state, meta=""):
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<I", CHECKPOINT_VERSION))
    buf.write(spec.digest())
    _write_str(buf, spec.to_json())
    _write_str(buf, meta)
    buf.write(struct.pack("<I", len(state)))
    for name, arr in state.items():
        arr = np.ascontiguousarray(arr, dtype="<f4")
        nb = name.encode("utf-8")
        buf.write(struct.pack("<H", len(nb)))
        buf.write(nb)
        buf.write(struct.pack("<B", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(arr.tobytes())
    return buf.getvalue()


def save_checkpoint(path, spec, state, meta=""):
    with open(path, "wb") as f:
        f.write(checkpoint_bytes(spec, state, meta))


def load_checkpoint(path):
    """Returns ``(spec, state, meta)``; ``state`` maps names to float32 arrays."""
    with open(path, "rb") as f:
        if _read_exact(f, 4) != CHECKPOINT_MAGIC:
            raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
        (version,) = struct.unpack("<I", _read_exact(f, 4))
        if version != CHECKPOINT_VERSION:
            raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
        digest = _read_exact(f, 32)
        try:
            spec = ModelSpec.from_dict(json.loads(_read_str(f)))
        except (ValueError, TypeError, KeyError) as exc:
            raise CheckpointError(f"{path}: unreadable model spec ({exc})") from None
        if spec.digest() != digest:
            raise CheckpointError(f"{path}: spec hash does not match embedded spec")
        meta = _read_str(f)
        (count,) = struct.unpack("<I", _read_exact(f, 4))
        state = {}
        for _ in range(count):
            (nlen,) = struct.unpack("<H", _read_exact(f, 2))
            name = _read_exact(f, nlen).decode("utf-8")
            (ndim,) = struct.unpack("<B", _read_exact(f, 1))
            shape = struct.unpack(f"<{ndim}I", _read_exact(f, 4 * ndim))
            size = int(np.prod(shape)) if ndim else 1
            state[name] = np.frombuffer(_read_exact(f, 4 * size), dtype="<f4").reshape(shape).copy()
        if f.read(1):
            raise CheckpointError(f"{path}: trailing bytes")
    return spec, state, meta


def network_from_checkpoint(path, dtype=np.float32):
    spec, state, meta = load_checkpoint(path)
    net = Network(spec, seed=0, dtype=dtype)
    net.load_state_dict(state)
    return net
