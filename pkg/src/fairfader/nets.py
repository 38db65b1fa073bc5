"""Encoder, attribute-conditioned decoder, latent discriminator and the CNN
gender classifier.

All four networks are parameterized by one :class:`ArchSpec`, so the full
256x256 / depth-6 configuration and small desk-scale ones share code.
"""

from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass

import numpy as np

from . import functional as F
from . import snapshot
from .snapshot import SnapshotFormatError
from .tensor import Tensor, no_grad

DTYPE = np.float32


@dataclass(frozen=True)
class ArchSpec:
    input_channels: int = 3
    input_size: int = 256
    depth: int = 6
    base_channels: int = 16
    num_attrs: int = 5
    latent_channels: int | None = None
    leaky_slope: float = 0.2
    dis_hidden: int = 512
    clf_channels: tuple = (512, 128, 64, 16)
    clf_stride: int = 1
    clf_dropout: float = 0.3

    def __post_init__(self):
        if self.latent_channels is None:
            object.__setattr__(self, "latent_channels", self.base_channels * 2 ** (self.depth - 1))
        object.__setattr__(self, "clf_channels", tuple(int(c) for c in self.clf_channels))
        self.validate()

    def validate(self):
        def bad(msg):
            raise ValueError(msg)

        for name in ("input_channels", "input_size", "depth", "base_channels",
                     "latent_channels", "dis_hidden", "clf_stride"):
            if int(getattr(self, name)) < 1:
                bad(f"{name}: must be positive")
        if self.num_attrs < 2:
            bad(f"num_attrs: must be >= 2, got {self.num_attrs}")
        if self.input_size & (self.input_size - 1):
            bad(f"input_size: {self.input_size} is not a power of two")
        if self.input_size % 2 ** self.depth or self.input_size < 2 ** self.depth:
            bad(f"input_size: {self.input_size} cannot be halved {self.depth} times")
        if len(self.clf_channels) != 4:
            bad("clf_channels: needs four entries")
        if not 0 <= self.clf_dropout < 1:
            bad("clf_dropout: must be in [0, 1)")

    @property
    def channels(self):
        """Encoder channel ladder, capped at ``latent_channels``."""
        return [min(self.base_channels * 2 ** i, self.latent_channels) for i in range(self.depth)]

    @property
    def latent_size(self):
        return self.input_size // 2 ** self.depth

    @property
    def latent_shape(self):
        return (self.latent_channels, self.latent_size, self.latent_size)

    @property
    def latent_dim(self):
        return self.latent_channels * self.latent_size ** 2

    def to_text(self):
        lines = []
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            if isinstance(v, tuple):
                v = ",".join(str(x) for x in v)
            lines.append(f"{f.name}={v}")
        return "\n".join(lines)

    @classmethod
    def from_text(cls, text):
        kw = {}
        types = {f.name: f.type for f in dataclasses.fields(cls)}
        for line in text.splitlines():
            if not line:
                continue
            key, _, val = line.partition("=")
            if key not in types:
                raise ValueError(f"unknown ArchSpec key {key!r}")
            if key == "clf_channels":
                kw[key] = tuple(int(x) for x in val.split(","))
            elif key in ("leaky_slope", "clf_dropout"):
                kw[key] = float(val)
            else:
                kw[key] = int(val)
        return cls(**kw)


def _uniform(rng, shape, fan_in):
    bound = np.sqrt(1.0 / fan_in)
    if rng is None:
        return np.zeros(shape, dtype=DTYPE)
    return rng.uniform(-bound, bound, size=shape).astype(DTYPE)


class Model:
    """Named parameter tensors plus batchnorm running statistics."""

    kind = "model"

    def __init__(self, spec: ArchSpec):
        self.spec = spec
        self.params: dict[str, Tensor] = {}
        self.buffers: dict[str, np.ndarray] = {}

    def _param(self, name, arr):
        self.params[name] = Tensor(arr, requires_grad=True, name=name)

    def _conv(self, name, rng, cin, cout, k, transposed=False, stride=2):
        if transposed:
            shape, fan_in = (cin, cout, k, k), cin * k * k / stride ** 2
        else:
            shape, fan_in = (cout, cin, k, k), cin * k * k
        self._param(f"{name}.weight", _uniform(rng, shape, fan_in))
        self._param(f"{name}.bias", _uniform(rng, (cout,), fan_in))

    def _linear(self, name, rng, din, dout):
        self._param(f"{name}.weight", _uniform(rng, (dout, din), din))
        self._param(f"{name}.bias", _uniform(rng, (dout,), din))

    def _bn(self, name, c):
        self._param(f"{name}.gamma", np.ones(c, dtype=DTYPE))
        self._param(f"{name}.beta", np.zeros(c, dtype=DTYPE))
        self.buffers[f"{name}.running_mean"] = np.zeros(c, dtype=DTYPE)
        self.buffers[f"{name}.running_var"] = np.ones(c, dtype=DTYPE)

    def _apply_bn(self, name, h, mode, update_stats):
        p = self.params
        return F.batchnorm2d(h, p[f"{name}.gamma"], p[f"{name}.beta"],
                             self.buffers[f"{name}.running_mean"],
                             self.buffers[f"{name}.running_var"],
                             mode=mode, update_stats=update_stats)

    def parameters(self):
        return list(self.params.values())

    def num_params(self):
        return sum(p.size for p in self.params.values())

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def state_dict(self):
        """Copies of all parameters and buffers, keyed by name."""
        out = {n: p.data.copy() for n, p in self.params.items()}
        out.update({n: b.copy() for n, b in self.buffers.items()})
        return out

    def load_state_dict(self, state):
        missing = set(self.params) | set(self.buffers)
        missing -= set(state)
        if missing:
            raise KeyError(f"state is missing {sorted(missing)}")
        for n, p in self.params.items():
            if state[n].shape != p.shape:
                raise ValueError(f"{n}: shape {state[n].shape} != {p.shape}")
            p.data = np.array(state[n], dtype=DTYPE)
            p.grad = None
        for n, b in self.buffers.items():
            b[...] = state[n]

    def header(self):
        return {"kind": self.kind}


class Encoder(Model):
    kind = "encoder"

    def __init__(self, spec, rng=None):
        super().__init__(spec)
        cin = spec.input_channels
        for i, c in enumerate(spec.channels):
            self._conv(f"enc{i}.conv", rng, cin, c, 4)
            self._bn(f"enc{i}.bn", c)
            cin = c

    def forward(self, x, mode="train", update_stats=True):
        s = self.spec
        want = (s.input_channels, s.input_size, s.input_size)
        if x.data.ndim != 4 or x.shape[1:] != want:
            raise ValueError(f"encoder expects [N,{want[0]},{want[1]},{want[2]}], got {x.shape}")
        h = x
        for i in range(s.depth):
            h = F.conv2d(h, self.params[f"enc{i}.conv.weight"], self.params[f"enc{i}.conv.bias"], 2, 1)
            h = self._apply_bn(f"enc{i}.bn", h, mode, update_stats)
            h = F.leaky_relu(h, s.leaky_slope)
        return h


def attr_planes(y, K, H, W):
    """One-hot attribute code as ``K`` constant planes of extent ``H x W``.

    Scalar ``y`` gives a ``[K,H,W]`` tensor; an integer array of length N
    gives ``[N,K,H,W]``.
    """
    ys = np.atleast_1d(np.asarray(y))
    if ys.size and (ys.min() < 0 or ys.max() >= K):
        raise ValueError(f"attribute {ys[(ys < 0) | (ys >= K)][0]} out of range [0, {K})")
    planes = np.zeros((ys.size, K, H, W), dtype=DTYPE)
    planes[np.arange(ys.size), ys.astype(np.int64)] = 1
    return Tensor(planes[0] if np.ndim(y) == 0 else planes)


class Decoder(Model):
    """Mirror of the encoder.  When ``conditioned`` the one-hot attribute
    planes are appended to the input of every layer."""

    kind = "decoder"

    def __init__(self, spec, rng=None, conditioned=True):
        super().__init__(spec)
        self.conditioned = conditioned
        self.attr_channels = spec.num_attrs if conditioned else 0
        ch = spec.channels
        outs = ch[::-1][1:] + [spec.input_channels]
        self.layer_io = []
        for i, (cin, cout) in enumerate(zip(ch[::-1], outs)):
            cin = cin + self.attr_channels
            self.layer_io.append((cin, cout))
            self._conv(f"dec{i}.deconv", rng, cin, cout, 4, transposed=True)
            if i < spec.depth - 1:
                self._bn(f"dec{i}.bn", cout)

    def header(self):
        return {"kind": self.kind, "conditioned": int(self.conditioned)}

    def layer_inputs(self, z, y):
        """The tensors each layer consumes, recorded during a forward pass."""
        seen = []
        with no_grad():
            self.forward(_as_tensor(z), y, mode="eval", _trace=seen)
        return seen

    def forward(self, z, y=None, mode="train", update_stats=True, _trace=None):
        s = self.spec
        if z.data.ndim != 4 or z.shape[1:] != s.latent_shape:
            raise ValueError(f"decoder expects latent [N,{','.join(map(str, s.latent_shape))}], got {z.shape}")
        n = z.shape[0]
        if self.conditioned:
            if y is None:
                raise ValueError("conditioned decoder needs attribute values")
            ys = np.broadcast_to(np.asarray(y), (n,))
        h = z
        for i in range(s.depth):
            if self.conditioned:
                h = F.concat([h, attr_planes(ys, s.num_attrs, h.shape[2], h.shape[3])], axis=1)
            if _trace is not None:
                _trace.append(h.data)
            h = F.deconv2d(h, self.params[f"dec{i}.deconv.weight"], self.params[f"dec{i}.deconv.bias"], 2, 1)
            if i < s.depth - 1:
                h = self._apply_bn(f"dec{i}.bn", h, mode, update_stats)
                h = F.relu(h)
            else:
                h = F.tanh(h)
        return h


class Discriminator(Model):
    kind = "discriminator"

    def __init__(self, spec, rng=None):
        super().__init__(spec)
        if spec.latent_size < 2:
            raise ValueError(f"latent_size: discriminator needs latent extent >= 2, got {spec.latent_size}")
        c = spec.latent_channels
        self._conv("dis.conv", rng, c, c, 4)
        self._bn("dis.bn", c)
        self.flat_dim = c * (spec.latent_size // 2) ** 2
        self._linear("dis.fc1", rng, self.flat_dim, spec.dis_hidden)
        self._linear("dis.fc2", rng, spec.dis_hidden, spec.num_attrs)

    def logits(self, z, mode="train", update_stats=True):
        s, p = self.spec, self.params
        if z.data.ndim != 4 or z.shape[1:] != s.latent_shape:
            raise ValueError(f"discriminator expects latent [N,{','.join(map(str, s.latent_shape))}], got {z.shape}")
        h = F.conv2d(z, p["dis.conv.weight"], p["dis.conv.bias"], 2, 1)
        h = F.leaky_relu(self._apply_bn("dis.bn", h, mode, update_stats), s.leaky_slope)
        h = F.flatten(h)
        h = F.leaky_relu(F.linear(h, p["dis.fc1.weight"], p["dis.fc1.bias"]), s.leaky_slope)
        return F.linear(h, p["dis.fc2.weight"], p["dis.fc2.bias"])

    forward = logits


class Classifier(Model):
    kind = "classifier"
    n_classes = 2

    def __init__(self, spec, rng=None):
        super().__init__(spec)
        c1, c2, c3, c4 = spec.clf_channels
        size = spec.latent_size
        st = spec.clf_stride
        sizes = []
        cin = spec.latent_channels
        for i, c in enumerate((c1, c2, c3, c4)):
            size = F.conv_out_size(size, 3, st, 1)
            if size < 1:
                raise ValueError(f"latent extent {spec.latent_size} too small for classifier block {i + 1}")
            if i == 1:
                if size % 2:
                    raise ValueError(f"latent extent {size} after block 2 not divisible by the pooling window 2")
                size //= 2
            sizes.append(size)
            self._conv(f"clf{i}.conv", rng, cin, c, 3)
            self._bn(f"clf{i}.bn", c)
            cin = c
        self.spatial = sizes
        self.fc_in = c4 * size * size
        self._linear("clf.fc", rng, self.fc_in, self.n_classes)
        seed = 0 if rng is None else int(rng.integers(2 ** 63))
        self.rng = np.random.default_rng(seed)

    def forward(self, z, mode="train", rng=None, update_stats=True):
        s, p = self.spec, self.params
        if z.data.ndim != 4 or z.shape[1:] != s.latent_shape:
            raise ValueError(f"classifier expects latent [N,{','.join(map(str, s.latent_shape))}], got {z.shape}")
        rng = self.rng if rng is None else rng
        h = z
        for i in range(4):
            h = F.conv2d(h, p[f"clf{i}.conv.weight"], p[f"clf{i}.conv.bias"], s.clf_stride, 1)
            h = F.relu(self._apply_bn(f"clf{i}.bn", h, mode, update_stats))
            if i == 1:
                h = F.maxpool2d(h, 2)
            if i in (0, 2, 3):
                h = F.dropout(h, s.clf_dropout, mode, rng)
        return F.linear(F.flatten(h), p["clf.fc.weight"], p["clf.fc.bias"])


def build_encoder(spec: ArchSpec, rng=None) -> Encoder:
    return Encoder(spec, _rng(rng))


def build_decoder(spec: ArchSpec, rng=None, conditioned=True) -> Decoder:
    return Decoder(spec, _rng(rng), conditioned)


def build_discriminator(spec: ArchSpec, rng=None) -> Discriminator:
    return Discriminator(spec, _rng(rng))


def build_classifier(spec: ArchSpec, rng=None) -> Classifier:
    return Classifier(spec, _rng(rng))


def _rng(rng):
    if rng is None or isinstance(rng, np.random.Generator):
        return rng if rng is not None else np.random.default_rng(0)
    return np.random.default_rng(rng)


def _as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=DTYPE))


def encode(enc: Encoder, x, mode="eval") -> Tensor:
    return enc.forward(_as_tensor(x), mode)


def decode(dec: Decoder, z, y=None, mode="eval") -> Tensor:
    return dec.forward(_as_tensor(z), y, mode)


def discriminate(dis: Discriminator, z, mode="eval") -> np.ndarray:
    """Attribute probabilities, one row per latent."""
    return F.softmax(dis.logits(_as_tensor(z), mode))


def classify(clf: Classifier, z, mode="eval", rng=None) -> np.ndarray:
    """Gender probabilities, one row per latent."""
    return F.softmax(clf.forward(_as_tensor(z), mode, rng))


# model files: tensor snapshot whose first record is an empty tensor whose
# name carries the header as key=value lines

_HEADER_PREFIX = "#header\n"
_KINDS = {"encoder": Encoder, "decoder": Decoder, "discriminator": Discriminator, "classifier": Classifier}


def model_bytes(model: Model) -> bytes:
    head = "\n".join(f"{k}={v}" for k, v in model.header().items())
    records = {_HEADER_PREFIX + head + "\n" + model.spec.to_text(): np.zeros((0,), dtype=DTYPE)}
    records.update(model.state_dict())
    return snapshot.encode(records)


def save_model(model: Model, path):
    data = model_bytes(model)
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(data)
    os.replace(tmp, path)


def model_from_bytes(buf: bytes) -> Model:
    records = snapshot.decode(buf)
    if not records:
        raise SnapshotFormatError("model file has no header record", 4)
    first = next(iter(records))
    if not first.startswith(_HEADER_PREFIX):
        raise SnapshotFormatError("first record is not a model header", 4)
    head = {}
    spec_lines = []
    for line in first[len(_HEADER_PREFIX):].splitlines():
        key, _, val = line.partition("=")
        if key in ("kind", "conditioned"):
            head[key] = val
        else:
            spec_lines.append(line)
    try:
        spec = ArchSpec.from_text("\n".join(spec_lines))
        cls = _KINDS[head["kind"]]
    except (KeyError, ValueError, TypeError) as exc:
        raise SnapshotFormatError(f"bad model header: {exc}", 4) from None
    if cls is Decoder:
        model = Decoder(spec, None, conditioned=bool(int(head.get("conditioned", 1))))
    else:
        model = cls(spec, None)
    del records[first]
    try:
        model.load_state_dict(records)
    except (KeyError, ValueError) as exc:
        raise SnapshotFormatError(f"model tensors do not match header: {exc}", 4) from None
    return model


def load_model(path) -> Model:
    with open(path, "rb") as fh:
        return model_from_bytes(fh.read())
