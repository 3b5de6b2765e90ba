"""A small U-Net style monocular depth network.

The encoder is a stack of 3x3 conv + batch-norm + ReLU stages, each stage
after the first downsampling by 2. The decoder upsamples bilinearly, concatenates
the matching encoder skip, and applies conv + ReLU. A sigmoid disparity head
is mapped to depth so every output lies inside ``[min_depth, max_depth]``.

All parameters live in a :class:`ParameterStore`, which records for every
entry its layer kind, encoder/decoder part, registration depth and whether it
is currently adaptable.
"""

from __future__ import annotations

import itertools
import json
import struct
from collections import OrderedDict
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .errors import ConfigError, IngestionError, InputError, TrainingError
from .tensor import Tensor

CHECKPOINT_MAGIC = b"PITTA-CKPT\0"
CHECKPOINT_VERSION = 1
KINDS = ("conv", "bn-gamma", "bn-beta", "other")


@dataclass(frozen=True)
class DepthNetConfig:
    input_size: tuple = (64, 64, 3)
    encoder_channels: tuple = (16, 32, 64)
    bn_eps: float = 1e-5
    bn_momentum: float = 0.1
    min_depth: float = 0.1
    max_depth: float = 100.0

    def __post_init__(self):
        object.__setattr__(self, "input_size", tuple(int(v) for v in self.input_size))
        object.__setattr__(self, "encoder_channels", tuple(int(v) for v in self.encoder_channels))
        if len(self.input_size) != 3:
            raise ConfigError(f"input_size must be (H, W, C), got {self.input_size}")
        if not self.encoder_channels:
            raise ConfigError("encoder_channels must not be empty")
        if not 0 < self.min_depth < self.max_depth:
            raise ConfigError(f"need 0 < min_depth < max_depth, got {self.min_depth}, {self.max_depth}")
        if not self.bn_eps > 0:
            raise ConfigError("bn_eps must be positive")
        h, w, _ = self.input_size
        div = 2 ** (len(self.encoder_channels) - 1)
        if h % div or w % div:
            raise ConfigError(f"H and W must be divisible by {div}, got {h}x{w}")

    @classmethod
    def from_dict(cls, d):
        return cls(**{k: tuple(v) if isinstance(v, list) else v for k, v in d.items()})

    def to_dict(self):
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}


@dataclass
class ParamEntry:
    tensor: Tensor
    kind: str
    part: str  # "encoder" or "decoder"
    depth: int  # layer registration index within the whole network
    layer: str
    adaptable: bool = False

    @property
    def trainable(self):
        return self.kind != "other"


class ParameterStore:
    """Ordered registry ``name -> ParamEntry``."""

    def __init__(self):
        self.entries = OrderedDict()

    def add(self, name, array, kind, part, depth, layer):
        if kind not in KINDS:
            raise ConfigError(f"unknown parameter kind {kind!r}")
        if name in self.entries:
            raise ConfigError(f"duplicate parameter {name!r}")
        self.entries[name] = ParamEntry(Tensor(array, name=name), kind, part, depth, layer)

    def __getitem__(self, name):
        return self.entries[name]

    def __iter__(self):
        return iter(self.entries)

    def __len__(self):
        return len(self.entries)

    def items(self):
        return self.entries.items()

    def tensor(self, name):
        return self.entries[name].tensor

    def array(self, name):
        return self.entries[name].tensor.data

    def adaptable_names(self):
        return [n for n, e in self.entries.items() if e.adaptable]

    def set_adaptable(self, names):
        names = set(names)
        unknown = names - set(self.entries)
        if unknown:
            raise ConfigError(f"unknown parameters: {sorted(unknown)}")
        for n, e in self.entries.items():
            e.adaptable = n in names and e.trainable
            e.tensor.requires_grad = e.adaptable
            e.tensor.grad = None

    def trainable_names(self):
        return [n for n, e in self.entries.items() if e.trainable]

    def zero_grad(self):
        for e in self.entries.values():
            e.tensor.grad = None

    def n_scalars(self, names=None):
        names = self.entries if names is None else names
        return int(sum(self.entries[n].tensor.size for n in names))

    def snapshot(self):
        return {n: e.tensor.data.copy() for n, e in self.entries.items()}

    def load_snapshot(self, snap):
        for n, arr in snap.items():
            e = self.entries[n]
            if e.tensor.data.shape != arr.shape:
                raise InputError(f"{n}: shape {arr.shape} does not match {e.tensor.data.shape}")
            e.tensor.data = np.ascontiguousarray(arr, dtype=e.tensor.data.dtype).copy()

    def astype(self, dtype):
        for e in self.entries.values():
            e.tensor.data = e.tensor.data.astype(dtype)
            e.tensor.grad = None


class DepthNet:
    def __init__(self, config, store, seed=None):
        self.config = config
        self.store = store
        self.seed = seed

    # --------------------------------------------------------------- layout

    @staticmethod
    def layer_plan(config):
        """``(layer name, part, kernel shape or None, has_bn, stride)`` in registration order."""
        h, w, c_in = config.input_size
        chans = config.encoder_channels
        plan = []
        prev = c_in
        for s, c in enumerate(chans):
            plan.append((f"enc{s}a", "encoder", (3, 3, prev, c), True, 1 if s == 0 else 2))
            plan.append((f"enc{s}b", "encoder", (3, 3, c, c), True, 1))
            prev = c
        for s in range(len(chans) - 2, -1, -1):
            plan.append((f"dec{s}", "decoder", (3, 3, prev + chans[s], chans[s]), False, 1))
            prev = chans[s]
        plan.append(("head", "decoder", (3, 3, prev, 1), False, 1))
        return plan

    @classmethod
    def build(cls, config, seed=0):
        """Kaiming (fan-in) initialization; BN starts as the identity map."""
        rng = np.random.default_rng(seed)
        store = ParameterStore()
        for depth, (layer, part, kshape, has_bn, _) in enumerate(cls.layer_plan(config)):
            fan_in = kshape[0] * kshape[1] * kshape[2]
            weight = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=kshape).astype(np.float32)
            store.add(f"{layer}.weight", weight, "conv", part, depth, layer)
            cout = kshape[3]
            if has_bn:
                store.add(f"{layer}.bn.gamma", np.ones(cout, np.float32), "bn-gamma", part, depth, layer)
                store.add(f"{layer}.bn.beta", np.zeros(cout, np.float32), "bn-beta", part, depth, layer)
                store.add(f"{layer}.bn.running_mean", np.zeros(cout, np.float32), "other", part, depth, layer)
                store.add(f"{layer}.bn.running_var", np.ones(cout, np.float32), "other", part, depth, layer)
            else:
                store.add(f"{layer}.bias", np.zeros(cout, np.float32), "conv", part, depth, layer)
        return cls(config, store, seed)

    # ------------------------------------------------------------- forward

    def check_image(self, image):
        image = np.asarray(image)
        if image.shape != self.config.input_size:
            raise InputError(f"image shape {image.shape} does not match network input {self.config.input_size}")
        return image

    def forward(self, image, bn_mode="eval"):
        """Predict an ``H x W`` depth tensor for one ``H x W x C`` image.

        ``bn_mode="train"`` normalizes with per-image statistics and updates
        the running statistics in place.
        """
        cfg = self.config
        s = self.store
        x = Tensor(self.check_image(image), dtype=s.array("enc0a.weight").dtype)
        skips = []
        stage_out = None
        for layer, part, _, has_bn, stride in self.layer_plan(cfg):
            if part == "encoder":
                x = T.conv2d(x, s.tensor(f"{layer}.weight"), stride=stride, pad=1)
                x = T.batch_norm(
                    x, s.tensor(f"{layer}.bn.gamma"), s.tensor(f"{layer}.bn.beta"),
                    s.array(f"{layer}.bn.running_mean"), s.array(f"{layer}.bn.running_var"),
                    eps=cfg.bn_eps, mode=bn_mode, momentum=cfg.bn_momentum,
                )
                x = T.relu(x)
                if layer.endswith("b"):
                    skips.append(x)
                    stage_out = x
            elif layer.startswith("dec"):
                level = int(layer[3:])
                x = T.upsample_bilinear(stage_out, 2)
                x = T.concat([x, skips[level]], axis=-1)
                x = T.relu(T.conv2d(x, s.tensor(f"{layer}.weight"), pad=1, bias=s.tensor(f"{layer}.bias")))
                stage_out = x
            else:
                x = T.conv2d(stage_out, s.tensor("head.weight"), pad=1, bias=s.tensor("head.bias"))
        h, w, _ = cfg.input_size
        sig = T.sigmoid(T.reshape(x, (h, w)))
        inv_max = 1.0 / cfg.max_depth
        disp = T.add_scalar(T.scale(sig, 1.0 / cfg.min_depth - inv_max), inv_max)
        return T.reciprocal(disp)

    __call__ = forward

    def predict(self, image):
        """Depth map as a plain array, without recording a tape."""
        with T.no_grad():
            return self.forward(image).data.copy()

    def astype(self, dtype):
        self.store.astype(dtype)
        return self

    def copy(self):
        other = DepthNet.build(self.config, 0)
        other.store.load_snapshot(self.store.snapshot())
        for n, e in self.store.items():
            other.store[n].adaptable = e.adaptable
            other.store[n].tensor.requires_grad = e.tensor.requires_grad
        other.seed = self.seed
        return other

    def n_parameters(self):
        return self.store.n_scalars(self.store.trainable_names())

    # ------------------------------------------------------------ checkpoint

    def save(self, path):
        """Write the binary checkpoint and a JSON sidecar next to it."""
        path = Path(path)
        header = json.dumps({"config": self.config.to_dict(), "seed": self.seed}, sort_keys=True).encode()
        with open(path, "wb") as fh:
            fh.write(CHECKPOINT_MAGIC)
            fh.write(struct.pack("<I", CHECKPOINT_VERSION))
            fh.write(struct.pack("<I", len(header)))
            fh.write(header)
            fh.write(struct.pack("<I", len(self.store)))
            for name, e in self.store.items():
                raw = name.encode()
                data = np.ascontiguousarray(e.tensor.data, dtype="<f4")
                fh.write(struct.pack("<I", len(raw)))
                fh.write(raw)
                fh.write(struct.pack("<I", data.ndim))
                fh.write(struct.pack(f"<{data.ndim}I", *data.shape))
                fh.write(data.tobytes())
        sidecar = {
            "format": "PITTA-CKPT",
            "version": CHECKPOINT_VERSION,
            "config": self.config.to_dict(),
            "seed": self.seed,
            "n_parameters": self.n_parameters(),
            "entries": [
                {"name": n, "shape": list(e.tensor.shape), "kind": e.kind, "part": e.part, "depth": e.depth}
                for n, e in self.store.items()
            ],
        }
        Path(str(path) + ".json").write_text(json.dumps(sidecar, indent=2))
        return path

    @classmethod
    def load(cls, path):
        path = Path(path)
        raw = path.read_bytes()
        reader = _Reader(raw, path)
        magic = reader.take(len(CHECKPOINT_MAGIC))
        if magic != CHECKPOINT_MAGIC:
            raise IngestionError(path, 0, "not a checkpoint (bad magic)")
        version = reader.u32()
        if version != CHECKPOINT_VERSION:
            raise IngestionError(path, reader.pos - 4, f"unsupported checkpoint version {version}")
        header_at = reader.pos
        try:
            header = json.loads(reader.take(reader.u32()))
            config = DepthNetConfig.from_dict(header["config"])
        except (ValueError, KeyError, TypeError) as exc:
            raise IngestionError(path, header_at, f"bad config block: {exc}") from None
        net = cls.build(config, seed=header.get("seed") or 0)
        net.seed = header.get("seed")
        for _ in range(reader.u32()):
            at = reader.pos
            name = reader.take(reader.u32()).decode()
            ndim = reader.u32()
            shape = tuple(reader.u32() for _ in range(ndim))
            count = int(np.prod(shape)) if ndim else 1
            data = np.frombuffer(reader.take(4 * count), dtype="<f4").reshape(shape)
            if name not in net.store.entries:
                raise IngestionError(path, at, f"unknown entry {name!r}")
            if net.store.array(name).shape != shape:
                raise IngestionError(path, at, f"entry {name!r} has shape {shape}, expected {net.store.array(name).shape}")
            net.store[name].tensor.data = data.astype(np.float32)
        return net


class _Reader:
    def __init__(self, raw, path):
        self.raw = raw
        self.pos = 0
        self.path = path

    def take(self, n):
        if self.pos + n > len(self.raw):
            raise IngestionError(self.path, self.pos, f"truncated: wanted {n} bytes")
        out = self.raw[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self):
        return struct.unpack("<I", self.take(4))[0]


def init_weights(config, seed):
    return DepthNet.build(config, seed)


# -------------------------------------------------------------- pretraining


class Adam:
    """Adam over named arrays; used only for supervised source pretraining."""

    def __init__(self, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m, self.v, self.t = {}, {}, 0

    def step(self, store, names):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        for n in names:
            p = store.tensor(n)
            if p.grad is None:
                continue
            g = p.grad
            m = self.m.setdefault(n, np.zeros_like(g))
            v = self.v.setdefault(n, np.zeros_like(g))
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            mhat = m / (1 - b1 ** self.t)
            vhat = v / (1 - b2 ** self.t)
            p.data -= (self.lr * mhat / (np.sqrt(vhat) + self.eps)).astype(p.data.dtype)


def supervised_loss(depth, gt):
    """Mean absolute depth error relative to ground truth, ``mean(|d - g| / g)``."""
    gt = np.asarray(gt, dtype=depth.dtype)
    return T.mean(T.mul(T.abs_(T.sub(depth, gt)), Tensor(1.0 / gt, dtype=depth.dtype)))


def pretrain_on_source(net, source, steps, lr=1e-3, checkpoint=None, log_every=0, logger=None):
    """Fit ``net`` on ground-truth depth from ``source`` frames.

    ``source`` is an iterable of frames with ground truth; lists are cycled. Returns
    the net (trained in place) and writes ``checkpoint`` when given.
    """
    if steps <= 0:
        if checkpoint:
            net.save(checkpoint)
        return net
    previous = net.store.adaptable_names()
    names = net.store.trainable_names()
    net.store.set_adaptable(names)
    opt = Adam(lr)
    frames = _cycle(source)
    try:
        for step in range(steps):
            frame = next(frames, None)
            if frame is None:
                raise InputError(f"source stream exhausted after {step} steps")
            if frame.gt_depth is None:
                raise InputError(f"source frame {frame.index} has no ground-truth depth")
            net.store.zero_grad()
            loss = supervised_loss(net.forward(frame.image, bn_mode="train"), frame.gt_depth)
            if not np.isfinite(loss.data):
                raise TrainingError(step)
            loss.backward()
            opt.step(net.store, names)
            if logger is not None and log_every and step % log_every == 0:
                logger.info("pretrain step %d loss %.4f", step, float(loss.data))
    finally:
        net.store.set_adaptable(previous)
    if checkpoint:
        net.save(checkpoint)
    return net


def _cycle(source):
    if isinstance(source, (list, tuple)):
        if not source:
            raise InputError("source stream is empty")
        return itertools.cycle(source)
    return iter(source)
