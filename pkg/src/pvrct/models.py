"""Mini 3D DenseNet / ResNet classifiers and their checkpoint files.

The DenseNet stem is a stride-2 3-cube conv, BN, ReLU; the ResNet stem is a
stride-1 conv, BN, ReLU and 2x max-pool. Either halves the grid once. Both
end in global average pooling followed by a single-output linear head
named ``head``. Checkpoints are a JSON sidecar (``<stem>.ckpt.json``) holding
names, shapes and byte offsets, plus a raw little-endian f32 blob
(``<stem>.ckpt.raw``).
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .errors import CheckpointError, ConfigError
from .nn import (
    AvgPool3d,
    BatchNorm3d,
    Conv3d,
    GlobalAvgPool,
    Linear,
    MaxPool3d,
    Module,
    ReLU,
    Sequential,
)
from .nn import functional as F

VARIANTS = ("mini_densenet", "mini_resnet")
HEADS = ("classifier_logit", "regressor_scalar")
CHECKPOINT_FORMAT_VERSION = 1

# regression guard: parameter counts of the default 32^3 configs
DEFAULT_PARAM_COUNTS = {"mini_densenet": 27_873, "mini_resnet": 224_913}


@dataclass
class DenseConfig:
    growth_rate: int = 8
    block_layers: list = field(default_factory=lambda: [2, 2, 2])


@dataclass
class ResConfig:
    block_channels: list = field(default_factory=lambda: [16, 32, 64])


@dataclass
class ModelConfig:
    variant: str = "mini_densenet"
    input_shape: tuple = (32, 32, 32)
    stem_channels: int = 16
    dense: DenseConfig = field(default_factory=DenseConfig)
    res: ResConfig = field(default_factory=ResConfig)
    head: str = "classifier_logit"

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        dense = DenseConfig(**d.pop("dense", {}))
        res = ResConfig(**d.pop("res", {}))
        if "input_shape" in d:
            d["input_shape"] = tuple(d["input_shape"])
        return cls(dense=dense, res=res, **d)

    def to_dict(self):
        d = asdict(self)
        d["input_shape"] = list(self.input_shape)
        return d

    def num_stages(self):
        if self.variant == "mini_densenet":
            return len(self.dense.block_layers)
        return len(self.res.block_channels)

    def downsample_factor(self):
        # stem, then one halving between consecutive stages
        return 2 ** self.num_stages()

    def validate(self, prefix="model"):
        if self.variant not in VARIANTS:
            raise ConfigError(f"{prefix}.variant", f"unknown variant {self.variant!r}")
        if self.head not in HEADS:
            raise ConfigError(f"{prefix}.head", f"unknown head {self.head!r}")
        if len(self.input_shape) != 3 or any(int(s) < 1 for s in self.input_shape):
            raise ConfigError(f"{prefix}.input_shape", "must be 3 positive integers")
        if self.stem_channels < 1:
            raise ConfigError(f"{prefix}.stem_channels", "must be >= 1")
        if self.variant == "mini_densenet":
            if self.dense.growth_rate < 1:
                raise ConfigError(f"{prefix}.dense.growth_rate", "must be >= 1")
            if not self.dense.block_layers or any(n < 1 for n in self.dense.block_layers):
                raise ConfigError(f"{prefix}.dense.block_layers", "must be a non-empty list of positive ints")
        else:
            if not self.res.block_channels or any(c < 1 for c in self.res.block_channels):
                raise ConfigError(f"{prefix}.res.block_channels", "must be a non-empty list of positive ints")
        f = self.downsample_factor()
        if any(int(s) % f for s in self.input_shape):
            raise ConfigError(
                f"{prefix}.input_shape",
                f"{tuple(self.input_shape)} not divisible by downsampling factor {f}",
            )

    def hash(self):
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


class DenseLayer(Module):
    """BN-ReLU-conv producing ``growth`` channels, concatenated to the input."""

    def __init__(self, in_ch, growth, rng):
        super().__init__()
        self.in_ch, self.growth = in_ch, growth
        self.body = self.add_child("body", Sequential(
            ("norm", BatchNorm3d(in_ch)), ("relu", ReLU()),
            ("conv", Conv3d(in_ch, growth, 3, rng=rng, bias=False)),
        ))

    def forward(self, x):
        return F.channel_concat([x, self.body.forward(x)])

    def backward(self, grad_out):
        g_skip, g_new = F.channel_concat_backward(grad_out, [self.in_ch, self.growth])
        return g_skip + self.body.backward(np.ascontiguousarray(g_new))


class Transition(Sequential):
    def __init__(self, in_ch, out_ch, rng):
        super().__init__(
            ("norm", BatchNorm3d(in_ch)), ("relu", ReLU()),
            ("conv", Conv3d(in_ch, out_ch, 1, padding=0, rng=rng, bias=False)),
            ("pool", AvgPool3d(2)),
        )


class ResidualBlock(Module):
    """Two 3-cube convs with identity or 1-cube projection shortcut."""

    def __init__(self, in_ch, out_ch, stride, rng):
        super().__init__()
        self.main = self.add_child("main", Sequential(
            ("conv1", Conv3d(in_ch, out_ch, 3, stride=stride, rng=rng, bias=False)),
            ("norm1", BatchNorm3d(out_ch)), ("relu1", ReLU()),
            ("conv2", Conv3d(out_ch, out_ch, 3, rng=rng, bias=False)),
            ("norm2", BatchNorm3d(out_ch)),
        ))
        self.shortcut = None
        if stride != 1 or in_ch != out_ch:
            self.shortcut = self.add_child("shortcut", Sequential(
                ("conv", Conv3d(in_ch, out_ch, 1, stride=stride, padding=0, rng=rng, bias=False)),
                ("norm", BatchNorm3d(out_ch)),
            ))
        self.relu = self.add_child("relu", ReLU())

    def forward(self, x):
        skip = x if self.shortcut is None else self.shortcut.forward(x)
        return self.relu.forward(F.residual_add(self.main.forward(x), skip))

    def backward(self, grad_out):
        g = self.relu.backward(grad_out)
        g_main, g_skip = F.residual_add_backward(g)
        gx = self.main.backward(g_main)
        if self.shortcut is not None:
            g_skip = self.shortcut.backward(g_skip)
        return gx + g_skip


class Model(Module):
    """Backbone (``stem`` + ``features``) followed by a linear ``head``."""

    def __init__(self, config: ModelConfig, rng):
        super().__init__()
        self.config = config
        c = config.stem_channels
        if config.variant == "mini_densenet":
            stem = [("conv", Conv3d(1, c, 3, stride=2, rng=rng, bias=False)),
                    ("norm", BatchNorm3d(c)), ("relu", ReLU())]
        else:
            stem = [("conv", Conv3d(1, c, 3, rng=rng, bias=False)),
                    ("norm", BatchNorm3d(c)), ("relu", ReLU()), ("pool", MaxPool3d(2, 2))]
        self.stem = self.add_child("stem", Sequential(*stem))
        # no grad needed w.r.t. the image during training
        self.stem.layers[0].need_input_grad = False
        stages = []
        if config.variant == "mini_densenet":
            g = config.dense.growth_rate
            n_blocks = len(config.dense.block_layers)
            for b, n_layers in enumerate(config.dense.block_layers, start=1):
                layers = []
                for i in range(1, n_layers + 1):
                    layers.append((f"layer{i}", DenseLayer(c, g, rng)))
                    c += g
                stages.append((f"block{b}", Sequential(*layers)))
                if b < n_blocks:
                    stages.append((f"transition{b}", Transition(c, c // 2, rng)))
                    c = c // 2
            stages.append(("norm", BatchNorm3d(c)))
            stages.append(("relu", ReLU()))
            last = f"features.block{n_blocks}.layer{config.dense.block_layers[-1]}.body.conv"
        else:
            for s, out_ch in enumerate(config.res.block_channels, start=1):
                stride = 1 if s == 1 else 2
                stages.append((f"stage{s}", ResidualBlock(c, out_ch, stride, rng)))
                c = out_ch
            last = f"features.stage{len(config.res.block_channels)}.main.conv2"
        self.features = self.add_child("features", Sequential(*stages))
        self.pool = self.add_child("pool", GlobalAvgPool())
        self.head = self.add_child("head", Linear(c, 1, rng=rng))
        self.feature_channels = c
        self.default_cam_layer = last

    # -- modules by dotted name ------------------------------------------
    def named_modules(self, prefix="", module=None):
        module = self if module is None else module
        for name, child in module._children.items():
            full = prefix + name
            yield full, child
            yield from self.named_modules(full + ".", child)

    def get_module(self, name):
        for n, m in self.named_modules():
            if n == name:
                return m
        raise KeyError(name)

    def conv_layer_names(self):
        return [n for n, m in self.named_modules() if isinstance(m, Conv3d)]

    # -- passes -----------------------------------------------------------
    def forward(self, x):
        expected = (1,) + tuple(self.config.input_shape)
        if x.ndim != 5 or tuple(x.shape[1:]) != expected:
            raise ValueError(f"model input must be (N, {', '.join(map(str, expected))}), got {x.shape}")
        h = self.features.forward(self.stem.forward(x))
        return self.head.forward(self.pool.forward(h))

    def forward_features(self, x):
        return self.pool.forward(self.features.forward(self.stem.forward(x)))

    def backward(self, grad_logits, head_only: bool = False):
        g = self.head.backward(grad_logits)
        if head_only:
            return
        g = self.pool.backward(g)
        g = self.features.backward(g)
        self.stem.backward(g)

    def is_head(self, name):
        return name.startswith("head.")

    def backbone_parameters(self):
        return [p for n, p in self.named_parameters() if not self.is_head(n)]

    def head_parameters(self):
        return [p for n, p in self.named_parameters() if self.is_head(n)]

    def num_parameters(self):
        return int(sum(p.value.size for p in self.parameters()))

    def state(self):
        """Ordered ``name -> array`` for parameters then buffers."""
        out = {n: p.value for n, p in self.named_parameters()}
        for n, owner, key in self.named_buffers():
            out[n] = owner._buffers[key]
        return out


def build_model(config: ModelConfig, rng=None) -> Model:
    """Build a model; ``rng`` may be a Generator or an int seed."""
    config.validate()
    if rng is None or isinstance(rng, (int, np.integer)):
        rng = np.random.default_rng(0 if rng is None else int(rng))
    return Model(config, rng)


def forward(model: Model, batch, mode: str = "eval"):
    """Run the model in ``"train"`` or ``"eval"`` mode; returns ``(N, 1)`` logits."""
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    model.train(mode == "train")
    return model.forward(batch)


# -- checkpoints -------------------------------------------------------------

def checkpoint_paths(path):
    path = Path(path)
    name = path.name
    for suffix in (".ckpt.json", ".ckpt.raw"):
        if name.endswith(suffix):
            name = name[: -len(suffix)]
    base = path.with_name(name)
    return base.with_name(name + ".ckpt.json"), base.with_name(name + ".ckpt.raw")


def save_checkpoint(model: Model, path, task: str = "classification"):
    """Write ``<stem>.ckpt.json`` + ``<stem>.ckpt.raw``; returns the JSON path."""
    jpath, rpath = checkpoint_paths(path)
    entries, chunks, offset = [], [], 0
    param_names = {n for n, _ in model.named_parameters()}
    for name, arr in model.state().items():
        data = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        entries.append({
            "name": name,
            "kind": "param" if name in param_names else "buffer",
            "shape": list(arr.shape),
            "offset": offset,
            "nbytes": len(data),
        })
        chunks.append(data)
        offset += len(data)
    meta = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "metadata": {
            "variant": model.config.variant,
            "head": model.config.head,
            "config_hash": model.config.hash(),
            "task": task,
        },
        "model_config": model.config.to_dict(),
        "tensors": entries,
    }
    jpath.parent.mkdir(parents=True, exist_ok=True)
    rpath.write_bytes(b"".join(chunks))
    jpath.write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    return jpath


def read_checkpoint(path):
    """Return ``(meta, {name: float32 array})``."""
    jpath, rpath = checkpoint_paths(path)
    if not jpath.exists() or not rpath.exists():
        raise FileNotFoundError(f"checkpoint not found: {jpath} / {rpath}")
    meta = json.loads(jpath.read_text())
    if meta.get("format_version") != CHECKPOINT_FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint format_version {meta.get('format_version')!r}")
    raw = rpath.read_bytes()
    tensors = {}
    for e in meta["tensors"]:
        start, n = e["offset"], e["nbytes"]
        if start + n > len(raw):
            raise CheckpointError(f"tensor {e['name']!r} extends past end of payload")
        arr = np.frombuffer(raw[start:start + n], dtype="<f4").astype(np.float32)
        tensors[e["name"]] = arr.reshape(e["shape"])
    return meta, tensors


def load_checkpoint(model: Model, path, policy: str = "full"):
    """Restore parameters (and BN statistics) into ``model`` in place.

    ``backbone_only`` skips every ``head.*`` entry on both sides, so a
    regression checkpoint can seed a classifier.
    """
    if policy not in ("full", "backbone_only"):
        raise ValueError(f"policy must be 'full' or 'backbone_only', got {policy!r}")
    meta, tensors = read_checkpoint(path)
    target = model.state()
    keep = (lambda n: True) if policy == "full" else (lambda n: not model.is_head(n))
    wanted = {n for n in target if keep(n)}
    given = {n for n in tensors if keep(n)}
    problems = [f"missing {n}" for n in sorted(wanted - given)]
    problems += [f"unexpected {n}" for n in sorted(given - wanted)]
    for n in sorted(wanted & given):
        if tuple(tensors[n].shape) != tuple(target[n].shape):
            problems.append(f"shape {n}: checkpoint {tuple(tensors[n].shape)} vs model {tuple(target[n].shape)}")
    if problems:
        raise CheckpointError("checkpoint mismatch: " + "; ".join(problems))
    for n in sorted(wanted):
        target[n][...] = tensors[n].astype(target[n].dtype)
    return meta
