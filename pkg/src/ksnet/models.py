"""Model assembly, parameter accounting, inference protocols, checkpoints.

Both backbones (a CIFAR-style ResNet18 and a small two-conv CNN for
desk-scale tests) are built through a pluggable layer factory so one topology
serves the baseline, dropout, BNN, KSN and FKSN modes. Batch-norm layers and
their affine parameters stay deterministic in every mode.
"""

import json
import struct
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np

from .errors import CheckpointError, ConfigError, ModeError, ParameterError
from .layers import (
    BatchNorm2d, BnnConv, BnnLinear, DenseConv, DenseLinear, DropoutWrapped,
    ForwardContext, KsnConv, KsnLinear,
)
from .optim import make_optimizer
from .rng import StreamHub
from .tensor import Tensor, global_avg_pool, maxpool2x2, relu, reshape

FACTORY_KINDS = ("baseline", "baseline_dropout", "mcdrop", "bnn", "ksn", "fksn")


@dataclass(frozen=True)
class FactoryMode:
    """Which layer family the model is built from, with its hyperparameter."""

    kind: str
    delta: float = 1.0
    rate: float = 0.1

    def __post_init__(self):
        if self.kind not in FACTORY_KINDS:
            raise ConfigError(f"factory kind must be one of {FACTORY_KINDS}, got {self.kind!r}")
        if not 0.0 < self.delta <= 1.0:
            raise ConfigError(f"delta must be in (0, 1], got {self.delta}")
        if not 0.0 <= self.rate < 1.0:
            raise ConfigError(f"dropout rate must be in [0, 1), got {self.rate}")

    @property
    def variational(self) -> bool:
        return self.kind in ("bnn", "ksn")

    @property
    def stochastic(self) -> bool:
        return self.variational or self.kind == "mcdrop"


@dataclass(frozen=True)
class ModelConfig:
    arch: str
    num_classes: int
    input_channels: int
    factory: FactoryMode
    input_size: int = 28  # spatial side; only the small CNN's head depends on it

    def __post_init__(self):
        if self.arch not in ("resnet18", "smallcnn"):
            raise ConfigError(f"arch must be resnet18 or smallcnn, got {self.arch!r}")
        if self.num_classes < 2:
            raise ConfigError(f"num_classes must be >= 2, got {self.num_classes}")
        if self.input_channels < 1:
            raise ConfigError(f"input_channels must be >= 1, got {self.input_channels}")
        if self.arch == "smallcnn" and self.input_size % 4 != 0:
            raise ConfigError(
                f"smallcnn needs input_size divisible by 4, got {self.input_size}")


class LayerFactory:
    """Creates conv/linear layers in the configured mode.

    Dropout modes wrap each produced layer's input except the very first one,
    so the raw input image is never masked.
    """

    def __init__(self, mode: FactoryMode, hub: StreamHub):
        self.mode = mode
        self.hub = hub
        self.made: List = []

    def _wrap(self, layer):
        if self.mode.kind in ("baseline_dropout", "mcdrop") and self.made:
            layer = DropoutWrapped(layer, self.mode.rate,
                                   monte_carlo=self.mode.kind == "mcdrop")
        self.made.append(layer)
        return layer

    def conv(self, name: str, c_in: int, c_out: int, k: int, stride: int, padding: int):
        kind = self.mode.kind
        if kind == "bnn":
            layer = BnnConv(name, c_in, c_out, k, stride, padding, self.hub)
        elif kind in ("ksn", "fksn"):
            layer = KsnConv(name, c_in, c_out, k, stride, padding,
                            self.mode.delta, kind == "ksn", self.hub)
        else:
            layer = DenseConv(name, c_in, c_out, k, stride, padding, self.hub)
        return self._wrap(layer)

    def linear(self, name: str, c_in: int, c_out: int):
        kind = self.mode.kind
        if kind == "bnn":
            layer = BnnLinear(name, c_in, c_out, self.hub)
        elif kind in ("ksn", "fksn"):
            layer = KsnLinear(name, c_in, c_out, self.mode.delta,
                              kind == "ksn", self.hub)
        else:
            layer = DenseLinear(name, c_in, c_out, self.hub)
        return self._wrap(layer)


class BasicBlock:
    def __init__(self, name: str, c_in: int, c_out: int, stride: int,
                 factory: LayerFactory):
        self.conv1 = factory.conv(f"{name}.conv1", c_in, c_out, 3, stride, 1)
        self.bn1 = BatchNorm2d(f"{name}.bn1", c_out)
        self.conv2 = factory.conv(f"{name}.conv2", c_out, c_out, 3, 1, 1)
        self.bn2 = BatchNorm2d(f"{name}.bn2", c_out)
        if stride != 1 or c_in != c_out:
            self.ds_conv = factory.conv(f"{name}.downsample.conv", c_in, c_out, 1, stride, 0)
            self.ds_bn = BatchNorm2d(f"{name}.downsample.bn", c_out)
        else:
            self.ds_conv = None
            self.ds_bn = None

    def children(self):
        out = [self.conv1, self.bn1, self.conv2, self.bn2]
        if self.ds_conv is not None:
            out += [self.ds_conv, self.ds_bn]
        return out

    def forward(self, x: Tensor, ctx: ForwardContext) -> Tensor:
        h = relu(self.bn1.forward(self.conv1.forward(x, ctx), ctx))
        h = self.bn2.forward(self.conv2.forward(h, ctx), ctx)
        identity = x
        if self.ds_conv is not None:
            identity = self.ds_bn.forward(self.ds_conv.forward(x, ctx), ctx)
        return relu(h + identity)


class Model:
    """A built network: an ordered module list plus a forward recipe."""

    def __init__(self, cfg: ModelConfig, modules: List, factory: LayerFactory):
        self.cfg = cfg
        self.modules = modules
        self.factory_made = factory.made

    # -- parameter plumbing -------------------------------------------------

    def named_params(self) -> Dict[str, Tensor]:
        out: Dict[str, Tensor] = {}
        for m in self._flat_modules():
            out.update(m.named_params())
        return out

    def state_arrays(self) -> Dict[str, np.ndarray]:
        out: Dict[str, np.ndarray] = {}
        for m in self._flat_modules():
            if hasattr(m, "state_arrays"):
                out.update(m.state_arrays())
        return out

    def _flat_modules(self):
        flat = []
        for m in self.modules:
            flat.extend(m.children() if isinstance(m, BasicBlock) else [m])
        return flat

    @property
    def has_variational(self) -> bool:
        return self.cfg.factory.variational

    @property
    def is_mcdrop(self) -> bool:
        return self.cfg.factory.kind == "mcdrop"

    def forward(self, x: Tensor, ctx: ForwardContext) -> Tensor:
        raise NotImplementedError


class ResNet18(Model):
    """CIFAR-style ResNet18: 3x3 stem, four stages of two basic blocks."""

    def __init__(self, cfg: ModelConfig, hub: StreamHub):
        factory = LayerFactory(cfg.factory, hub)
        self.stem = factory.conv("stem.conv", cfg.input_channels, 64, 3, 1, 1)
        self.stem_bn = BatchNorm2d("stem.bn", 64)
        self.stages = []
        c_in = 64
        for i, c_out in enumerate((64, 128, 256, 512), start=1):
            blocks = []
            for j in (1, 2):
                stride = 2 if (i > 1 and j == 1) else 1
                blocks.append(BasicBlock(f"stage{i}.block{j}", c_in, c_out, stride, factory))
                c_in = c_out
            self.stages.append(blocks)
        self.fc = factory.linear("fc", 512, cfg.num_classes)
        modules = [self.stem, self.stem_bn]
        for blocks in self.stages:
            modules.extend(blocks)
        modules.append(self.fc)
        super().__init__(cfg, modules, factory)

    def forward(self, x: Tensor, ctx: ForwardContext) -> Tensor:
        h = relu(self.stem_bn.forward(self.stem.forward(x, ctx), ctx))
        for blocks in self.stages:
            for block in blocks:
                h = block.forward(h, ctx)
        h = global_avg_pool(h)
        return self.fc.forward(h, ctx)


class SmallCnn(Model):
    """conv(3x3, 32) - pool - conv(3x3, 64) - pool - linear head."""

    def __init__(self, cfg: ModelConfig, hub: StreamHub):
        factory = LayerFactory(cfg.factory, hub)
        self.conv1 = factory.conv("conv1", cfg.input_channels, 32, 3, 1, 1)
        self.conv2 = factory.conv("conv2", 32, 64, 3, 1, 1)
        side = cfg.input_size // 4
        self.fc = factory.linear("fc", 64 * side * side, cfg.num_classes)
        super().__init__(cfg, [self.conv1, self.conv2, self.fc], factory)

    def forward(self, x: Tensor, ctx: ForwardContext) -> Tensor:
        h = maxpool2x2(relu(self.conv1.forward(x, ctx)))
        h = maxpool2x2(relu(self.conv2.forward(h, ctx)))
        h = reshape(h, (h.shape[0], -1))
        return self.fc.forward(h, ctx)


def build_model(cfg: ModelConfig, hub: StreamHub) -> Model:
    if cfg.arch == "resnet18":
        return ResNet18(cfg, hub)
    return SmallCnn(cfg, hub)


# ---------------------------------------------------------------------------
# parameter accounting

def count_params(model: Model) -> Tuple[int, List[Tuple[str, int]]]:
    """Total trainable element count and a per-layer breakdown.

    Layers are keyed by the parameter name prefix, e.g. ``stage2.block1.conv1``.
    """
    table: Dict[str, int] = {}
    for name, p in model.named_params().items():
        layer = name.rsplit(".", 1)[0]
        table[layer] = table.get(layer, 0) + p.size
    rows = list(table.items())
    return sum(table.values()), rows


def relative_size(model: Model, baseline: Model) -> float:
    total, _ = count_params(model)
    base_total, _ = count_params(baseline)
    return total / base_total


# ---------------------------------------------------------------------------
# inference protocols

def _softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def predict_deterministic(model: Model, x: Tensor) -> np.ndarray:
    """Eval-mode forward with no sampling; valid for every factory mode."""
    ctx = ForwardContext(StreamHub(0), train=False, sample=False, phase="eval")
    return _softmax(model.forward(x, ctx).data)


def predict_posterior_mean(model: Model, x: Tensor) -> np.ndarray:
    """Single forward through the distribution means (epsilon forced to zero)."""
    if not model.has_variational:
        raise ModeError("posterior-mean inference needs a variational model")
    return predict_deterministic(model, x)


def predict_ensemble(model: Model, x: Tensor, samples: int = 10,
                     streams: Optional[StreamHub] = None, base_step: int = 0) -> np.ndarray:
    """Average softmax probabilities over independent weight/mask draws."""
    if samples < 1:
        raise ParameterError(f"samples must be >= 1, got {samples}")
    if not (model.has_variational or model.is_mcdrop):
        raise ModeError("ensemble inference needs a variational or MC-dropout model")
    streams = streams or StreamHub(0)
    acc = np.zeros((x.shape[0], model.cfg.num_classes), dtype=np.float64)
    for s in range(samples):
        ctx = ForwardContext(streams, step=base_step + s, train=False,
                             sample=True, phase="eval")
        acc += _softmax(model.forward(x, ctx).data)
    return (acc / samples).astype(np.float32)


# ---------------------------------------------------------------------------
# checkpoints

_MAGIC = b"KSNCKPT1"
_ALIGN = 64


def _align(n: int) -> int:
    return (n + _ALIGN - 1) // _ALIGN * _ALIGN


def _config_dict(cfg: ModelConfig) -> dict:
    return asdict(cfg)


def _config_from_dict(d: dict) -> ModelConfig:
    try:
        factory = FactoryMode(**d["factory"])
        return ModelConfig(arch=d["arch"], num_classes=d["num_classes"],
                           input_channels=d["input_channels"], factory=factory,
                           input_size=d.get("input_size", 28))
    except (KeyError, TypeError) as exc:
        raise CheckpointError(f"malformed config in checkpoint header: {exc}") from exc


def save_checkpoint(model: Model, optimizer, path: str, epoch: int,
                    global_step: int, seed: int) -> None:
    """Self-describing container: JSON header + 64-byte-aligned f32 payloads."""
    tensors: List[Tuple[str, np.ndarray]] = []
    for name, p in model.named_params().items():
        tensors.append((name, p.data))
    for name, arr in model.state_arrays().items():
        tensors.append((name, arr))
    for name, arr in optimizer.state_tensors().items():
        tensors.append((name, arr))

    directory = []
    offset = 0
    for name, arr in tensors:
        offset = _align(offset)
        directory.append({"name": name, "shape": list(arr.shape),
                          "offset": offset, "nbytes": arr.nbytes})
        offset += arr.nbytes

    header = {
        "format": "ksnet-checkpoint", "version": 1,
        "config": _config_dict(model.cfg),
        "epoch": epoch, "global_step": global_step, "seed": seed,
        "optimizer": {"kind": type(optimizer).__name__.lower(),
                      "lr": optimizer.lr, "t": optimizer.t},
        "tensors": directory,
    }
    hbytes = json.dumps(header, sort_keys=True).encode()
    payload_start = _align(len(_MAGIC) + 8 + len(hbytes))

    with open(path, "wb") as f:
        f.write(_MAGIC)
        f.write(struct.pack("<Q", len(hbytes)))
        f.write(hbytes)
        f.write(b"\0" * (payload_start - len(_MAGIC) - 8 - len(hbytes)))
        pos = 0
        for entry, (_, arr) in zip(directory, tensors):
            f.write(b"\0" * (entry["offset"] - pos))
            data = np.ascontiguousarray(arr, dtype=np.float32)
            f.write(data.astype("<f4", copy=False).tobytes())
            pos = entry["offset"] + entry["nbytes"]


def load_checkpoint(path: str):
    """Rebuild (model, optimizer, epoch, global_step, seed) from a checkpoint."""
    with open(path, "rb") as f:
        blob = f.read()
    if len(blob) < len(_MAGIC) + 8 or blob[:len(_MAGIC)] != _MAGIC:
        raise CheckpointError(f"{path}: not a ksnet checkpoint")
    (hlen,) = struct.unpack_from("<Q", blob, len(_MAGIC))
    hstart = len(_MAGIC) + 8
    if hstart + hlen > len(blob):
        raise CheckpointError(f"{path}: truncated header")
    try:
        header = json.loads(blob[hstart:hstart + hlen].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: unreadable header: {exc}") from exc
    if header.get("format") != "ksnet-checkpoint" or header.get("version") != 1:
        raise CheckpointError(f"{path}: unsupported checkpoint format/version")

    cfg = _config_from_dict(header["config"])
    seed = int(header["seed"])
    model = build_model(cfg, StreamHub(seed))
    payload_start = _align(hstart + hlen)

    arrays: Dict[str, np.ndarray] = {}
    for entry in header["tensors"]:
        start = payload_start + entry["offset"]
        end = start + entry["nbytes"]
        if end > len(blob):
            raise CheckpointError(
                f"{path}: payload truncated for tensor {entry['name']!r}")
        arr = np.frombuffer(blob[start:end], dtype="<f4").reshape(entry["shape"])
        arrays[entry["name"]] = arr.astype(np.float32)

    for name, p in model.named_params().items():
        if name not in arrays:
            raise CheckpointError(f"{path}: missing tensor {name!r}")
        if tuple(arrays[name].shape) != p.shape:
            raise CheckpointError(
                f"{path}: tensor {name!r} shape {arrays[name].shape} != expected {p.shape}")
        p.data = arrays[name].copy()
    for name, arr in model.state_arrays().items():
        if name not in arrays:
            raise CheckpointError(f"{path}: missing state array {name!r}")
        arr[...] = arrays[name]

    opt_info = header["optimizer"]
    optimizer = make_optimizer(opt_info["kind"], list(model.named_params().items()),
                               lr=opt_info["lr"])
    try:
        optimizer.load_state(arrays, opt_info["t"])
    except KeyError as exc:
        raise CheckpointError(f"{path}: missing optimizer state: {exc}") from exc
    return model, optimizer, int(header["epoch"]), int(header["global_step"]), seed
