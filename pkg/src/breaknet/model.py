"""BreakNet: multi-path conv + transformer encoder with a lateral decoder.

Layout of the network (H x W input, one grey channel)::

    stem (H)  ->  MSFE1 (H/2) -> MSFE2 (H/4) -> MSFE3 (H/8) -> MSFE4 (H/16)
        |             |              |              |              |
     lateral       lateral        lateral        lateral      bottleneck
        |             |              |              |              |
      DEC1  <-----  DEC2  <-----   DEC3  <-----   DEC4  <--------- +

Each MSFE stage embeds its input at half resolution with one stride-2
depthwise convolution per patch kernel, runs a CNN block and a
transformer block on every embedding, concatenates the results and fuses
them with a pointwise convolution.  DEC2..DEC4 feed auxiliary heads, DEC1
the main head.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterator, Optional

import numpy as np

from . import ops, tensorio
from .tensor import Tensor

CLASS_NAMES = ("above_ILM", "NFL", "IPL", "INL", "OPL", "ONL", "EZ", "RPE", "below_BM")
STRATEGIES = ("PL", "FA")


class ConfigError(ValueError):
    pass


@dataclass
class ModelConfig:
    stages: int = 4
    patch_kernels: tuple = (3, 5)
    attention_strategy: dict = field(default_factory=lambda: {3: "PL", 5: "FA"})
    encoder_channels: tuple = (8, 16, 32, 64)
    stem_channels: int = 8
    decoder_width: int = 32
    num_classes: int = 9
    mlp_ratio: float = 4.0
    heads: int = 1
    dropout: float = 0.1

    def __post_init__(self):
        self.patch_kernels = tuple(int(k) for k in self.patch_kernels)
        self.encoder_channels = tuple(int(c) for c in self.encoder_channels)
        self.attention_strategy = {int(k): str(v) for k, v in self.attention_strategy.items()}
        self.validate()

    def validate(self) -> None:
        if self.stages < 1:
            raise ConfigError("stages must be >= 1")
        if len(self.encoder_channels) != self.stages:
            raise ConfigError(
                f"encoder_channels has {len(self.encoder_channels)} entries, expected stages={self.stages}")
        if not self.patch_kernels:
            raise ConfigError("patch_kernels must not be empty")
        if len(set(self.patch_kernels)) != len(self.patch_kernels):
            raise ConfigError("patch_kernels must be distinct")
        for k in self.patch_kernels:
            if k < 1 or k % 2 == 0:
                raise ConfigError(f"patch kernel {k} must be odd and positive")
            if k not in self.attention_strategy:
                raise ConfigError(f"no attention_strategy for patch kernel {k}")
            if self.attention_strategy[k] not in STRATEGIES:
                raise ConfigError(f"attention_strategy[{k}] must be one of {STRATEGIES}")
        extra = set(self.attention_strategy) - set(self.patch_kernels)
        if extra:
            raise ConfigError(f"attention_strategy names unknown kernels {sorted(extra)}")
        for name in ("stem_channels", "decoder_width", "num_classes", "heads"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if min(self.encoder_channels) < 1:
            raise ConfigError("encoder_channels must be positive")
        channels_in = (self.stem_channels,) + self.encoder_channels[:-1]
        for c in channels_in:
            if c % self.heads:
                raise ConfigError(f"stage width {c} not divisible by heads={self.heads}")
        if self.mlp_ratio <= 0:
            raise ConfigError("mlp_ratio must be positive")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError("dropout must be in [0, 1)")

    @property
    def divisor(self) -> int:
        return 2 ** self.stages

    def check_input(self, h: int, w: int) -> None:
        if h % self.divisor or w % self.divisor:
            raise ConfigError(f"input {h}x{w} not divisible by 2**stages = {self.divisor}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["patch_kernels"] = list(self.patch_kernels)
        d["encoder_channels"] = list(self.encoder_channels)
        d["attention_strategy"] = {str(k): v for k, v in self.attention_strategy.items()}
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown model config fields: {sorted(unknown)}")
        return cls(**d)


VARIANTS = {
    "BL1": ((3,), {3: "PL"}),
    "BL2": ((3,), {3: "FA"}),
    "BL3": ((3, 5), {3: "PL", 5: "PL"}),
    "BL4": ((3, 5), {3: "FA", 5: "FA"}),
    "BreakNet": ((3, 5), {3: "PL", 5: "FA"}),
}


def build_variant(name: str, **overrides) -> ModelConfig:
    """Config for one of the ablation variants; shared fields via ``overrides``."""
    if name not in VARIANTS:
        raise ConfigError(f"unknown variant {name!r}; choose from {sorted(VARIANTS)}")
    kernels, strategy = VARIANTS[name]
    return ModelConfig(patch_kernels=kernels, attention_strategy=dict(strategy), **overrides)


# ---------------------------------------------------------------------------
# modules
# ---------------------------------------------------------------------------

class Module:
    training = True

    def children(self) -> Iterator[tuple[str, "Module"]]:
        for name, value in vars(self).items():
            if isinstance(value, Module):
                yield name, value
            elif isinstance(value, (list, tuple)):
                for i, v in enumerate(value):
                    if isinstance(v, Module):
                        yield f"{name}.{i}", v

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, value in vars(self).items():
            if isinstance(value, Tensor):
                yield prefix + name, value
        for name, child in self.children():
            yield from child.named_parameters(f"{prefix}{name}.")

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for name in getattr(self, "_buffer_names", ()):
            yield prefix + name, getattr(self, name)
        for name, child in self.children():
            yield from child.named_buffers(f"{prefix}{name}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def train(self, mode: bool = True) -> "Module":
        self.training = mode
        for _, child in self.children():
            child.train(mode)
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def to_dtype(self, dtype) -> "Module":
        for p in self.parameters():
            p.data = p.data.astype(dtype)
            p.grad = None
        for mod in self.modules():
            for name in getattr(mod, "_buffer_names", ()):
                setattr(mod, name, getattr(mod, name).astype(dtype))
        return self

    def modules(self) -> Iterator["Module"]:
        yield self
        for _, child in self.children():
            yield from child.modules()

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


def _param(arr) -> Tensor:
    return Tensor(arr, requires_grad=True)


class Conv2d(Module):
    """Convolution with He-uniform weights and zero bias."""

    def __init__(self, cin, cout, kernel, rng, stride=1, padding=None, groups=1, bias=True, dtype=np.float32):
        self.stride = stride
        self.padding = kernel // 2 if padding is None else padding
        self.groups = groups
        fan_in = (cin // groups) * kernel * kernel
        bound = math.sqrt(6.0 / fan_in)
        self.weight = _param(rng.uniform(-bound, bound, (cout, cin // groups, kernel, kernel)).astype(dtype))
        self.bias = _param(np.zeros(cout, dtype=dtype)) if bias else None

    def forward(self, x):
        return ops.conv2d(x, self.weight, self.bias, self.stride, self.padding, self.groups)


def pointwise(cin, cout, rng, bias=True, dtype=np.float32) -> Conv2d:
    return Conv2d(cin, cout, 1, rng, bias=bias, dtype=dtype)


def depthwise(c, kernel, rng, stride=1, bias=True, dtype=np.float32) -> Conv2d:
    return Conv2d(c, c, kernel, rng, stride=stride, groups=c, bias=bias, dtype=dtype)


class BatchNorm2d(Module):
    _buffer_names = ("running_mean", "running_var")

    def __init__(self, c, dtype=np.float32, momentum=0.1, eps=1e-5):
        self.gamma = _param(np.ones(c, dtype=dtype))
        self.beta = _param(np.zeros(c, dtype=dtype))
        self.running_mean = np.zeros(c, dtype=dtype)
        self.running_var = np.ones(c, dtype=dtype)
        self.momentum = momentum
        self.eps = eps

    def forward(self, x):
        return ops.batch_norm(x, self.gamma, self.beta, self.running_mean, self.running_var,
                              self.training, self.momentum, self.eps)


class LayerNorm2d(Module):
    def __init__(self, c, dtype=np.float32, eps=1e-5):
        self.gamma = _param(np.ones(c, dtype=dtype))
        self.beta = _param(np.zeros(c, dtype=dtype))
        self.eps = eps

    def forward(self, x):
        return ops.layer_norm(x, self.gamma, self.beta, self.eps, axis=1)


class Stem(Module):
    """Two stride-1 conv3x3 -> BN -> leaky ReLU units."""

    def __init__(self, cin, cout, rng, dtype=np.float32):
        self.conv1 = Conv2d(cin, cout, 3, rng, bias=False, dtype=dtype)
        self.bn1 = BatchNorm2d(cout, dtype)
        self.conv2 = Conv2d(cout, cout, 3, rng, bias=False, dtype=dtype)
        self.bn2 = BatchNorm2d(cout, dtype)

    def forward(self, x):
        x = ops.leaky_relu(self.bn1(self.conv1(x)))
        return ops.leaky_relu(self.bn2(self.conv2(x)))


class PatchEmbed(Module):
    def __init__(self, c, kernel, rng, dtype=np.float32):
        self.kernel = kernel
        self.proj = depthwise(c, kernel, rng, stride=2, dtype=dtype)

    def forward(self, x):
        h, w = x.shape[2:]
        if h % 2 or w % 2:
            raise ConfigError(f"patch embedding needs even spatial dims, got {h}x{w}")
        return self.proj(x)


class CNNBlock(Module):
    def __init__(self, c, rng, dtype=np.float32):
        self.pw1 = pointwise(c, c, rng, dtype=dtype)
        self.dw = depthwise(c, 3, rng, dtype=dtype)
        self.pw2 = pointwise(c, c, rng, dtype=dtype)

    def forward(self, x):
        return ops.add(self.pw2(self.dw(self.pw1(x))), x)


def sa_pool(tokens) -> Tensor:
    """Token mixing by 3x3 average pooling (stride 1, shape preserving)."""
    return ops.avg_pool2d(tokens, kernel=3, stride=1, padding=1)


def sa_factorized(q, k, v, heads: int = 1) -> Tensor:
    """Linear-complexity attention on N x C x H x W query/key/value maps.

    Keys are softmax-normalised over the token axis, ``k^T v`` gives a d x d
    context per head, and each query token is multiplied by it and scaled
    by 1/sqrt(d).
    """
    n, c, h, w = q.shape
    if c % heads:
        raise ConfigError(f"channels {c} not divisible by heads={heads}")
    d, t = c // heads, h * w

    def split(x):  # N x heads x T x d
        return ops.transpose(ops.reshape(x, (n, heads, d, t)), (0, 1, 3, 2))

    qh, kh, vh = split(q), split(k), split(v)
    # token reductions are summed in sorted order: permuting tokens permutes the output exactly
    context = ops.contract_tokens(ops.softmax(kh, axis=2, canonical=True), vh)
    out = ops.scale(ops.matmul(qh, context), 1.0 / math.sqrt(d))
    return ops.reshape(ops.transpose(out, (0, 1, 3, 2)), (n, c, h, w))


class FactorizedAttention(Module):
    def __init__(self, c, heads, rng, dtype=np.float32):
        self.heads = heads
        self.q = pointwise(c, c, rng, dtype=dtype)
        self.k = pointwise(c, c, rng, dtype=dtype)
        self.v = pointwise(c, c, rng, dtype=dtype)

    def forward(self, x):
        return sa_factorized(self.q(x), self.k(x), self.v(x), self.heads)


class PoolMixer(Module):
    def forward(self, x):
        return sa_pool(x)


class TransBlock(Module):
    """x_bar = Dpt(SA(Norm(x))); out = Dpt(MLP(Norm(x_bar + x))) + x_bar + x."""

    def __init__(self, c, strategy, mlp_ratio, heads, drop, rng, dtype=np.float32):
        self.strategy = strategy
        self.drop = drop
        self.norm1 = LayerNorm2d(c, dtype)
        self.mixer = PoolMixer() if strategy == "PL" else FactorizedAttention(c, heads, rng, dtype)
        self.norm2 = LayerNorm2d(c, dtype)
        hidden = max(1, int(round(c * mlp_ratio)))
        self.fc1 = pointwise(c, hidden, rng, dtype=dtype)
        self.fc2 = pointwise(hidden, c, rng, dtype=dtype)
        self.rng = None

    def forward(self, x):
        x_bar = ops.dropout(self.mixer(self.norm1(x)), self.drop, self.training, self.rng)
        skip = ops.add(x_bar, x)
        mlp = self.fc2(ops.gelu(self.fc1(self.norm2(skip))))
        return ops.add(ops.dropout(mlp, self.drop, self.training, self.rng), skip)


class KernelPath(Module):
    def __init__(self, c, kernel, strategy, cfg: ModelConfig, rng, dtype=np.float32):
        self.embed = PatchEmbed(c, kernel, rng, dtype)
        self.cnn = CNNBlock(c, rng, dtype)
        self.trans = TransBlock(c, strategy, cfg.mlp_ratio, cfg.heads, cfg.dropout, rng, dtype)


class MSFE(Module):
    def __init__(self, cin, cout, cfg: ModelConfig, rng, dtype=np.float32):
        self.paths = [KernelPath(cin, k, cfg.attention_strategy[k], cfg, rng, dtype) for k in cfg.patch_kernels]
        self.fuse = pointwise(2 * len(self.paths) * cin, cout, rng, dtype=dtype)

    def forward(self, x):
        local, context = [], []
        for path in self.paths:
            tokens = path.embed(x)
            local.append(path.cnn(tokens))
            context.append(path.trans(tokens))
        return self.fuse(ops.concat(local + context, axis=1))


class DecBlock(Module):
    """out = UP(LR(BN(DW3(d)))); D = PW(out + lateral)."""

    def __init__(self, width, num_classes, rng, dtype=np.float32):
        self.dw = depthwise(width, 3, rng, bias=False, dtype=dtype)
        self.bn = BatchNorm2d(width, dtype)
        self.pw = pointwise(width, width, rng, dtype=dtype)
        self.head = pointwise(width, num_classes, rng, dtype=dtype)
        # zero head: every class starts at probability 1/C, so no class is
        # suppressed from the first step (random heads can start a thin
        # class near 0.01 and it never recovers under the Dice loss)
        self.head.weight.data[...] = 0

    def forward(self, d_next, lateral):
        h, w = lateral.shape[2:]
        if (h, w) != (2 * d_next.shape[2], 2 * d_next.shape[3]):
            raise ValueError(f"dec_block: lateral {h}x{w} is not twice {d_next.shape[2]}x{d_next.shape[3]}")
        if lateral.shape[1] != d_next.shape[1]:
            raise ValueError("dec_block: lateral and decoder channel counts differ")
        out = ops.bilinear_upsample(ops.leaky_relu(self.bn(self.dw(d_next))), h, w)
        return self.pw(ops.add(out, lateral))


class BreakNet(Module):
    def __init__(self, cfg: Optional[ModelConfig] = None, seed: int = 0, dtype=np.float32):
        self.config = cfg or ModelConfig()
        self.dtype = np.dtype(dtype)
        rng = np.random.default_rng(seed)
        c = self.config
        self.stem = Stem(1, c.stem_channels, rng, dtype)
        widths = (c.stem_channels,) + c.encoder_channels
        self.stages = [MSFE(widths[i], widths[i + 1], c, rng, dtype) for i in range(c.stages)]
        self.laterals = [pointwise(widths[i], c.decoder_width, rng, dtype=dtype) for i in range(c.stages)]
        self.bottleneck = pointwise(widths[-1], c.decoder_width, rng, dtype=dtype)
        self.decoders = [DecBlock(c.decoder_width, c.num_classes, rng, dtype) for _ in range(c.stages)]
        self.dropout_rng = np.random.default_rng(seed + 1)
        self._bind_rng()

    def _bind_rng(self):
        for m in self.modules():
            if isinstance(m, TransBlock):
                m.rng = self.dropout_rng

    def reseed_dropout(self, seed: int) -> None:
        self.dropout_rng = np.random.default_rng(seed)
        self._bind_rng()

    def encode(self, image) -> list[Tensor]:
        """Stem output followed by the output of every MSFE stage."""
        h, w = image.shape[2:]
        self.config.check_input(h, w)
        if image.shape[1] != 1:
            raise ConfigError(f"expected a single input channel, got {image.shape[1]}")
        feats = [self.stem(image)]
        for stage in self.stages:
            feats.append(stage(feats[-1]))
        return feats

    def forward(self, image, return_features: bool = False):
        """Return (main, aux) class-probability maps at input resolution.

        ``aux`` lists the auxiliary outputs of DEC2..DEC(stages) in order.
        """
        image = image if isinstance(image, Tensor) else Tensor(image, dtype=self.dtype)
        h, w = image.shape[2:]
        feats = self.encode(image)
        d = self.bottleneck(feats[-1])
        aux = []
        for i in reversed(range(self.config.stages)):
            lateral = self.laterals[i](feats[i])
            dec = self.decoders[i]
            d = dec(d, lateral)
            if i > 0:
                # head and align-corners resize are both linear with unit-sum
                # weights, so the head runs before the resize
                aux_logits = dec.head(ops.add(d, lateral))
                aux.append(ops.softmax(ops.bilinear_upsample(aux_logits, h, w), axis=1))
        main = ops.softmax(self.decoders[0].head(d), axis=1)
        aux.reverse()
        if return_features:
            return main, aux, feats
        return main, aux

    def predict(self, images: np.ndarray) -> np.ndarray:
        """Main-output class probabilities without recording a graph."""
        from .tensor import no_grad
        with no_grad():
            main, _ = self.forward(Tensor(images, dtype=self.dtype))
        return main.data

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    # -- checkpoints ---------------------------------------------------------
    def state(self) -> dict[str, np.ndarray]:
        out = {f"param:{n}": p.data for n, p in self.named_parameters()}
        out.update({f"buffer:{n}": b for n, b in self.named_buffers()})
        return out

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        params = dict(self.named_parameters())
        for key, arr in state.items():
            kind, name = key.split(":", 1)
            if kind == "param":
                if name not in params:
                    raise KeyError(f"checkpoint parameter {name!r} not in model")
                if params[name].shape != arr.shape:
                    raise ValueError(f"shape mismatch for {name}: {arr.shape} vs {params[name].shape}")
                params[name].data = arr.astype(self.dtype).copy()
            else:
                mod, attr = self._resolve(name)
                getattr(mod, attr)[...] = arr
        missing = set(params) - {k.split(":", 1)[1] for k in state if k.startswith("param:")}
        if missing:
            raise KeyError(f"checkpoint lacks parameters {sorted(missing)[:5]}")

    def _resolve(self, dotted: str):
        parts = dotted.split(".")
        obj = self
        for p in parts[:-1]:
            obj = obj[int(p)] if isinstance(obj, list) else getattr(obj, p)
        return obj, parts[-1]


def save_checkpoint(model: BreakNet, path, extra: Optional[dict] = None) -> Path:
    """Write ``<path>.json`` (manifest) and ``<path>.bnt`` (flat blob)."""
    path = Path(path)
    if path.suffix == ".json":
        path = path.with_suffix("")
    entries, chunks, offset = [], [], 0
    for key, arr in model.state().items():
        kind, name = key.split(":", 1)
        entries.append({"name": name, "kind": kind, "offset": offset, "shape": list(arr.shape)})
        chunks.append(np.asarray(arr, dtype=model.dtype).reshape(-1))
        offset += arr.size
    blob = path.with_suffix(".bnt")
    tensorio.save(blob, np.concatenate(chunks) if chunks else np.zeros(0, model.dtype))
    manifest = {
        "format": "breaknet-checkpoint/1",
        "config": model.config.to_dict(),
        "dtype": str(model.dtype),
        "blob": blob.name,
        "entries": entries,
    }
    if extra:
        manifest["extra"] = extra
    manifest_path = path.with_suffix(".json")
    manifest_path.write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return manifest_path


def load_checkpoint(manifest_path) -> BreakNet:
    manifest_path = Path(manifest_path)
    manifest = json.loads(manifest_path.read_text())
    if manifest.get("format") != "breaknet-checkpoint/1":
        raise ValueError(f"{manifest_path}: not a BreakNet checkpoint manifest")
    cfg = ModelConfig.from_dict(manifest["config"])
    dtype = np.dtype(manifest["dtype"])
    model = BreakNet(cfg, dtype=dtype)
    flat = tensorio.load(manifest_path.parent / manifest["blob"])
    state = {}
    for e in manifest["entries"]:
        n = int(np.prod(e["shape"], dtype=np.int64))
        state[f"{e['kind']}:{e['name']}"] = flat[e["offset"]:e["offset"] + n].reshape(e["shape"])
    model.load_state(state)
    model.eval()
    return model
