"""The three networks of the pipeline.

* :class:`CategoryNet` turns an image into one response map per category.
* :class:`InstanceNet` repeatedly reads one response map and emits one
  instance map per step through two fully connected recurrent layers.
* :class:`BBoxRegressor` maps an instance map to a normalized box.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from typing import List, Sequence

import numpy as np

from . import tensor as T
from .checkpoint import ModelCheckpoint
from .errors import ShapeError
from .layers import BatchNorm, ConvBlock, Deconv2d, Dense, Module, Recurrent, crop
from .tensor import Tensor

# (kind, in_channels, out_channels, kernel, stride)
CATEGORY_LAYERS = (
    ("conv", 1, 32, 5, 2), ("conv", 32, 32, 5, 2), ("conv", 32, 64, 3, 2),
    ("conv", 64, 64, 3, 1), ("conv", 64, 64, 3, 2), ("conv", 64, 64, 3, 1),
    ("deconv", 64, 64, 3, 2), ("deconv", 64, 64, 3, 2), ("deconv", 64, 64, 3, 2),
    ("deconv", 64, 3, 1, 1),
)
INSTANCE_ENCODER = (("conv", 1, 32, 5, 2), ("conv", 32, 32, 3, 2), ("conv", 32, 32, 3, 2))
# Trailing strides are 2 (not 1) so the decoder undoes the encoder's downsampling.
INSTANCE_DECODER = (("deconv", 32, 32, 3, 2), ("deconv", 32, 32, 3, 2), ("deconv", 32, 32, 5, 2),
                    ("deconv", 32, 1, 1, 1))


@dataclass
class CategoryNetConfig:
    image_size: int = 100
    n_categories: int = 3
    resolution: str = "half"
    layers: tuple = CATEGORY_LAYERS

    def __post_init__(self):
        self.layers = tuple(tuple(l) for l in self.layers)
        if self.resolution not in ("half", "full"):
            raise ValueError(f"resolution must be 'half' or 'full', got {self.resolution!r}")
        *body, last = self.layers
        self.layers = tuple(body) + ((last[0], last[1], self.n_categories, last[3], last[4]),)

    @property
    def map_size(self) -> int:
        return self.image_size if self.resolution == "full" else (self.image_size + 1) // 2


@dataclass
class InstanceNetConfig:
    map_size: int = 50
    rnn_width: int = 2048
    n_recurrent: int = 2
    encoder: tuple = INSTANCE_ENCODER
    decoder: tuple = INSTANCE_DECODER
    max_unroll: int = 12
    stop_threshold: float = 0.2
    head_init_scale: float = 0.1

    def __post_init__(self):
        self.encoder = tuple(tuple(l) for l in self.encoder)
        self.decoder = tuple(tuple(l) for l in self.decoder)

    @property
    def bottleneck(self) -> tuple:
        side = self.map_size
        for layer in self.encoder:
            side = (side - 1) // layer[4] + 1
        return self.encoder[-1][2], side, side


@dataclass
class BBoxRegressorConfig:
    map_size: int = 50
    hidden: int = 4096
    dropout: float = 0.5


@dataclass
class ModelConfig:
    category: CategoryNetConfig = field(default_factory=CategoryNetConfig)
    instance: InstanceNetConfig = field(default_factory=InstanceNetConfig)
    bbox: BBoxRegressorConfig = field(default_factory=BBoxRegressorConfig)
    seed: int = 0

    @classmethod
    def for_images(cls, image_size: int, n_categories: int, resolution: str = "half",
                   rnn_width: int = 2048, bbox_hidden: int = 4096, seed: int = 0, **instance_kw):
        cat = CategoryNetConfig(image_size, n_categories, resolution)
        return cls(cat, InstanceNetConfig(cat.map_size, rnn_width, **instance_kw),
                   BBoxRegressorConfig(cat.map_size, bbox_hidden), seed)

    def to_dict(self) -> dict:
        return _jsonable(dataclasses.asdict(self))

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(CategoryNetConfig(**d["category"]), InstanceNetConfig(**d["instance"]),
                   BBoxRegressorConfig(**d["bbox"]), d.get("seed", 0))


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    return obj


def _blocks(specs, rng) -> list:
    return [ConvBlock(cin, cout, k, s, rng, transposed=(kind == "deconv")) for kind, cin, cout, k, s in specs]


def _head(spec, rng) -> Deconv2d:
    _, cin, cout, k, s = spec
    return Deconv2d(cin, cout, k, s, rng, bias=True)


class CategoryNet(Module):
    """All-convolutional encoder-decoder emitting raw per-category response maps."""

    def __init__(self, cfg: CategoryNetConfig, rng: np.random.Generator):
        self.cfg = cfg
        *body, last = cfg.layers
        if cfg.resolution == "full":
            _, _, cout, _, _ = body[-1]
            body = body + [("deconv", cout, cout, 3, 2)]
        n_conv = sum(1 for spec in body if spec[0] == "conv")
        self.trunk_blocks = _blocks(body[:n_conv], rng)
        self.up_blocks = _blocks(body[n_conv:], rng)
        self.head = _head(last, rng)

    def trunk(self, x: Tensor) -> Tensor:
        if x.ndim != 4 or x.shape[1] != 1:
            raise ShapeError(f"category net expects (N, 1, H, W) input, got {x.shape}")
        for block in self.trunk_blocks:
            x = block(x)
        return x

    def forward(self, x: Tensor) -> Tensor:
        h = self.trunk(x)
        for block in self.up_blocks:
            h = block(h)
        size = x.shape[2] if self.cfg.resolution == "full" else (x.shape[2] + 1) // 2
        width = x.shape[3] if self.cfg.resolution == "full" else (x.shape[3] + 1) // 2
        return crop(self.head(h), size, width)


class InstanceNet(Module):
    """Convolutional encoder and decoder around fully connected recurrent layers.

    The input map is the same at every step, so it is encoded once per unroll.
    """

    def __init__(self, cfg: InstanceNetConfig, rng: np.random.Generator):
        self.cfg = cfg
        self.encoder = _blocks(cfg.encoder, rng)
        channels, hb, wb = cfg.bottleneck
        flat = channels * hb * wb
        widths = [flat] + [cfg.rnn_width] * cfg.n_recurrent
        self.recurrent = [Recurrent(widths[i], widths[i + 1], rng) for i in range(cfg.n_recurrent)]
        self.project = Dense(cfg.rnn_width, flat, rng)
        self.decoder = _blocks(cfg.decoder[:-1], rng)
        self.head = _head(cfg.decoder[-1], rng)
        # Start close to the all-zero map so early matching is not driven by noise.
        self.head.weight.data *= cfg.head_init_scale

    def _check(self, x: Tensor) -> None:
        size = self.cfg.map_size
        if x.ndim != 4 or x.shape[1:] != (1, size, size):
            raise ShapeError(f"instance net expects (N, 1, {size}, {size}) maps, got {x.shape}")

    def encode(self, x: Tensor) -> Tensor:
        self._check(x)
        h = x
        for block in self.encoder:
            h = block(h)
        return h.reshape(x.shape[0], -1)

    def initial_state(self, batch: int) -> list:
        return [layer.initial_state(batch) for layer in self.recurrent]

    def advance(self, features: Tensor, state: list) -> list:
        """New recurrent state after one step."""
        h = features
        new_state = []
        for layer, prev in zip(self.recurrent, state):
            h = layer(h, prev)
            new_state.append(h)
        return new_state

    def decode(self, top: Tensor) -> Tensor:
        """Instance maps from the top recurrent layer's state, (N, 1, h, w)."""
        channels, hb, wb = self.cfg.bottleneck
        z = T.relu(self.project(top)).reshape(top.shape[0], channels, hb, wb)
        for block in self.decoder:
            z = block(z)
        size = self.cfg.map_size
        return crop(self.head(z), size, size)

    def step(self, features: Tensor, state: list):
        """One recurrent step; returns (instance map, new state)."""
        state = self.advance(features, state)
        return self.decode(state[-1]), state

    def unroll(self, x: Tensor, steps: int) -> List[Tensor]:
        """Maps g_1..g_steps for a batch of response maps.

        The decoder reads the state but never feeds it, so all steps are
        decoded in one batch; batch-norm statistics then cover every step
        alike, as the running averages used at inference do.
        """
        if steps < 1:
            raise ValueError(f"steps must be >= 1, got {steps}")
        if x.ndim == 3:
            x = x.reshape(1, *x.shape)
        features = self.encode(x)
        state = self.initial_state(x.shape[0])
        tops = []
        for _ in range(steps):
            state = self.advance(features, state)
            tops.append(state[-1])
        maps = self.decode(T.concat(tops, axis=0) if steps > 1 else tops[0])
        n = x.shape[0]
        return [maps[t * n:(t + 1) * n] for t in range(steps)]


def unit_mean(x: Tensor, eps: float = 1e-6) -> Tensor:
    """Scale each row of a nonnegative (N, D) tensor to mean 1; all-zero rows stay zero.

    The box centre is then a linear function of the input.
    """
    xd = x.data
    d = xd.shape[1]
    s = xd.mean(axis=1, keepdims=True) + eps

    def grad_fn(g):
        return (g / s - (g * xd).sum(axis=1, keepdims=True) / (s * s * d),)

    return T.make_op((xd / s).astype(xd.dtype), (x,), grad_fn, "unit_mean")


class BBoxRegressor(Module):
    """Unit-mass input, one hidden layer with dropout; logistic outputs give (x, y, w, h) in (0, 1).

    Negative activations are clipped before normalizing, as in the detection score.
    """

    def __init__(self, cfg: BBoxRegressorConfig, rng: np.random.Generator):
        self.cfg = cfg
        self.hidden = Dense(cfg.map_size * cfg.map_size, cfg.hidden, rng, bias=False)
        self.bn = BatchNorm(cfg.hidden)
        self.out = Dense(cfg.hidden, 4, rng, gain=1.0)
        self.rng = np.random.default_rng(rng.integers(2**63))

    def forward(self, maps: Tensor) -> Tensor:
        size = self.cfg.map_size
        if maps.shape[-2:] != (size, size) or maps.size != maps.shape[0] * size * size:
            raise ShapeError(f"bbox regressor expects {size}x{size} maps, got {maps.shape}")
        x = unit_mean(T.relu(maps.reshape(maps.shape[0], -1)))
        h = T.relu(self.bn(self.hidden(x)))
        h = T.dropout(h, self.cfg.dropout, self.training, self.rng)
        return T.sigmoid(self.out(h))


class DecompNet(Module):
    def __init__(self, cfg: ModelConfig):
        self.cfg = cfg
        rng = np.random.default_rng(cfg.seed)
        self.category = CategoryNet(cfg.category, rng)
        self.instance = InstanceNet(cfg.instance, rng)
        self.bbox = BBoxRegressor(cfg.bbox, rng)
        self.assign_names()
        self._dry_run()

    def _dry_run(self) -> None:
        """Push one zero image through every part and check the declared shapes."""
        cat = self.cfg.category
        size = cat.map_size
        was_training = self.training
        self.eval()
        try:
            with T.no_grad():
                f = self.category(Tensor(np.zeros((1, 1, cat.image_size, cat.image_size))))
                expected = (1, cat.n_categories, size, size)
                if f.shape != expected:
                    raise ShapeError(f"category net produced {f.shape}, expected {expected}")
                if self.cfg.instance.map_size != size or self.cfg.bbox.map_size != size:
                    raise ShapeError(f"instance/bbox map size must equal the category map size {size}")
                g, = self.instance.unroll(f[:, :1], 1)
                if g.shape != (1, 1, size, size):
                    raise ShapeError(f"instance net produced {g.shape}, expected {(1, 1, size, size)}")
                self.bbox(g)
        finally:
            self.train(was_training)

    def parts(self, names: Sequence[str]) -> list:
        return [p for name in names for p in getattr(self, name).parameters()]

    def to_checkpoint(self, metadata: dict) -> ModelCheckpoint:
        meta = dict(metadata, model=self.cfg.to_dict())
        return ModelCheckpoint(self.state_dict(), meta)

    @classmethod
    def from_checkpoint(cls, ckpt: ModelCheckpoint) -> "DecompNet":
        if "model" not in ckpt.metadata:
            raise ValueError("checkpoint metadata has no model configuration")
        net = cls(ModelConfig.from_dict(ckpt.metadata["model"]))
        missing = [name for name in net.state_dict() if name not in ckpt.params]
        if missing:
            raise ValueError(f"checkpoint lacks {len(missing)} tensors, e.g. {missing[0]}")
        net.load_state_dict(ckpt.params)
        return net


def category_forward(net: CategoryNet, image: Tensor) -> Tensor:
    return net(image)


def instance_unroll(net: InstanceNet, response_map: Tensor, steps: int) -> List[Tensor]:
    return net.unroll(response_map, steps)


def bbox_regress(reg: BBoxRegressor, instance_map) -> np.ndarray:
    """Box for one map (or a batch of maps) in eval mode, without recording a graph."""
    arr = instance_map.data if isinstance(instance_map, Tensor) else np.asarray(instance_map)
    single = arr.ndim == 2
    if single:
        arr = arr[None]
    was_training = reg.training
    reg.eval()
    try:
        with T.no_grad():
            out = reg(Tensor(arr.astype(reg.hidden.weight.dtype))).data
    finally:
        reg.train(was_training)
    return out[0] if single else out
