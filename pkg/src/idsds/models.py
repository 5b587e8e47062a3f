"""Toy classifier families, SGD training, and in-domain fine-tuning.

Families:
  mlp           flatten -> ``depth`` hidden ReLU layers -> linear head (depth 0 is linear)
  cnn           ``depth`` conv3x3 blocks over up to three resolution stages -> GAP -> linear
  bagnet_local  patchify conv (kernel = stride = patch side) -> 1x1 conv blocks ->
                1x1 class conv ("local_logits") -> GAP, so every logit is the mean of
                per-location logits that each see exactly one patch
"""

from __future__ import annotations

import copy
import hashlib
import json
import logging
from dataclasses import asdict, dataclass, field, replace
from fractions import Fraction
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autodiff as ad
from . import weights as atb
from .autodiff import Tensor, no_grad
from .data import Dataset
from .errors import ConfigError, NumericFault
from .patches import Baseline, PatchGrid

log = logging.getLogger(__name__)

FAMILIES = ("mlp", "cnn", "bagnet_local")


@dataclass(frozen=True)
class ModelConfig:
    family: str = "cnn"
    depth: int = 2
    width_multiplier: float = 1.0
    use_bias: bool = True
    use_batchnorm: bool = False
    num_classes: int = 8
    input_shape: tuple[int, int, int] = (3, 64, 64)
    base_width: int = 8
    patch_size: int = 16

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ConfigError(f"unknown model family {self.family!r}; expected one of {FAMILIES}")
        if self.depth < (0 if self.family == "mlp" else 1):
            raise ConfigError(f"depth {self.depth} too small for family {self.family}")
        if not self.width_multiplier > 0:
            raise ConfigError("width_multiplier must be positive")
        if self.num_classes < 2:
            raise ConfigError("need at least two classes")
        if self.family == "mlp" and self.use_batchnorm:
            raise ConfigError("the mlp family has no batch-norm layers")
        if self.family == "bagnet_local":
            _, h, w = self.input_shape
            if h % self.patch_size or w % self.patch_size:
                raise ConfigError(f"patch_size {self.patch_size} does not tile {h}x{w} inputs")

    def width(self, base: int) -> int:
        return max(1, int(round(base * self.width_multiplier)))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["input_shape"] = list(self.input_shape)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        if "input_shape" in d:
            d["input_shape"] = tuple(d["input_shape"])
        return cls(**d)


# architecture description: list of (kind, name, attrs)


def _cnn_stages(depth: int) -> list[int]:
    n_stages = min(depth, 3)
    return [i * n_stages // depth for i in range(depth)]


def architecture(cfg: ModelConfig) -> list[tuple[str, str, dict]]:
    c, h, w = cfg.input_shape
    layers: list[tuple[str, str, dict]] = []
    bias = cfg.use_bias
    if cfg.family == "mlp":
        layers.append(("flatten", "flatten", {}))
        fan_in = c * h * w
        hidden = cfg.width(4 * cfg.base_width)
        for i in range(1, cfg.depth + 1):
            layers.append(("linear", f"fc{i}", {"in": fan_in, "out": hidden, "bias": bias}))
            layers.append(("relu", f"fc{i}", {}))
            fan_in = hidden
        layers.append(("linear", "head", {"in": fan_in, "out": cfg.num_classes, "bias": bias}))
        return layers

    if cfg.family == "cnn":
        stages = _cnn_stages(cfg.depth)
        in_ch = c
        for i, stage in enumerate(stages):
            if i > 0 and stage != stages[i - 1]:
                layers.append(("maxpool", f"pool{stage}", {"k": 2}))
            out_ch = cfg.width(cfg.base_width * 2**stage)
            name = f"conv{i + 1}"
            layers.append(("conv", name, {"in": in_ch, "out": out_ch, "k": 3, "stride": 1, "pad": 1, "bias": bias}))
            if cfg.use_batchnorm:
                layers.append(("bn", f"bn{i + 1}", {"ch": out_ch}))
            layers.append(("relu", name, {}))
            in_ch = out_ch
        layers.append(("gap", "gap", {}))
        layers.append(("linear", "head", {"in": in_ch, "out": cfg.num_classes, "bias": bias}))
        return layers

    width = cfg.width(4 * cfg.base_width)
    p = cfg.patch_size
    layers.append(("conv", "conv1", {"in": c, "out": width, "k": p, "stride": p, "pad": 0, "bias": bias}))
    if cfg.use_batchnorm:
        layers.append(("bn", "bn1", {"ch": width}))
    layers.append(("relu", "conv1", {}))
    for i in range(2, cfg.depth + 1):
        layers.append(("conv", f"conv{i}", {"in": width, "out": width, "k": 1, "stride": 1, "pad": 0, "bias": bias}))
        if cfg.use_batchnorm:
            layers.append(("bn", f"bn{i}", {"ch": width}))
        layers.append(("relu", f"conv{i}", {}))
    layers.append(
        ("conv", "local_logits", {"in": width, "out": cfg.num_classes, "k": 1, "stride": 1, "pad": 0, "bias": bias})
    )
    layers.append(("gap", "gap", {}))
    return layers


def count_parameters(cfg: ModelConfig) -> int:
    """Closed-form trainable parameter count (BN running buffers excluded)."""
    c, h, w = cfg.input_shape
    b = int(cfg.use_bias)
    k_cls = cfg.num_classes
    if cfg.family == "mlp":
        hidden = cfg.width(4 * cfg.base_width)
        if cfg.depth == 0:
            return (c * h * w + b) * k_cls
        return (c * h * w + b) * hidden + (cfg.depth - 1) * (hidden + b) * hidden + (hidden + b) * k_cls
    bn = 2 * int(cfg.use_batchnorm)
    if cfg.family == "cnn":
        chans = [c] + [cfg.width(cfg.base_width * 2**s) for s in _cnn_stages(cfg.depth)]
        total = sum((9 * chans[i] + b + bn) * chans[i + 1] for i in range(cfg.depth))
        return total + (chans[-1] + b) * k_cls
    width = cfg.width(4 * cfg.base_width)
    p = cfg.patch_size
    return (c * p * p + b + bn) * width + (cfg.depth - 1) * (width + b + bn) * width + (width + b) * k_cls


class Model:
    """A sequential layer graph with named parameters and capturable activations."""

    def __init__(self, config: ModelConfig, params: dict[str, Tensor], buffers: dict[str, np.ndarray]):
        self.config = config
        self.layers = architecture(config)
        self.params = params
        self.buffers = buffers
        self.mode = "eval"

    # structure

    @property
    def conv_layers(self) -> list[str]:
        return [name for kind, name, _ in self.layers if kind == "conv"]

    @property
    def capturable_layers(self) -> list[str]:
        return [name for kind, name, _ in self.layers if kind in ("conv", "linear")]

    @property
    def default_cam_layer(self) -> str:
        convs = [n for n in self.conv_layers if n != "local_logits"]
        if not convs:
            raise ConfigError(f"{self.config.family} model has no convolutional feature layer")
        return convs[-1]

    def num_parameters(self) -> int:
        return int(sum(p.size for p in self.params.values()))

    def train(self) -> "Model":
        self.mode = "train"
        return self

    def eval(self) -> "Model":
        self.mode = "eval"
        return self

    def copy(self) -> "Model":
        params = {k: Tensor(v.data.copy(), requires_grad=True) for k, v in self.params.items()}
        return Model(self.config, params, {k: v.copy() for k, v in self.buffers.items()})

    # evaluation

    def forward(self, x: Tensor, capture: Sequence[str] = ()) -> tuple[Tensor, dict[str, Tensor]]:
        """Run the graph; ``capture`` names conv layers whose (post-activation) maps are returned.

        The ``local_logits`` layer of ``bagnet_local`` is captured before pooling.
        """
        capture = set(capture)
        unknown = capture - set(self.capturable_layers)
        if unknown:
            raise ConfigError(f"unknown layer(s) {sorted(unknown)}; valid layers: {self.capturable_layers}")
        expected = self.config.input_shape
        if x.ndim != 4 or tuple(x.shape[1:]) != tuple(expected):
            raise ConfigError(f"model expects (N, {', '.join(map(str, expected))}) input, got {x.shape}")
        captured: dict[str, Tensor] = {}
        h = x
        for i, (kind, name, attrs) in enumerate(self.layers):
            if kind == "conv":
                h = ad.conv2d(h, self.params[f"{name}.weight"], self.params.get(f"{name}.bias"), attrs["stride"], attrs["pad"])
                nxt = self.layers[i + 1][0] if i + 1 < len(self.layers) else None
                if name in capture and nxt not in ("bn", "relu"):
                    captured[name] = h
            elif kind == "linear":
                h = ad.linear(h, self.params[f"{name}.weight"], self.params.get(f"{name}.bias"))
                if name in capture and i + 1 < len(self.layers) and self.layers[i + 1][0] != "relu":
                    captured[name] = h
            elif kind == "bn":
                h = ad.batch_norm2d(
                    h,
                    self.params[f"{name}.weight"],
                    self.params[f"{name}.bias"],
                    self.buffers[f"{name}.running_mean"],
                    self.buffers[f"{name}.running_var"],
                    mode=self.mode,
                )
            elif kind == "relu":
                h = ad.relu(h)
                if name in capture:
                    captured[name] = h
            elif kind == "maxpool":
                h = ad.max_pool2d(h, attrs["k"])
            elif kind == "gap":
                h = ad.global_avg_pool(h)
            elif kind == "flatten":
                h = ad.flatten(h)
        return h, captured

    def __call__(self, x) -> Tensor:
        return self.forward(x if isinstance(x, Tensor) else Tensor(x))[0]

    # persistence

    def state(self) -> dict[str, np.ndarray]:
        out = {k: v.data for k, v in self.params.items()}
        out.update({f"buffer:{k}": v for k, v in self.buffers.items()})
        return out

    def weights_bytes(self) -> bytes:
        return atb.dumps(self.state())

    def content_hash(self) -> str:
        return hashlib.sha256(self.weights_bytes()).hexdigest()

    def save(self, path: str | Path, manifest: dict | None = None) -> None:
        path = Path(path)
        path.write_bytes(self.weights_bytes())
        sidecar = {"config": self.config.to_dict(), "weights_sha256": self.content_hash()}
        sidecar.update(manifest or {})
        path.with_suffix(".json").write_text(json.dumps(sidecar, indent=2, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path: str | Path) -> "Model":
        path = Path(path)
        meta = json.loads(path.with_suffix(".json").read_text())
        cfg = ModelConfig.from_dict(meta["config"])
        state = atb.load(path)
        model = build_model(cfg, seed=0)
        for k, v in state.items():
            if k.startswith("buffer:"):
                model.buffers[k[len("buffer:") :]] = v.copy()
            else:
                if k not in model.params or model.params[k].shape != v.shape:
                    raise ConfigError(f"weight {k!r} {v.shape} does not fit the configured architecture")
                model.params[k] = Tensor(v.copy(), requires_grad=True)
        return model


def build_model(cfg: ModelConfig, seed: int = 0) -> Model:
    """Kaiming-uniform (fan-in) weights, uniform(±1/sqrt(fan_in)) biases, BN gamma=1 beta=0."""
    rng = np.random.default_rng([seed, 0x1A17])
    params: dict[str, Tensor] = {}
    buffers: dict[str, np.ndarray] = {}
    for kind, name, a in architecture(cfg):
        if kind == "conv":
            fan_in = a["in"] * a["k"] * a["k"]
            shape = (a["out"], a["in"], a["k"], a["k"])
        elif kind == "linear":
            fan_in = a["in"]
            shape = (a["out"], a["in"])
        elif kind == "bn":
            params[f"{name}.weight"] = Tensor(np.ones(a["ch"]), requires_grad=True)
            params[f"{name}.bias"] = Tensor(np.zeros(a["ch"]), requires_grad=True)
            buffers[f"{name}.running_mean"] = np.zeros(a["ch"])
            buffers[f"{name}.running_var"] = np.ones(a["ch"])
            continue
        else:
            continue
        bound = np.sqrt(6.0 / fan_in)
        params[f"{name}.weight"] = Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True)
        if a["bias"]:
            b = 1.0 / np.sqrt(fan_in)
            params[f"{name}.bias"] = Tensor(rng.uniform(-b, b, size=a["out"]), requires_grad=True)
    return Model(cfg, params, buffers)


# prediction


def predict(model: Model, images: np.ndarray, softmax_mode: str = "pre", batch_size: int = 256) -> np.ndarray:
    """Logits (``pre``) or class probabilities (``post``); accepts one image or a batch."""
    if softmax_mode not in ("pre", "post"):
        raise ConfigError(f"softmax_mode must be 'pre' or 'post', got {softmax_mode!r}")
    images = np.asarray(images, dtype=np.float64)
    single = images.ndim == 3
    if single:
        images = images[None]
    prev = model.mode
    model.eval()
    outs = []
    try:
        with no_grad():
            for i in range(0, len(images), batch_size):
                logits = model(Tensor(images[i : i + batch_size]))
                outs.append(ad.softmax(logits).data if softmax_mode == "post" else logits.data)
    finally:
        model.mode = prev
    out = np.concatenate(outs) if outs else np.zeros((0, model.config.num_classes))
    return out[0] if single else out


def capture_activations(model: Model, image: np.ndarray, layer_id: str) -> tuple[Tensor, Tensor]:
    """Forward one image (or batch) recording graph; returns ``(input, maps)`` tensors.

    Call ``backward`` on any scalar built from the model output, then read
    ``maps.grad`` for the gradient of that scalar w.r.t. the feature maps.
    """
    if layer_id not in model.capturable_layers:
        raise ConfigError(f"unknown layer {layer_id!r}; valid layers: {model.capturable_layers}")
    image = np.asarray(image, dtype=np.float64)
    x = Tensor(image[None] if image.ndim == 3 else image, requires_grad=True)
    model.eval()
    _, caps = model.forward(x, capture=(layer_id,))
    return x, caps[layer_id]


def accuracy(model: Model, dataset: Dataset) -> float:
    if len(dataset) == 0:
        return float("nan")
    return float(np.mean(predict(model, dataset.images).argmax(axis=1) == dataset.labels))


# training


@dataclass(frozen=True)
class PatchDeleteAugmentation:
    num_patches: int = 16
    probability: float = 0.5
    baseline: Baseline = field(default_factory=Baseline.zero)

    def __post_init__(self):
        if not 0.0 <= self.probability <= 1.0:
            raise ConfigError(f"deletion probability must lie in [0, 1], got {self.probability}")

    def to_dict(self) -> dict:
        return {"num_patches": self.num_patches, "probability": self.probability, "baseline": self.baseline.to_dict()}

    @classmethod
    def from_dict(cls, d: dict) -> "PatchDeleteAugmentation":
        d = dict(d)
        if "baseline" in d:
            d["baseline"] = Baseline.from_dict(d["baseline"])
        return cls(**d)


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 20
    lr: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 1e-4
    lr_decay: float = 0.1
    lr_decay_every: int = 8
    batch_size: int = 64
    seed: int = 0
    augmentation: PatchDeleteAugmentation | None = None

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size < 1 or self.lr_decay_every < 1:
            raise ConfigError("epochs >= 0, batch_size >= 1 and lr_decay_every >= 1 are required")

    def lr_at(self, epoch: int) -> float:
        return self.lr * self.lr_decay ** (epoch // self.lr_decay_every)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["augmentation"] = self.augmentation.to_dict() if self.augmentation else None
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        aug = d.get("augmentation")
        d["augmentation"] = PatchDeleteAugmentation.from_dict(aug) if aug else None
        return cls(**d)


class PatchDeletionSampler:
    """Draws which patch to delete for each training sample.

    A draw is keyed only by ``(seed, epoch, sample index)``: 0 means "keep the
    image", ``1..P`` names the deleted patch. Labels and pixels never enter.
    """

    def __init__(self, num_patches: int, probability: float = 0.5, seed: int = 0):
        if not 0.0 <= probability <= 1.0:
            raise ConfigError(f"deletion probability must lie in [0, 1], got {probability}")
        if num_patches < 1:
            raise ConfigError("need at least one patch")
        self.num_patches = num_patches
        self.probability = probability
        self.seed = seed

    def epoch_draws(self, epoch: int, n: int) -> np.ndarray:
        # row i of the uniform stream belongs to sample i whatever n is
        u = np.random.default_rng([self.seed, epoch, 0xA06]).random((n, 2))
        which = 1 + np.minimum((u[:, 1] * self.num_patches).astype(np.int64), self.num_patches - 1)
        return np.where(u[:, 0] < self.probability, which, 0)

    def __call__(self, label: int, epoch: int, index: int) -> int:
        # label is accepted for the audit interface and deliberately ignored
        return int(self.epoch_draws(epoch, index + 1)[index])


def _apply_augmentation(xb, idx, epoch, aug: PatchDeleteAugmentation, draws, grid: PatchGrid, seed: int):
    out = xb.copy()
    for row, i in enumerate(idx):
        m = draws[i]
        if m == 0:
            continue
        r0, r1, c0, c1 = grid.bounds(int(m))
        base = aug.baseline.image(xb[row], key=(seed, epoch, int(i)))
        out[row, :, r0:r1, c0:c1] = base[:, r0:r1, c0:c1]
    return out


@dataclass
class TrainResult:
    model: Model
    history: list[dict]


def _sgd_step(model: Model, velocity: dict[str, np.ndarray], lr: float, cfg: TrainConfig) -> None:
    for k, p in model.params.items():
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        if cfg.weight_decay:
            g = g + cfg.weight_decay * p.data
        v = velocity.get(k)
        v = g if v is None else cfg.momentum * v + g
        velocity[k] = v
        p.data = p.data - lr * v
        p.grad = None


def fit(model: Model, train_config: TrainConfig, dataset: Dataset) -> TrainResult:
    """Continue training ``model`` in place with SGD (momentum, weight decay, step decay)."""
    if len(dataset) == 0:
        raise ConfigError("cannot train on an empty dataset")
    if dataset.labels.min() < 0 or dataset.labels.max() >= model.config.num_classes:
        raise ConfigError(f"labels must lie in [0, {model.config.num_classes})")
    cfg = train_config
    n = len(dataset)
    aug = cfg.augmentation
    sampler = grid = None
    if aug is not None:
        _, h, w = dataset.image_shape
        grid = PatchGrid.for_image(aug.num_patches, h, w)
        sampler = PatchDeletionSampler(aug.num_patches, aug.probability, cfg.seed)
    velocity: dict[str, np.ndarray] = {}
    history = []
    for epoch in range(cfg.epochs):
        lr = cfg.lr_at(epoch)
        order = np.random.default_rng([cfg.seed, epoch, 0x5F1]).permutation(n)
        draws = sampler.epoch_draws(epoch, n) if sampler else None
        model.train()
        total_loss = 0.0
        correct = 0
        for b, start in enumerate(range(0, n, cfg.batch_size)):
            idx = order[start : start + cfg.batch_size]
            xb = dataset.images[idx]
            if sampler is not None:
                xb = _apply_augmentation(xb, idx, epoch, aug, draws, grid, cfg.seed)
            yb = dataset.labels[idx]
            try:
                logits = model(Tensor(xb))
                loss = ad.cross_entropy(logits, yb)
                loss.backward()
                _sgd_step(model, velocity, lr, cfg)
            except NumericFault as exc:
                raise NumericFault(f"training diverged at epoch {epoch}, batch {b}: {exc}") from exc
            total_loss += loss.item() * len(idx)
            correct += int((logits.data.argmax(axis=1) == yb).sum())
        model.eval()
        row = {"epoch": epoch, "lr": lr, "loss": total_loss / n, "accuracy": correct / n}
        log.debug("epoch %d: loss %.4f acc %.4f", epoch, row["loss"], row["accuracy"])
        history.append(row)
    model.eval()
    return TrainResult(model, history)


def train(model_config: ModelConfig, train_config: TrainConfig, dataset: Dataset) -> TrainResult:
    """Initialize from ``train_config.seed`` and train from scratch."""
    if tuple(dataset.image_shape) != tuple(model_config.input_shape):
        raise ConfigError(f"dataset images {dataset.image_shape} do not match model input {model_config.input_shape}")
    model = build_model(model_config, seed=train_config.seed)
    return fit(model, train_config, dataset)


def finetune_in_domain(
    model: Model,
    train_config: TrainConfig,
    dataset: Dataset,
    patch_grid: PatchGrid,
    baseline: Baseline,
    probability: float = 0.5,
) -> TrainResult:
    """Fine-tune a copy of ``model`` with single-patch deletion in half of the samples."""
    patch_grid.check_image(dataset.images.shape)
    aug = PatchDeleteAugmentation(patch_grid.num_patches, probability, baseline)
    result = fit(model.copy(), replace(train_config, augmentation=aug), dataset)
    return result
