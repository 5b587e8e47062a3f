"""Attribution methods producing H×W maps for a model, an input and a target class.

All maps are reduced over channels by summation before any wrapper runs.
Wrappers run in list order around the base method; ``abs`` must come last.
"""

from __future__ import annotations

import json
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError
from .models import Model

BASE_METHODS = (
    "gradient",
    "saliency",
    "input_x_gradient",
    "integrated_gradients",
    "grad_cam",
    "grad_cam_pp",
    "xgrad_cam",
    "layer_cam",
    "occlusion",
    "rise",
    "bagnet_native",
)
WRAPPERS = ("smoothgrad", "smoothgrad_sq", "abs")
CAM_VARIANTS = ("grad_cam", "grad_cam_pp", "xgrad_cam", "layer_cam")

_BATCH = 64


@dataclass(frozen=True)
class Wrapper:
    kind: str
    n: int = 16
    sigma: float = 0.15

    def __post_init__(self):
        if self.kind not in WRAPPERS:
            raise ConfigError(f"unknown wrapper {self.kind!r}; expected one of {WRAPPERS}")
        if self.kind != "abs" and (self.n < 1 or self.sigma < 0):
            raise ConfigError("smoothgrad needs n >= 1 and sigma >= 0")

    def label(self) -> str:
        return "abs" if self.kind == "abs" else f"{self.kind}(n={self.n},sigma={self.sigma:g})"


@dataclass(frozen=True)
class MethodSpec:
    """A base method with keyword parameters plus an ordered wrapper chain."""

    base: str
    params: tuple[tuple[str, object], ...] = ()
    wrappers: tuple[Wrapper, ...] = ()
    name: str = ""

    def __post_init__(self):
        if self.base not in BASE_METHODS:
            raise ConfigError(f"unknown base method {self.base!r}; expected one of {BASE_METHODS}")
        kinds = [w.kind for w in self.wrappers]
        if "abs" in kinds and kinds.index("abs") != len(kinds) - 1:
            raise ConfigError("abs must be the last wrapper in the chain")
        if kinds.count("abs") > 1:
            raise ConfigError("abs may appear only once")
        p = self.kwargs
        if self.base == "integrated_gradients" and int(p.get("steps", 64)) < 8:
            raise ConfigError(f"integrated_gradients needs steps >= 8, got {p.get('steps')}")
        if self.base == "rise":
            if int(p.get("num_masks", 500)) < 10:
                raise ConfigError(f"rise needs num_masks >= 10, got {p.get('num_masks')}")
            if not 0.0 < float(p.get("keep_prob", 0.5)) <= 1.0:
                raise ConfigError(f"rise keep_prob must lie in (0, 1], got {p.get('keep_prob')}")

    @property
    def kwargs(self) -> dict:
        return dict(self.params)

    @property
    def id(self) -> str:
        if self.name:
            return self.name
        parts = [self.base] + [f"{k}={v}" for k, v in self.params] + [w.label() for w in self.wrappers]
        return "+".join(parts)

    @property
    def core_key(self) -> str:
        """Identity of the chain without a trailing ``abs`` (shared RNG stream and cache key)."""
        ws = self.wrappers[:-1] if self.wrappers and self.wrappers[-1].kind == "abs" else self.wrappers
        return "+".join([self.base] + [f"{k}={v}" for k, v in self.params] + [w.label() for w in ws])

    def to_dict(self) -> dict:
        return {
            "base": self.base,
            "params": dict(self.params),
            "wrappers": [{"kind": w.kind, "n": w.n, "sigma": w.sigma} for w in self.wrappers],
            "name": self.name,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MethodSpec":
        return cls(
            d["base"],
            tuple(sorted(d.get("params", {}).items())),
            tuple(Wrapper(**w) for w in d.get("wrappers", [])),
            d.get("name", ""),
        )


def spec(base: str, wrappers: Sequence[Wrapper] = (), name: str = "", **params) -> MethodSpec:
    return MethodSpec(base, tuple(sorted(params.items())), tuple(wrappers), name)


def wrap_smoothgrad(base: MethodSpec, n: int = 16, sigma: float = 0.15, squared: bool = False) -> MethodSpec:
    w = Wrapper("smoothgrad_sq" if squared else "smoothgrad", n, sigma)
    if base.wrappers and base.wrappers[-1].kind == "abs":
        raise ConfigError("abs must stay the last wrapper; add smoothgrad before abs")
    return MethodSpec(base.base, base.params, base.wrappers + (w,))


def wrap_abs(base: MethodSpec) -> MethodSpec:
    return MethodSpec(base.base, base.params, base.wrappers + (Wrapper("abs"),))


SG = Wrapper("smoothgrad", 16, 0.15)
SG_SQ = Wrapper("smoothgrad_sq", 16, 0.15)
ABS = Wrapper("abs")

# Paper roster of model-agnostic and CAM methods, plus occlusion and the intrinsic readout.
REGISTRY: dict[str, tuple[str, str, MethodSpec]] = {}


def _register(mid: str, label: str, group: str, ms: MethodSpec) -> None:
    REGISTRY[mid] = (label, group, MethodSpec(ms.base, ms.params, ms.wrappers, mid))


_register("ixg", "I×G", "raw", spec("input_x_gradient"))
_register("ixg_sg", "I×G-SG", "raw", spec("input_x_gradient", [SG]))
_register("ig", "IG", "raw", spec("integrated_gradients", baseline="zero", steps=64))
_register("ig_u", "IG-U", "raw", spec("integrated_gradients", baseline="uniform", steps=64))
_register("ig_sg", "IG-SG", "raw", spec("integrated_gradients", [SG], baseline="zero", steps=16))
_register("ixg_abs", "I×G abs.", "absolute", spec("input_x_gradient", [ABS]))
_register("ixg_sg_abs", "I×G-SG abs.", "absolute", spec("input_x_gradient", [SG, ABS]))
_register("ig_abs", "IG abs.", "absolute", spec("integrated_gradients", [ABS], baseline="zero", steps=64))
_register("ig_u_abs", "IG-U abs.", "absolute", spec("integrated_gradients", [ABS], baseline="uniform", steps=64))
_register("ig_sg_abs", "IG-SG abs.", "absolute", spec("integrated_gradients", [SG, ABS], baseline="zero", steps=16))
_register("ig_sg_sq", "IG-SG-SQ", "absolute", spec("integrated_gradients", [SG_SQ], baseline="zero", steps=16))
_register("saliency", "Saliency", "absolute", spec("saliency"))
_register("gradient", "Gradient", "raw", spec("gradient"))
_register("rise", "RISE", "perturbation", spec("rise", num_masks=500, cells=7, keep_prob=0.5, baseline="zero"))
_register("rise_u", "RISE-U", "perturbation", spec("rise", num_masks=500, cells=7, keep_prob=0.5, baseline="uniform"))
_register("occlusion", "Occlusion", "perturbation", spec("occlusion", window=8, stride=4, baseline="zero"))
_register("grad_cam", "Grad-CAM", "cam", spec("grad_cam"))
_register("grad_cam_pp", "Grad-CAM++", "cam", spec("grad_cam_pp"))
_register("sg_cam_pp", "SG-CAM++", "cam", spec("grad_cam_pp", [SG]))
_register("xgrad_cam", "XGrad-CAM", "cam", spec("xgrad_cam"))
_register("layer_cam", "Layer-CAM", "cam", spec("layer_cam"))
_register("bagnet_native", "BagNet", "intrinsic", spec("bagnet_native"))

PAPER_ROSTER = [
    "ixg", "ixg_sg", "ig", "ig_u", "ig_sg", "ixg_abs", "ixg_sg_abs", "ig_abs", "ig_u_abs",
    "ig_sg_abs", "ig_sg_sq", "saliency", "rise", "rise_u", "grad_cam", "grad_cam_pp",
    "sg_cam_pp", "xgrad_cam", "layer_cam",
]  # fmt: skip


def get_method(method_id: str | MethodSpec | dict) -> MethodSpec:
    if isinstance(method_id, MethodSpec):
        return method_id
    if isinstance(method_id, dict):
        return MethodSpec.from_dict(method_id)
    if method_id not in REGISTRY:
        raise ConfigError(f"unknown method {method_id!r}; registered methods: {sorted(REGISTRY)}")
    return REGISTRY[method_id][2]


def method_label(method: str | MethodSpec) -> str:
    mid = method.id if isinstance(method, MethodSpec) else method
    return REGISTRY[mid][0] if mid in REGISTRY else mid


def method_group(method: str | MethodSpec) -> str:
    ms = get_method(method) if isinstance(method, str) and method in REGISTRY else method
    mid = ms.id if isinstance(ms, MethodSpec) else str(ms)
    if mid in REGISTRY:
        return REGISTRY[mid][1]
    if isinstance(ms, MethodSpec):
        if any(w.kind in ("abs", "smoothgrad_sq") for w in ms.wrappers) or ms.base == "saliency":
            return "absolute"
        if ms.base in CAM_VARIANTS:
            return "cam"
        if ms.base in ("rise", "occlusion"):
            return "perturbation"
        if ms.base == "bagnet_native":
            return "intrinsic"
    return "raw"


@dataclass
class AttributionResult:
    map: np.ndarray
    method: str
    target: int
    softmax_mode: str
    wrappers: tuple[str, ...] = ()
    warnings: list[str] = field(default_factory=list)


def method_rng(seed: int, image_id: int, method_id: str, *extra: int) -> np.random.Generator:
    """Random stream keyed by (seed, image, method) so evaluation order never matters."""
    return np.random.default_rng([int(seed), int(image_id), zlib.crc32(method_id.encode()), *extra])


# model plumbing


def _check(model: Model, x: np.ndarray, target: int, mode: str) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.shape != tuple(model.config.input_shape):
        raise ConfigError(f"expected a single {model.config.input_shape} image, got {x.shape}")
    if not 0 <= int(target) < model.config.num_classes:
        raise ConfigError(f"target {target} outside [0, {model.config.num_classes})")
    if mode not in ("pre", "post"):
        raise ConfigError(f"softmax_mode must be 'pre' or 'post', got {mode!r}")
    return x


def _score(logits: Tensor, target: int, mode: str) -> Tensor:
    out = ad.softmax(logits) if mode == "post" else logits
    return ad.pick(out, np.full(out.shape[0], int(target))).sum()


def input_gradients(model: Model, xs: np.ndarray, target: int, mode: str = "pre") -> tuple[np.ndarray, np.ndarray]:
    """Per-sample ``d f_t / d x`` for a batch and the corresponding outputs.

    Samples do not interact in eval mode, so one backward pass of the summed
    target outputs yields every sample's own gradient.
    """
    model.eval()
    grads, outs = [], []
    for i in range(0, len(xs), _BATCH):
        xt = Tensor(xs[i : i + _BATCH], requires_grad=True)
        logits = model(xt)
        s = _score(logits, target, mode)
        s.backward()
        grads.append(xt.grad)
        outs.append(ad.softmax(logits).data if mode == "post" else logits.data)
    return np.concatenate(grads), np.concatenate(outs)[:, int(target)]


def target_outputs(model: Model, xs: np.ndarray, target: int, mode: str = "pre") -> np.ndarray:
    from .models import predict

    return predict(model, xs, mode, batch_size=_BATCH * 2)[:, int(target)]


# base methods


def _gradient(model, x, t, mode, **_):
    g, _ = input_gradients(model, x[None], t, mode)
    return g[0].sum(axis=0)


def _saliency(model, x, t, mode, **_):
    return np.abs(_gradient(model, x, t, mode))


def _input_x_gradient(model, x, t, mode, **_):
    g, _ = input_gradients(model, x[None], t, mode)
    return (x * g[0]).sum(axis=0)


def integrated_gradients_map(model, x, t, baseline_image, steps, mode="pre"):
    """``(x - b) * mean_k grad f_t(b + a_k (x - b))`` with midpoint nodes ``a_k = (k + 1/2) / m``."""
    if steps < 8:
        raise ConfigError(f"integrated_gradients needs steps >= 8, got {steps}")
    alphas = (np.arange(steps) + 0.5) / steps
    path = baseline_image[None] + alphas[:, None, None, None] * (x - baseline_image)[None]
    g, _ = input_gradients(model, path, t, mode)
    return ((x - baseline_image) * g.mean(axis=0)).sum(axis=0)


def _integrated_gradients(model, x, t, mode, rng, baseline="zero", steps=64, **_):
    if isinstance(baseline, np.ndarray):
        b = baseline
    elif baseline == "zero":
        b = np.zeros_like(x)
    elif baseline == "uniform":
        b = rng.uniform(-1.0, 1.0, size=x.shape)
    else:
        raise ConfigError(f"unknown IG baseline {baseline!r}; use 'zero' or 'uniform'")
    return integrated_gradients_map(model, x, t, b, int(steps), mode)


def bilinear_resize(maps: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resize of ``(..., h, w)`` with half-pixel centers and edge clamping."""
    h, w = maps.shape[-2:]

    def axis_weights(n_in, n_out):
        pos = (np.arange(n_out) + 0.5) * n_in / n_out - 0.5
        pos = np.clip(pos, 0, n_in - 1)
        lo = np.floor(pos).astype(int)
        hi = np.minimum(lo + 1, n_in - 1)
        frac = pos - lo
        m = np.zeros((n_out, n_in))
        np.add.at(m, (np.arange(n_out), lo), 1 - frac)
        np.add.at(m, (np.arange(n_out), hi), frac)
        return m

    rh, rw = axis_weights(h, out_h), axis_weights(w, out_w)
    return np.einsum("ih,...hw,jw->...ij", rh, maps, rw)


def cam_weights_and_maps(model, x, t, mode, layer=None):
    layer = layer or model.default_cam_layer
    if layer not in model.conv_layers:
        raise ConfigError(f"CAM layer {layer!r} is not a conv layer; valid layers: {model.conv_layers}")
    model.eval()
    xt = Tensor(x[None], requires_grad=True)
    logits, caps = model.forward(xt, capture=(layer,))
    act = caps[layer]
    _score(logits, t, mode).backward()
    grad = act.grad if act.grad is not None else np.zeros_like(act.data)
    return act.data[0], grad[0]


def cam_map(acts: np.ndarray, grads: np.ndarray, variant: str) -> np.ndarray:
    """Low-resolution CAM from feature maps ``A`` (K, h, w) and gradients ``G``."""
    if variant == "grad_cam":
        w = grads.mean(axis=(1, 2))
        cam = np.tensordot(w, acts, axes=1)
    elif variant == "xgrad_cam":
        z = acts.sum(axis=(1, 2), keepdims=True)
        w = (acts / (z + 1e-7) * grads).sum(axis=(1, 2))
        cam = np.tensordot(w, acts, axes=1)
    elif variant == "layer_cam":
        cam = (np.maximum(grads, 0) * acts).sum(axis=0)
    elif variant == "grad_cam_pp":
        # For S = exp(y), dS/dA = S*g and the k-th derivative is S*g^k, so the
        # second/third-order terms reduce to g^2 and g^3:
        #   alpha = g^2 / (2 g^2 + sum_ab A_ab g^3),  w_k = sum_ij alpha relu(g)
        g2 = grads**2
        g3 = g2 * grads
        denom = 2 * g2 + (acts * g3).sum(axis=(1, 2), keepdims=True)
        alpha = np.divide(g2, denom, out=np.zeros_like(g2), where=(g2 > 0) & (denom != 0))
        w = (alpha * np.maximum(grads, 0)).sum(axis=(1, 2))
        cam = np.tensordot(w, acts, axes=1)
    else:
        raise ConfigError(f"unknown CAM variant {variant!r}")
    return np.maximum(cam, 0)


def _cam(variant):
    def run(model, x, t, mode, warnings, layer=None, **_):
        acts, grads = cam_weights_and_maps(model, x, t, mode, layer)
        if not np.any(acts):
            warnings.append("all-zero feature maps")
            return np.zeros(x.shape[1:])
        low = cam_map(acts, grads, variant)
        return bilinear_resize(low, *x.shape[1:])

    return run


def _fill_image(x, kind, rng):
    if kind == "zero":
        return np.zeros_like(x)
    if kind == "uniform":
        return rng.uniform(-1.0, 1.0, size=x.shape)
    raise ConfigError(f"unknown fill baseline {kind!r}; use 'zero' or 'uniform'")


def _occlusion(model, x, t, mode, rng, window=8, stride=4, baseline="zero", **_):
    c, h, w = x.shape
    window, stride = int(window), int(stride)
    if not 1 <= window <= min(h, w) or stride < 1:
        raise ConfigError(f"bad occlusion window {window} / stride {stride} for {h}x{w}")
    fill = _fill_image(x, baseline, rng)
    rows = list(range(0, h - window + 1, stride))
    cols = list(range(0, w - window + 1, stride))
    batch, boxes = [], []
    for r in rows:
        for cc in cols:
            xo = x.copy()
            xo[:, r : r + window, cc : cc + window] = fill[:, r : r + window, cc : cc + window]
            batch.append(xo)
            boxes.append((r, cc))
    ref = target_outputs(model, x[None], t, mode)[0]
    outs = target_outputs(model, np.stack(batch), t, mode)
    total = np.zeros((h, w))
    count = np.zeros((h, w))
    for (r, cc), o in zip(boxes, outs):
        total[r : r + window, cc : cc + window] += ref - o
        count[r : r + window, cc : cc + window] += 1
    return np.divide(total, count, out=np.zeros_like(total), where=count > 0)


def rise_masks(num_masks: int, cells: int, keep_prob: float, height: int, width: int, rng) -> np.ndarray:
    """Random ``cells``×``cells`` binary grids, bilinearly upsampled and randomly shifted."""
    ch, cw = int(np.ceil(height / cells)), int(np.ceil(width / cells))
    grid = (rng.random((num_masks, cells, cells)) < keep_prob).astype(np.float64)
    up = bilinear_resize(grid, (cells + 1) * ch, (cells + 1) * cw)
    shifts = rng.integers(0, [ch, cw], size=(num_masks, 2))
    out = np.empty((num_masks, height, width))
    for i, (dy, dx) in enumerate(shifts):
        out[i] = up[i, dy : dy + height, dx : dx + width]
    return out


def _rise(model, x, t, mode, rng, num_masks=500, cells=7, keep_prob=0.5, baseline="zero", **_):
    num_masks, cells, keep_prob = int(num_masks), int(cells), float(keep_prob)
    c, h, w = x.shape
    if keep_prob >= 1.0:
        masks = np.ones((num_masks, h, w))
    else:
        masks = rise_masks(num_masks, cells, keep_prob, h, w, rng)
    fill = _fill_image(x, baseline, rng)
    composite = x[None] * masks[:, None] + fill[None] * (1 - masks[:, None])
    scores = target_outputs(model, composite, t, mode)
    return np.tensordot(scores, masks, axes=1) / (num_masks * keep_prob)


def _bagnet_native(model, x, t, mode, **_):
    if model.config.family != "bagnet_local":
        raise ConfigError(f"bagnet_native needs a bagnet_local model, got {model.config.family}")
    from .autodiff import no_grad

    model.eval()
    with no_grad():
        _, caps = model.forward(Tensor(x[None]), capture=("local_logits",))
    local = caps["local_logits"].data[0, int(t)]
    lh, lw = local.shape
    h, w = x.shape[1:]
    ph, pw = h // lh, w // lw
    per_pixel = local / (lh * lw * ph * pw)
    return np.repeat(np.repeat(per_pixel, ph, axis=0), pw, axis=1)


_BASE_FNS: dict[str, Callable] = {
    "gradient": _gradient,
    "saliency": _saliency,
    "input_x_gradient": _input_x_gradient,
    "integrated_gradients": _integrated_gradients,
    "grad_cam": _cam("grad_cam"),
    "grad_cam_pp": _cam("grad_cam_pp"),
    "xgrad_cam": _cam("xgrad_cam"),
    "layer_cam": _cam("layer_cam"),
    "occlusion": _occlusion,
    "rise": _rise,
    "bagnet_native": _bagnet_native,
}


def _run_base(ms: MethodSpec, model, x, t, mode, rng, warnings):
    return _BASE_FNS[ms.base](model, x, t, mode, rng=rng, warnings=warnings, **ms.kwargs)


def _apply(ms: MethodSpec, level: int, model, x, t, mode, rng, warnings) -> np.ndarray:
    """Evaluate the chain up to wrapper ``level`` (0 = bare base method)."""
    if level == 0:
        return _run_base(ms, model, x, t, mode, rng, warnings)
    w = ms.wrappers[level - 1]
    if w.kind == "abs":
        return np.abs(_apply(ms, level - 1, model, x, t, mode, rng, warnings))
    squared = w.kind == "smoothgrad_sq"
    if w.sigma == 0:
        inner = _apply(ms, level - 1, model, x, t, mode, rng, warnings)
        return inner**2 if squared else inner
    scale = w.sigma * float(x.max() - x.min())
    acc = np.zeros(x.shape[1:])
    for _ in range(w.n):
        noisy = x + rng.normal(0.0, scale, size=x.shape)
        m = _apply(ms, level - 1, model, noisy, t, mode, rng, warnings)
        acc += m**2 if squared else m
    return acc / w.n


def attribute(
    model: Model,
    x: np.ndarray,
    target: int,
    method: str | MethodSpec,
    softmax_mode: str = "pre",
    seed: int = 0,
    image_id: int = 0,
    cache: dict | None = None,
) -> AttributionResult:
    """Compute one attribution map; deterministic given (model, x, target, seed, image_id).

    ``cache`` (one dict per image) lets ``abs`` variants reuse the raw map of
    the same chain instead of recomputing it.
    """
    ms = get_method(method)
    x = _check(model, x, target, softmax_mode)
    warnings: list[str] = []
    has_abs = bool(ms.wrappers) and ms.wrappers[-1].kind == "abs"
    key = (ms.core_key, int(target), softmax_mode)
    if cache is not None and key in cache:
        core, warnings = cache[key][0], list(cache[key][1])
    else:
        rng = method_rng(seed, image_id, ms.core_key)
        core = _apply(ms, len(ms.wrappers) - has_abs, model, x, int(target), softmax_mode, rng, warnings)
        if cache is not None:
            cache[key] = (core, tuple(warnings))
    amap = np.abs(core) if has_abs else core
    return AttributionResult(
        np.asarray(amap, dtype=np.float64),
        ms.id,
        int(target),
        softmax_mode,
        tuple(w.label() for w in ms.wrappers),
        sorted(set(warnings)),
    )


# functional aliases mirroring the method ids


def gradient(model, x, t, mode="pre") -> AttributionResult:
    return attribute(model, x, t, spec("gradient"), mode)


def saliency(model, x, t, mode="pre") -> AttributionResult:
    return attribute(model, x, t, spec("saliency"), mode)


def input_x_gradient(model, x, t, mode="pre") -> AttributionResult:
    return attribute(model, x, t, spec("input_x_gradient"), mode)


def integrated_gradients(model, x, t, baseline="zero", steps=64, mode="pre", seed=0, image_id=0) -> AttributionResult:
    if isinstance(baseline, np.ndarray):
        x = _check(model, x, t, mode)
        if baseline.shape != x.shape:
            raise ConfigError(f"baseline shape {baseline.shape} differs from input {x.shape}")
        amap = integrated_gradients_map(model, x, int(t), baseline, int(steps), mode)
        return AttributionResult(amap, "integrated_gradients", int(t), mode)
    return attribute(model, x, t, spec("integrated_gradients", baseline=baseline, steps=steps), mode, seed, image_id)


def cam_family(model, x, t, layer=None, variant="grad_cam", mode="pre") -> AttributionResult:
    if variant not in CAM_VARIANTS:
        raise ConfigError(f"unknown CAM variant {variant!r}; expected one of {CAM_VARIANTS}")
    params = {"layer": layer} if layer else {}
    return attribute(model, x, t, spec(variant, **params), mode)


def occlusion(model, x, t, window=8, stride=4, baseline="zero", mode="pre") -> AttributionResult:
    return attribute(model, x, t, spec("occlusion", window=window, stride=stride, baseline=baseline), mode)


def rise(model, x, t, num_masks=500, cells=7, keep_prob=0.5, baseline="zero", seed=0, mode="pre", image_id=0) -> AttributionResult:
    ms = spec("rise", num_masks=num_masks, cells=cells, keep_prob=keep_prob, baseline=baseline)
    return attribute(model, x, t, ms, mode, seed, image_id)


def bagnet_native(model, x, t) -> AttributionResult:
    return attribute(model, x, t, spec("bagnet_native"), "pre")


# export


def save_map(result: AttributionResult, path: str | Path) -> tuple[Path, Path]:
    """Write the map as raw little-endian f64 (row-major) plus a JSON metadata sidecar."""
    path = Path(path)
    raw = path.with_suffix(".f64")
    meta = path.with_suffix(".json")
    raw.write_bytes(np.ascontiguousarray(result.map, dtype="<f8").tobytes())
    meta.write_text(
        json.dumps(
            {
                "shape": list(result.map.shape),
                "method": result.method,
                "target": result.target,
                "softmax_mode": result.softmax_mode,
                "wrappers": list(result.wrappers),
                "warnings": list(result.warnings),
            },
            indent=1,
            sort_keys=True,
        )
        + "\n"
    )
    return raw, meta


def load_map(path: str | Path) -> AttributionResult:
    path = Path(path)
    meta = json.loads(path.with_suffix(".json").read_text())
    data = np.frombuffer(path.with_suffix(".f64").read_bytes(), dtype="<f8").astype(np.float64)
    return AttributionResult(
        data.reshape(meta["shape"]),
        meta["method"],
        meta["target"],
        meta["softmax_mode"],
        tuple(meta["wrappers"]),
        list(meta["warnings"]),
    )


def to_pgm(amap: np.ndarray) -> bytes:
    """Binary 8-bit PGM; the map's min maps to 0 and its max to 255 (constant maps are black)."""
    amap = np.asarray(amap, dtype=np.float64)
    lo, hi = float(amap.min()), float(amap.max())
    scaled = np.zeros(amap.shape) if hi == lo else (amap - lo) / (hi - lo)
    pixels = np.rint(scaled * 255).astype(np.uint8)
    h, w = amap.shape
    return f"P5\n{w} {h}\n255\n".encode() + pixels.tobytes()
