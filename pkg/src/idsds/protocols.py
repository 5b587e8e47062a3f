"""Deletion-based evaluation protocols and their statistics.

IDSDS/SDS: per image, Spearman correlation between per-patch attribution sums
and the target-logit drops caused by deleting each patch on its own, averaged
over the dataset. IDSDS uses a model fine-tuned with matching patch deletion;
SDS is the same computation on a model that never saw deleted patches.

IDS: incremental deletion in descending attribution order; the score per image
is the mean over steps of the normalized drop
``(f(x) - f(x_k)) / (f(x) - f(b))`` clamped to [-1, 2].
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from .attribution import MethodSpec, attribute, get_method, method_rng
from .data import Dataset
from .errors import ConfigError
from .models import Model, predict
from .patches import Baseline, PatchGrid, all_single_deletions

AttributionFn = Callable[[Model, np.ndarray, int, int], np.ndarray]


# rank statistics


def rankdata(values: Sequence[float]) -> np.ndarray:
    """1-based ranks; tied values share the average of their positions."""
    a = np.asarray(values, dtype=np.float64)
    order = np.argsort(a, kind="mergesort")
    sorted_a = a[order]
    ranks = np.empty(len(a))
    i = 0
    n = len(a)
    while i < n:
        j = i
        while j + 1 < n and sorted_a[j + 1] == sorted_a[i]:
            j += 1
        ranks[order[i : j + 1]] = (i + j) / 2.0 + 1.0
        i = j + 1
    return ranks


def rank_correlation(a: Sequence[float], b: Sequence[float]) -> tuple[float, bool]:
    """Spearman r as the Pearson correlation of average ranks, plus a degenerate flag.

    If either rank vector is constant the correlation is undefined; it is
    reported as 0 with ``degenerate=True``.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise ConfigError(f"spearman needs two 1-D sequences of equal length, got {a.shape} and {b.shape}")
    if len(a) < 2:
        raise ConfigError("spearman needs at least two values")
    if not (np.all(np.isfinite(a)) and np.all(np.isfinite(b))):
        raise ConfigError("spearman inputs must be finite")
    ra = rankdata(a)
    rb = rankdata(b)
    da = ra - ra.mean()
    db = rb - rb.mean()
    saa = float(da @ da)
    sbb = float(db @ db)
    if saa == 0.0 or sbb == 0.0:
        return 0.0, True
    r = float(da @ db) / math.sqrt(saa * sbb)
    return min(1.0, max(-1.0, r)), False


def spearman(a: Sequence[float], b: Sequence[float]) -> float:
    return rank_correlation(a, b)[0]


# reports


@dataclass
class ProtocolReport:
    protocol: str
    method: str
    records: list[dict]
    aggregate: float
    fingerprint: dict = field(default_factory=dict)
    degenerate_count: int = 0

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ProtocolReport":
        return cls(**d)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=1)


def recompute_aggregate(report: ProtocolReport) -> float:
    """Recompute a single-deletion score from the stored per-patch sums and drops."""
    rs = [spearman(rec["patch_attributions"], rec["drops"]) for rec in report.records]
    return float(np.mean(rs)) if rs else float("nan")


def fingerprint(model: Model, grid: PatchGrid | None, baseline: Baseline, method: str, seed: int, **extra) -> dict:
    fp = {
        "grid": None if grid is None else {"side": grid.side, "height": grid.height, "width": grid.width},
        "baseline": baseline.to_dict(),
        "method": method,
        "model_sha256": model.content_hash(),
        "model_config": model.config.to_dict(),
        "seed": seed,
    }
    fp.update(extra)
    return fp


# single deletion


def patch_drops(model: Model, x: np.ndarray, target: int, grid: PatchGrid, baseline: Baseline, image_id: int = 0) -> np.ndarray:
    """``f_t(x) - f_t(x with patch m deleted)`` for m = 1..P (P + 1 forward passes)."""
    grid.check_image(x.shape)
    b = baseline.image(x, key=(image_id,))
    batch = np.concatenate([x[None], all_single_deletions(x, grid, b)])
    logits = predict(model, batch, "pre")[:, int(target)]
    return logits[0] - logits[1:]


def exact_drop_attribution(model, x, target, grid: PatchGrid, baseline: Baseline, image_id: int = 0) -> np.ndarray:
    """Oracle map whose patch sums are the measured drops, spread uniformly in each patch."""
    return grid.scatter(patch_drops(model, x, target, grid, baseline, image_id))


def _resolve(method) -> tuple[str, AttributionFn]:
    """Normalize a registry id, MethodSpec, or plain callable into ``(name, fn)``."""
    if callable(method) and not isinstance(method, MethodSpec):
        return getattr(method, "__name__", "custom"), method
    ms = get_method(method)
    return ms.id, None


def single_deletion_scores(
    model: Model,
    dataset: Dataset,
    methods: Sequence,
    grid: PatchGrid,
    baseline: Baseline,
    softmax_mode: str = "pre",
    seed: int = 0,
    protocol: str = "IDSDS",
) -> dict[str, ProtocolReport]:
    """Evaluate several methods on one model, measuring each image's drops once.

    ``methods`` holds registry ids, MethodSpecs, or callables
    ``fn(model, x, target, image_id) -> H×W map``.
    """
    if not methods:
        raise ConfigError("method roster is empty")
    grid.check_image(dataset.images.shape)
    resolved = [(_resolve(m), m) for m in methods]
    names = [name for (name, _), _ in resolved]
    if len(set(names)) != len(names):
        raise ConfigError(f"duplicate methods in roster: {names}")
    per_method: dict[str, list[dict]] = {n: [] for n in names}
    model.eval()
    for i in range(len(dataset)):
        item = dataset[i]
        drops = patch_drops(model, item.pixels, item.label, grid, baseline, item.id)
        cache: dict = {}
        for (name, fn), m in resolved:
            if fn is not None:
                amap = np.asarray(fn(model, item.pixels, item.label, item.id), dtype=np.float64)
            else:
                amap = attribute(model, item.pixels, item.label, m, softmax_mode, seed, item.id, cache).map
            sums = grid.patch_sums(amap)
            r, degenerate = rank_correlation(sums, drops)
            per_method[name].append(
                {
                    "image_id": item.id,
                    "target": item.label,
                    "patch_attributions": sums.tolist(),
                    "drops": drops.tolist(),
                    "r": r,
                    "degenerate": degenerate,
                }
            )
    reports = {}
    for name in names:
        recs = per_method[name]
        reports[name] = ProtocolReport(
            protocol=protocol,
            method=name,
            records=recs,
            aggregate=float(np.mean([r["r"] for r in recs])) if recs else float("nan"),
            fingerprint=fingerprint(model, grid, baseline, name, seed, softmax_mode=softmax_mode),
            degenerate_count=sum(r["degenerate"] for r in recs),
        )
    return reports


def idsds(model, dataset, method, grid, baseline, softmax_mode="pre", seed=0) -> ProtocolReport:
    """In-domain single-deletion score; ``model`` should be fine-tuned for (grid, baseline)."""
    reports = single_deletion_scores(model, dataset, [method], grid, baseline, softmax_mode, seed, "IDSDS")
    return next(iter(reports.values()))


def sds(model, dataset, method, grid, baseline, softmax_mode="pre", seed=0) -> ProtocolReport:
    """The same computation on a model without deletion fine-tuning."""
    reports = single_deletion_scores(model, dataset, [method], grid, baseline, softmax_mode, seed, "SDS")
    return next(iter(reports.values()))


# incremental deletion


def _units(amap: np.ndarray, grid: PatchGrid | None) -> np.ndarray:
    return amap.reshape(-1) if grid is None else grid.patch_sums(amap)


def _unit_masks(grid: PatchGrid | None, h: int, w: int) -> np.ndarray | None:
    if grid is None:
        return None
    return np.stack([grid.mask(m) for m in range(1, grid.num_patches + 1)])


def incremental_deletion_curve(
    model: Model,
    x: np.ndarray,
    target: int,
    attribution: Callable[[np.ndarray], np.ndarray] | None,
    grid: PatchGrid | None,
    baseline: Baseline,
    steps: int,
    mode: str = "fixed",
    order: str = "descending",
    rng: np.random.Generator | None = None,
    image_id: int = 0,
) -> tuple[np.ndarray, float, bool]:
    """Normalized drop after each deletion step, the clamped mean score, and a degenerate flag."""
    c, h, w = x.shape
    n_units = h * w if grid is None else grid.num_patches
    if steps < 2:
        raise ConfigError(f"IDS needs at least 2 steps, got {steps}")
    if steps > n_units:
        raise ConfigError(f"IDS steps {steps} exceed the {n_units} deletable units")
    if mode not in ("fixed", "updated"):
        raise ConfigError(f"attribution mode must be 'fixed' or 'updated', got {mode!r}")
    if order not in ("descending", "random"):
        raise ConfigError(f"order must be 'descending' or 'random', got {order!r}")
    if order == "random" and mode == "updated":
        raise ConfigError("random order has no attribution to update")
    per_step = math.ceil(n_units / steps)
    b = baseline.image(x, key=(image_id,))
    masks = _unit_masks(grid, h, w)
    deleted = np.zeros(n_units, dtype=bool)
    current = x.copy()
    f0, fb = predict(model, np.stack([x, b]), "pre")[:, int(target)]
    denom = f0 - fb
    degenerate = abs(denom) < 1e-12
    if order == "random":
        ranking = rng.permutation(n_units)
    else:
        ranking = np.argsort(-_units(attribution(x), grid), kind="stable")
    states = []
    for k in range(steps):
        if mode == "updated" and k > 0:
            ranking = np.argsort(-_units(attribution(current), grid), kind="stable")
        chosen = [u for u in ranking if not deleted[u]][:per_step]
        for u in chosen:
            deleted[u] = True
            if grid is None:
                r, cc = divmod(int(u), w)
                current[:, r, cc] = b[:, r, cc]
            else:
                current[:, masks[u]] = b[:, masks[u]]
        states.append(current.copy())
    outs = predict(model, np.stack(states), "pre")[:, int(target)]
    if degenerate:
        curve = np.zeros(steps)
    else:
        curve = np.clip((f0 - outs) / denom, -1.0, 2.0)
    return curve, float(curve.mean()), bool(degenerate)


def ids(
    model: Model,
    dataset: Dataset,
    method,
    grid: PatchGrid | None,
    baseline: Baseline,
    steps: int = 32,
    attribution_mode: str = "fixed",
    order: str = "descending",
    softmax_mode: str = "pre",
    seed: int = 0,
) -> ProtocolReport:
    """Incremental-deletion score; ``grid=None`` deletes single pixels."""
    model.eval()
    name, fn = _resolve(method) if order == "descending" else ("random", None)
    records = []
    for i in range(len(dataset)):
        item = dataset[i]
        if order == "random":
            attr = None
        elif fn is not None:
            attr = lambda z, item=item: np.asarray(fn(model, z, item.label, item.id))
        else:
            attr = lambda z, item=item: attribute(model, z, item.label, method, softmax_mode, seed, item.id).map
        rng = method_rng(seed, item.id, "ids-random-order")
        curve, score, degenerate = incremental_deletion_curve(
            model, item.pixels, item.label, attr, grid, baseline, steps, attribution_mode, order, rng, item.id
        )
        records.append({"image_id": item.id, "curve": curve.tolist(), "score": score, "degenerate": degenerate})
    return ProtocolReport(
        protocol=f"IDS({attribution_mode})",
        method=name,
        records=records,
        aggregate=float(np.mean([r["score"] for r in records])) if records else float("nan"),
        fingerprint=fingerprint(model, grid, baseline, name, seed, steps=steps, order=order, attribution_mode=attribution_mode),
        degenerate_count=sum(r["degenerate"] for r in records),
    )


# accuracy under deletion


@dataclass(frozen=True)
class CorruptedAccuracy:
    uncorrupted: float
    worst_patch: float


def corrupted_accuracy(model: Model, dataset: Dataset, grid: PatchGrid, baseline: Baseline) -> CorruptedAccuracy:
    """Accuracy on clean images and with each image's worst-case patch deleted.

    The worst-case patch minimizes the target-class softmax probability.
    """
    grid.check_image(dataset.images.shape)
    clean_hits = worst_hits = 0
    for i in range(len(dataset)):
        item = dataset[i]
        b = baseline.image(item.pixels, key=(item.id,))
        batch = np.concatenate([item.pixels[None], all_single_deletions(item.pixels, grid, b)])
        probs = predict(model, batch, "post")
        clean_hits += int(probs[0].argmax() == item.label)
        worst = 1 + int(np.argmin(probs[1:, item.label]))
        worst_hits += int(probs[worst].argmax() == item.label)
    n = len(dataset)
    return CorruptedAccuracy(clean_hits / n, worst_hits / n)


def random_patch_accuracy(model: Model, dataset: Dataset, grid: PatchGrid, baseline: Baseline, seed: int = 0) -> float:
    """Accuracy with one uniformly random patch deleted per image."""
    rng = np.random.default_rng([seed, 0x7A7])
    hits = 0
    for i in range(len(dataset)):
        item = dataset[i]
        m = int(rng.integers(1, grid.num_patches + 1))
        b = baseline.image(item.pixels, key=(item.id,))
        r0, r1, c0, c1 = grid.bounds(m)
        x = item.pixels.copy()
        x[:, r0:r1, c0:c1] = b[:, r0:r1, c0:c1]
        hits += int(predict(model, x).argmax() == item.label)
    return hits / len(dataset)


# leakage audit


def plugin_mutual_information(classes: Sequence[int], masks: Sequence[int]) -> float:
    """Plug-in estimate of I(C; M) in nats from paired discrete samples."""
    c = np.asarray(classes)
    m = np.asarray(masks)
    if c.shape != m.shape or c.ndim != 1 or len(c) == 0:
        raise ConfigError("classes and masks must be equal-length non-empty 1-D sequences")
    _, ci = np.unique(c, return_inverse=True)
    _, mi = np.unique(m, return_inverse=True)
    joint = np.zeros((ci.max() + 1, mi.max() + 1))
    np.add.at(joint, (ci, mi), 1.0)
    joint /= joint.sum()
    pc = joint.sum(axis=1, keepdims=True)
    pm = joint.sum(axis=0, keepdims=True)
    nz = joint > 0
    return max(0.0, float(np.sum(joint[nz] * np.log(joint[nz] / (pc @ pm)[nz]))))


def leakage_audit(mask_sampler: Callable[[int, int, int], int], labels: Sequence[int], draws: int, seed: int = 0) -> float:
    """Estimate I(C; M) between labels and the sampler's deletion choices.

    Draw ``i`` uses sample index ``i % len(labels)`` and epoch ``i // len(labels)``;
    the sampler is called as ``mask_sampler(label, epoch, index)``.
    """
    labels = np.asarray(labels, dtype=np.int64)
    if len(labels) == 0 or draws < 1:
        raise ConfigError("leakage audit needs labels and at least one draw")
    n = len(labels)
    classes = np.empty(draws, dtype=np.int64)
    masks = np.empty(draws, dtype=np.int64)
    batch_draws = getattr(mask_sampler, "epoch_draws", None)
    for start in range(0, draws, n):
        epoch = start // n
        count = min(n, draws - start)
        classes[start : start + count] = labels[:count]
        if batch_draws is not None:
            masks[start : start + count] = batch_draws(epoch, n)[:count]
        else:
            masks[start : start + count] = [mask_sampler(int(labels[i]), epoch, i) for i in range(count)]
    return plugin_mutual_information(classes, masks)


# network similarity


def _max_normalize(a: np.ndarray) -> np.ndarray:
    peak = np.max(np.abs(a))
    return a / peak if peak > 0 else np.zeros_like(a)


def network_similarity(model_a: Model, model_b: Model, dataset: Dataset, method="grad_cam", seed: int = 0) -> tuple[float, float]:
    """Mean |p_a(t) - p_b(t)| and mean pixelwise |A_a - A_b| of max-normalized maps."""
    pa = predict(model_a, dataset.images, "post")[np.arange(len(dataset)), dataset.labels]
    pb = predict(model_b, dataset.images, "post")[np.arange(len(dataset)), dataset.labels]
    mad_softmax = float(np.mean(np.abs(pa - pb)))
    diffs = []
    for i in range(len(dataset)):
        item = dataset[i]
        ma = attribute(model_a, item.pixels, item.label, method, seed=seed, image_id=item.id).map
        mb = attribute(model_b, item.pixels, item.label, method, seed=seed, image_id=item.id).map
        diffs.append(np.mean(np.abs(_max_normalize(ma) - _max_normalize(mb))))
    return mad_softmax, float(np.mean(diffs))


def top_activating(model: Model, layer: str, channel: int, dataset: Dataset, k: int) -> list[int]:
    """Ids of the ``k`` images with the largest spatial maximum of one channel."""
    from .autodiff import Tensor, no_grad

    if k > len(dataset):
        raise ConfigError(f"k={k} exceeds dataset size {len(dataset)}")
    if k < 1:
        raise ConfigError("k must be positive")
    model.eval()
    peaks = []
    with no_grad():
        for i in range(0, len(dataset), 128):
            _, caps = model.forward(Tensor(dataset.images[i : i + 128]), capture=(layer,))
            maps = caps[layer].data
            if not 0 <= channel < maps.shape[1]:
                raise ConfigError(f"channel {channel} outside [0, {maps.shape[1]}) for layer {layer}")
            peaks.append(maps[:, channel].reshape(len(maps), -1).max(axis=1))
    peaks = np.concatenate(peaks)
    order = np.lexsort((dataset.ids, -peaks))
    return [int(dataset.ids[i]) for i in order[:k]]


# ranking comparisons


def ranking_correlations(scores: Mapping[str, Mapping[str, float]]) -> dict[str, dict[str, float]]:
    """Spearman correlation between method rankings for every pair of conditions."""
    conds = list(scores)
    if not conds:
        return {}
    methods = sorted(scores[conds[0]])
    for c in conds:
        if sorted(scores[c]) != methods:
            raise ConfigError(f"condition {c!r} scores a different method set")
    out: dict[str, dict[str, float]] = {}
    for a in conds:
        out[a] = {}
        for b in conds:
            va = [scores[a][m] for m in methods]
            vb = [scores[b][m] for m in methods]
            out[a][b] = spearman(va, vb) if len(methods) >= 2 else float("nan")
    return out


def model_hash_short(model: Model) -> str:
    return hashlib.sha256(model.weights_bytes()).hexdigest()[:12]
