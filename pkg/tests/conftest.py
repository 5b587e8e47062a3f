"""Shared desk-scale models for the acceptance suite.

Training is the expensive part, so every model and every roster evaluation is
built at most once per session and reused by whichever test asks first.
"""

import time

import pytest

from idsds import campaign, protocols
from idsds.attribution import PAPER_ROSTER
from idsds.models import ModelConfig, TrainConfig, finetune_in_domain, train
from idsds.patches import Baseline

EVAL_IMAGES = 100

_verdicts: list[str] = []


def record_verdict(number: int, title: str, ok: bool, detail: str) -> bool:
    line = f"criterion {number:2d} {'PASS' if ok else 'FAIL'}  {title}: {detail}"
    print(line)
    _verdicts.append(line)
    return ok


def pytest_terminal_summary(terminalreporter):
    if _verdicts:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_verdicts):
            terminalreporter.write_line(line)


class Desk:
    """Lazily trained models on the default synthetic set, keyed by what varies."""

    def __init__(self):
        self.cfg = campaign.resolve_config({}, ["data.eval_limit=null"])
        self.train_set, self.eval_all, self.ground_truth = campaign.load_data(self.cfg)
        self.eval_set = self.eval_all.head(EVAL_IMAGES)
        self.grid = campaign.grid_for(self.cfg, self.train_set.image_shape)
        self.zero = Baseline.zero()
        self.timings: dict[str, float] = {}
        # prepare_models memoizes bases by entry name only, so keep one memo per architecture
        self._bases: dict = {}
        self._models: dict = {}
        self._scores: dict = {}

    def cnn(self, depth: int = 4, seed: int = 0, finetune_seed: int | None = None, baseline: Baseline | None = None):
        """(base, fine-tuned) CNN; the defaults give the campaign's standard model."""
        baseline = baseline or self.zero
        finetune_seed = seed + 1 if finetune_seed is None else finetune_seed
        key = ("cnn", depth, seed, finetune_seed, baseline.label)
        if key not in self._models:
            cfg = campaign.resolve_config(
                self.cfg, [f"models.0.model.depth={depth}", f"models.0.train.seed={seed}"]
            )
            start = time.perf_counter()
            pm = campaign.prepare_models(
                cfg, self.train_set, grid=self.grid, baseline=baseline, finetune_seed=finetune_seed,
                bases=self._bases.setdefault((depth, seed), {}),
            )[0]
            self.timings[str(key)] = time.perf_counter() - start
            self._models[key] = (pm.base, pm.finetuned)
        return self._models[key]

    def bagnet(self):
        """(base, fine-tuned) bagnet_local with one local-logit cell per grid patch."""
        if "bagnet" not in self._models:
            _, h, w = self.train_set.image_shape
            mc = ModelConfig("bagnet_local", depth=2, use_batchnorm=True, input_shape=(3, h, w), patch_size=h // self.grid.side)
            base = train(mc, TrainConfig(epochs=10, lr=0.05, lr_decay_every=7), self.train_set).model
            ft = finetune_in_domain(
                base, TrainConfig(epochs=4, lr=0.01, lr_decay_every=100, seed=1), self.train_set, self.grid, self.zero
            ).model
            self._models["bagnet"] = (base, ft)
        return self._models["bagnet"]

    def roster_reports(self, model_key: tuple, model, images: int, baseline: Baseline | None = None):
        """IDSDS reports of the full method roster on the first ``images`` evaluation images."""
        baseline = baseline or self.zero
        key = (model_key, images, baseline.label)
        if key not in self._scores:
            self._scores[key] = protocols.single_deletion_scores(
                model, self.eval_all.head(images), PAPER_ROSTER, self.grid, baseline
            )
        return self._scores[key]


@pytest.fixture(scope="session")
def desk():
    return Desk()
