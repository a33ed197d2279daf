"""Small experiments shared by ``scripts/`` and the acceptance tests."""

from __future__ import annotations

import time
from dataclasses import dataclass, field, replace

import numpy as np

from .data import Dependency, SynthConfig, normalize_dataset, synth_generate, train_norm_stats
from .metrics import EvalReport, frame_scores
from .model import ModelConfig, SEDModel
from .optim import TrainConfig, train


def evaluate_items(model: SEDModel, items, threshold: float = 0.5) -> EvalReport:
    x = np.stack([it.features for it in items])
    y = np.stack([it.labels for it in items])
    m = np.stack([it.mask for it in items])
    return frame_scores(model.predict(x), y, threshold, m)


# --- overfit smoke -------------------------------------------------------------

SMOKE_DATA = SynthConfig(num_classes=4, n_features=40, seq_len=64, n_train=8,
                         dependencies=[Dependency(0, 1, 10)])
SMOKE_MODEL = ModelConfig(n_features=40, num_classes=4, channels=[16] * 3, kernel=(3, 3),
                          dilation=2, out_channels=8)


@dataclass
class SmokeResult:
    seed: int
    f1: float
    er: float
    best_epoch: int
    seconds: float


def overfit_smoke(seed: int, max_epochs: int = 500, data: SynthConfig = SMOKE_DATA,
                  model_cfg: ModelConfig = SMOKE_MODEL) -> SmokeResult:
    """Fit the tiny synthetic training set and score on that same set."""
    t0 = time.perf_counter()
    ds = synth_generate(data, seed)
    ds = normalize_dataset(ds, train_norm_stats(ds))
    items = ds.split("train")
    model = SEDModel(model_cfg, seed)
    # selection on training loss; patience spans the whole budget
    res = train(model, items, items, TrainConfig(max_epochs=max_epochs, patience=max_epochs, seed=seed))
    model.load_state_dict(res.best_state)
    r = evaluate_items(model, items)
    return SmokeResult(seed, r.f1, r.er, res.best_epoch, time.perf_counter() - t0)


# --- conditioning trend ---------------------------------------------------------

def trend_data(n_train: int = 500, seq_len: int = 256, n_val: int | None = None,
               n_test: int | None = None) -> SynthConfig:
    """Eight classes; classes 4..7 only start right after 0..3 end, and each
    shares its spectral template with an unrelated root class, so the
    features alone cannot tell a child from its look-alike."""
    n_val = n_train // 5 if n_val is None else n_val
    n_test = n_train // 5 if n_test is None else n_test
    deps = [Dependency(p, p + 4, max_gap=3, prob=0.9) for p in range(4)]
    return SynthConfig(num_classes=8, n_features=40, seq_len=seq_len, n_train=n_train, n_val=n_val,
                       n_test=n_test, dependencies=deps, events_per_class=seq_len / 64,
                       shared_templates={4: 1, 5: 2, 6: 3, 7: 0}, noise_db=3.0)


@dataclass
class TrendSettings:
    data: SynthConfig = field(default_factory=trend_data)
    model: ModelConfig = field(default_factory=lambda: ModelConfig(
        n_features=40, num_classes=8, channels=[16] * 3, kernel=(3, 3), dilation=10, out_channels=16))
    train: TrainConfig = field(default_factory=lambda: TrainConfig(max_epochs=100, patience=10))
    seeds: tuple[int, ...] = (0, 1, 2, 3, 4)


def trend_run(settings: TrendSettings, seed: int, conditioning: bool, data_seed: int = 0) -> dict:
    ds = synth_generate(settings.data, data_seed)
    ds = normalize_dataset(ds, train_norm_stats(ds))
    cfg = replace(settings.model, conditioning=conditioning)
    model = SEDModel(cfg, seed)
    t0 = time.perf_counter()
    res = train(model, ds.split("train"), ds.split("val"), replace(settings.train, seed=seed))
    model.load_state_dict(res.best_state)
    r = evaluate_items(model, ds.split("test"))
    return {"seed": seed, "conditioning": conditioning, "f1": r.f1, "er": r.er,
            "best_epoch": res.best_epoch, "seconds": time.perf_counter() - t0}


def trend_summary(runs: list[dict]) -> dict:
    def med(cond, key):
        return float(np.median([r[key] for r in runs if r["conditioning"] == cond]))

    out = {"cdcnn_f1": med(True, "f1"), "dcnn_f1": med(False, "f1"),
           "cdcnn_er": med(True, "er"), "dcnn_er": med(False, "er")}
    out["delta_f1"] = out["cdcnn_f1"] - out["dcnn_f1"]
    out["delta_er"] = out["cdcnn_er"] - out["dcnn_er"]
    out["holds"] = out["cdcnn_f1"] >= out["dcnn_f1"] - 0.01
    return out
