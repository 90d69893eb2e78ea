"""Count evaluation and the four-configuration ablation harness."""

import copy
import csv
import dataclasses
import json
import logging
import time
from collections import defaultdict
from dataclasses import dataclass, field

import numpy as np

from .metrics import count_from_density, mae, mse
from .model import CrowdCounter, init_params
from .training import split_dataset, train

logger = logging.getLogger(__name__)

__all__ = [
    "ABLATIONS",
    "EvalReport",
    "count_from_density",
    "evaluate",
    "improvement",
    "mae",
    "mse",
    "run_ablation",
    "write_ablation_csv",
]


@dataclass
class SampleResult:
    id: str
    y: float
    y_hat: float
    abs_err: float
    ms: float
    height: int
    width: int


@dataclass
class EvalReport:
    samples: list = field(default_factory=list)
    mae: float = float("nan")
    mse: float = float("nan")

    @property
    def n(self):
        return len(self.samples)

    @property
    def ms_per_image(self):
        return float(np.mean([s.ms for s in self.samples])) if self.samples else float("nan")

    def ms_by_resolution(self):
        groups = defaultdict(list)
        for s in self.samples:
            groups[f"{s.height}x{s.width}"].append(s.ms)
        return {k: float(np.mean(v)) for k, v in sorted(groups.items())}

    def summary(self):
        return {
            "mae": self.mae,
            "mse": self.mse,
            "n": self.n,
            "ms_per_image": self.ms_per_image,
            "ms_by_resolution": self.ms_by_resolution(),
        }

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["id", "y", "y_hat", "abs_err"])
            for s in self.samples:
                w.writerow([s.id, f"{s.y:.9g}", f"{s.y_hat:.9g}", f"{s.abs_err:.9g}"])

    def write_json(self, path):
        with open(path, "w") as fh:
            json.dump(self.summary(), fh, indent=2, sort_keys=True)
            fh.write("\n")


def evaluate(model, dataset):
    """Whole-image inference on every image; ``model`` needs ``predict(pixels)``."""
    report = EvalReport()
    for img in dataset:
        t0 = time.perf_counter()
        density = model.predict(img.pixels)
        ms = (time.perf_counter() - t0) * 1000.0
        y_hat = count_from_density(density)
        y = float(img.count)
        report.samples.append(SampleResult(img.id, y, y_hat, abs(y - y_hat), ms, img.height, img.width))
    if report.samples:
        ys = [s.y for s in report.samples]
        yh = [s.y_hat for s in report.samples]
        report.mae = mae(ys, yh)
        report.mse = mse(ys, yh)
    return report


# name, CLI key, model overrides, train overrides
ABLATIONS = [
    ("Base network", "base", {"seg_head_enabled": False, "iab_enabled": False}, {"hsm_enabled": False}),
    ("Base network+S", "s", {"seg_head_enabled": True, "iab_enabled": False}, {"hsm_enabled": False}),
    ("Base network+IAB", "iab", {"seg_head_enabled": False, "iab_enabled": True}, {"hsm_enabled": False}),
    ("Base network+IAB+HSM", "iab_hsm", {"seg_head_enabled": False, "iab_enabled": True}, {"hsm_enabled": True}),
]


def ablation_configs(key, model_cfg, train_cfg):
    for _, k, m_over, t_over in ABLATIONS:
        if k == key:
            return dataclasses.replace(model_cfg, **m_over), dataclasses.replace(train_cfg, **t_over)
    raise KeyError(key)


def improvement(prev, cur):
    """Percentage reduction in error relative to the previous row."""
    if prev is None or prev == 0:
        return None
    return (prev - cur) / prev * 100.0


@dataclass
class AblationRow:
    config: str
    key: str
    report: EvalReport
    history: list
    mae_gain: float = None
    mse_gain: float = None


def run_ablation(dataset, base_cfg, train_cfg, seed, test_fraction=0.2):
    """Train and evaluate the four configurations on one shared split.

    Every row uses the same seed, the same training images and the same
    held-out test images; only the IAB / segmentation-head / HSM flags vary.
    """
    rng = np.random.default_rng(seed)
    train_imgs, test_imgs = split_dataset(dataset, test_fraction, rng)
    rows = []
    for name, key, _, _ in ABLATIONS:
        m_cfg, t_cfg = ablation_configs(key, base_cfg, dataclasses.replace(train_cfg, seed=seed))
        model = CrowdCounter(m_cfg, init_params(m_cfg, seed))
        t0 = time.perf_counter()
        _, history = train(model, copy.copy(train_imgs), t_cfg)
        report = evaluate(model, test_imgs)
        logger.info("%s: MAE %.4f MSE %.4f (%.1f s)", name, report.mae, report.mse, time.perf_counter() - t0)
        row = AblationRow(name, key, report, history)
        if rows:
            row.mae_gain = improvement(rows[-1].report.mae, report.mae)
            row.mse_gain = improvement(rows[-1].report.mse, report.mse)
        rows.append(row)
    return rows


def _pct(v):
    return "" if v is None else f"{v:.1f}"


def write_ablation_csv(rows, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["config", "MAE", "MSE", "MAE_improvement_pct", "MSE_improvement_pct"])
        for r in rows:
            w.writerow([r.config, f"{r.report.mae:.4f}", f"{r.report.mse:.4f}", _pct(r.mae_gain), _pct(r.mse_gain)])
