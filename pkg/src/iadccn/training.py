"""Losses, Adam, hard sample mining and the training loop."""

import csv
import dataclasses
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from . import data as D
from . import tensor as T
from .errors import ConfigurationError, DataError, GraphError
from .metrics import count_from_density, mae
from .model import CrowdCounter, IADCCNConfig, forward

logger = logging.getLogger(__name__)

LOG_CLAMP = 1e-12


@dataclass
class TrainConfig:
    lr: float = 5e-5
    beta1: float = 0.9
    beta2: float = 0.999
    eps_adam: float = 1e-8
    lambda_s: float = 0.1
    epochs: int = 10
    batch_size: int = 1
    hsm_enabled: bool = False
    hsm_interval: int = 5
    hsm_bins: int = 50
    hsm_min_fraction: float = 0.1
    val_fraction: float = 0.1
    seed: int = 0
    patch_size: int = 224
    patches_per_image: int = 9
    noise_amp: float = 0.01
    sigma: float = 4.0
    mask_threshold: float = 1e-3
    squared_l2: bool = False
    precision: int = 32

    def __post_init__(self):
        if not self.lr > 0:
            raise ConfigurationError(f"lr must be positive, got {self.lr}")
        if self.lambda_s < 0:
            raise ConfigurationError("lambda_s must be >= 0")
        if self.hsm_interval < 1:
            raise ConfigurationError("hsm_interval must be >= 1")
        if not 0 < self.hsm_min_fraction <= 1:
            raise ConfigurationError("hsm_min_fraction must lie in (0, 1]")
        if not 0 <= self.val_fraction < 1:
            raise ConfigurationError("val_fraction must lie in [0, 1)")
        if self.patch_size % 16:
            raise ConfigurationError(f"patch_size must be a multiple of 16, got {self.patch_size}")
        if self.epochs < 0 or self.batch_size < 1 or self.patches_per_image < 1:
            raise ConfigurationError("epochs >= 0, batch_size >= 1, patches_per_image >= 1 required")
        if self.precision not in (32, 64):
            raise ConfigurationError("precision must be 32 or 64")

    @property
    def density_config(self):
        return D.DensityConfig(sigma=self.sigma, mask_threshold=self.mask_threshold)


@dataclass
class TrainState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: int = 0
    epoch: int = 0
    active_indices: np.ndarray = None
    rng: np.random.Generator = None


# ---------------------------------------------------------------------------
# losses


def _as_array(x):
    return x.data if isinstance(x, T.Tensor) else np.asarray(x, dtype=T.get_dtype())


def density_loss(pred, gt, squared=False):
    """Batch mean of the per-sample Euclidean distance between density maps.

    With ``squared=True`` the per-sample term is the squared distance.  The
    gradient of the plain norm at ``pred == gt`` is taken as zero.
    """
    gt = _as_array(gt)
    if pred.shape != gt.shape:
        raise ConfigurationError(f"density_loss shape mismatch: {pred.shape} vs {gt.shape}")
    n = pred.shape[0]
    diff = pred.data - gt
    sq = (diff.reshape(n, -1) ** 2).sum(axis=1)
    if squared:
        value = sq.mean()
        scale = np.full(n, 2.0 / n)
    else:
        norms = np.sqrt(sq)
        value = norms.mean()
        safe = np.where(norms > 0, norms, 1.0)
        scale = np.where(norms > 0, 1.0 / (n * safe), 0.0)
    scale = scale.astype(diff.dtype).reshape((n,) + (1,) * (diff.ndim - 1))

    def backward(g):
        return (g * scale * diff,)

    return T.custom_op(np.asarray(value, dtype=diff.dtype), (pred,), backward, "density_loss")


def seg_loss(prob, target):
    """Mean pixel-wise binary cross-entropy; log arguments clamped at 1e-12."""
    target = _as_array(target)
    if prob.shape != target.shape:
        raise ConfigurationError(f"seg_loss shape mismatch: {prob.shape} vs {target.shape}")
    p = prob.data
    q = 1.0 - p
    lp = np.log(np.maximum(p, LOG_CLAMP))
    lq = np.log(np.maximum(q, LOG_CLAMP))
    value = -(target * lp + (1.0 - target) * lq).mean()
    n = p.size

    def backward(g):
        dp = np.where(p > LOG_CLAMP, -target / np.where(p > LOG_CLAMP, p, 1.0), 0.0)
        dq = np.where(q > LOG_CLAMP, (1.0 - target) / np.where(q > LOG_CLAMP, q, 1.0), 0.0)
        return ((g / n) * (dp + dq),)

    return T.custom_op(np.asarray(value, dtype=p.dtype), (prob,), backward, "seg_loss")


def total_loss(l_d, l_s=None, lambda_s=0.1):
    """Density loss plus the weighted segmentation loss (if any)."""
    if l_s is None or lambda_s == 0:
        return l_d
    if isinstance(l_d, T.Tensor) or isinstance(l_s, T.Tensor):
        return T.add(l_d, T.mul(l_s, lambda_s))
    return l_d + lambda_s * l_s


# ---------------------------------------------------------------------------
# optimiser


def adam_step(params, state, cfg):
    """One bias-corrected Adam update of every parameter, in place."""
    for name, p in params.items():
        if p.grad is None:
            raise GraphError(f"adam_step: parameter {name} has no gradient")
    state.t += 1
    b1, b2 = cfg.beta1, cfg.beta2
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for name, p in params.items():
        g = p.grad
        if name not in state.m:
            state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        step = cfg.lr * (m / c1) / (np.sqrt(v / c2) + cfg.eps_adam)
        p.data -= step.astype(p.data.dtype, copy=False)


def zero_grads(params):
    for p in params.values():
        p.grad = None


# ---------------------------------------------------------------------------
# hard sample mining


def error_mode(errors, bins=50):
    """Threshold T at the mode of the error histogram: the upper edge of the
    most populated of ``bins`` equal-width bins over [0, max]; ties go low.

    Samples inside the modal bin are typical, not hard, so T sits at the
    bin's upper edge.  All-equal errors form a single bin ending at the
    common value.
    """
    e = np.asarray(errors, dtype=np.float64)
    if e.size == 0:
        raise ConfigurationError("hard sample mining needs at least one error value")
    if np.any(e < 0):
        raise ConfigurationError("errors must be non-negative")
    if bins < 1:
        raise ConfigurationError("bins must be >= 1")
    top = e.max()
    if np.all(e == e[0]):
        return float(e[0])
    edges = np.linspace(0.0, top, bins + 1)
    idx = np.clip(np.searchsorted(edges, e, side="right") - 1, 0, bins - 1)
    counts = np.bincount(idx, minlength=bins)
    return float(edges[int(np.argmax(counts)) + 1])


def hard_sample_mine(errors, bins=50, min_fraction=0.1):
    """Indices whose error exceeds the histogram mode; all indices if too few."""
    e = np.asarray(errors, dtype=np.float64)
    mode = error_mode(e, bins)
    chosen = np.flatnonzero(e > mode)
    if len(chosen) < min_fraction * e.size:
        return np.arange(e.size)
    return chosen


# ---------------------------------------------------------------------------
# config files


def parse_config_file(path):
    """Flat ``key = value`` lines, ``#`` starts a comment."""
    values = {}
    with open(path) as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigurationError(f"{path}:{lineno}: expected key=value, got {raw.strip()!r}")
            key, value = (s.strip() for s in line.split("=", 1))
            values[key] = value
    return values


def _coerce(value, template, key):
    if not isinstance(value, str):
        return value
    try:
        if isinstance(template, bool):
            low = value.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(value)
            return low in ("true", "1", "yes")
        if isinstance(template, int):
            return int(value)
        if isinstance(template, float):
            return float(value)
        if isinstance(template, list):
            return [int(v) for v in value.replace(" ", "").split(",") if v]
    except ValueError as exc:
        raise ConfigurationError(f"bad value for {key}: {value!r}") from exc
    return value


def build_configs(values, model_cfg=None, train_cfg=None):
    """Apply a flat dict of overrides to a model and a training config."""
    model_cfg = model_cfg or IADCCNConfig()
    train_cfg = train_cfg or TrainConfig()
    m_fields = {f.name for f in dataclasses.fields(IADCCNConfig)}
    t_fields = {f.name for f in dataclasses.fields(TrainConfig)}
    m_over, t_over = {}, {}
    for key, value in values.items():
        if key in t_fields:
            t_over[key] = _coerce(value, getattr(train_cfg, key), key)
        elif key in m_fields:
            m_over[key] = _coerce(value, getattr(model_cfg, key), key)
        else:
            raise ConfigurationError(f"unknown config key {key!r}")
    return dataclasses.replace(model_cfg, **m_over), dataclasses.replace(train_cfg, **t_over)


def config_snapshot(model_cfg, train_cfg):
    return {"model": dataclasses.asdict(model_cfg), "train": dataclasses.asdict(train_cfg)}


# ---------------------------------------------------------------------------
# training loop


@dataclass
class SampleSet:
    images: np.ndarray  # S x C x P x P
    density: np.ndarray  # S x 1 x p x p
    background: np.ndarray  # S x 1 x p x p, 1 = background
    counts: np.ndarray  # S
    ids: list

    def __len__(self):
        return len(self.counts)


def split_dataset(dataset, val_fraction, rng):
    n = len(dataset)
    perm = rng.permutation(n)
    n_val = int(round(val_fraction * n))
    val = [dataset[i] for i in sorted(perm[:n_val])]
    train = [dataset[i] for i in sorted(perm[n_val:])]
    return train, val


def build_samples(images, cfg, model_cfg, rng):
    """Patch, augment and attach output-resolution ground truth."""
    stride = model_cfg.output_stride
    dcfg = cfg.density_config
    xs, ds, bs, counts, ids = [], [], [], [], []
    for img in images:
        for patch in D.sample_patches(img, cfg.patches_per_image, cfg.patch_size, rng):
            patch = D.augment(patch, rng, cfg.noise_amp)
            dens, background = D.ground_truth(patch.points, patch.height, patch.width, dcfg, stride)
            xs.append(patch.pixels.transpose(2, 0, 1))
            ds.append(dens[None])
            bs.append(background[None])
            counts.append(patch.count)
            ids.append(patch.id)
    return SampleSet(np.array(xs), np.array(ds), np.array(bs), np.array(counts, dtype=np.float64), ids)


def predict_counts(params, model_cfg, images, batch_size=8):
    """Counts for a stack of N x C x H x W inputs, no graph recorded."""
    out = []
    with T.no_grad():
        for i in range(0, len(images), batch_size):
            dens = forward(params, model_cfg, T.Tensor(images[i:i + batch_size]))["density"].data
            out.extend(count_from_density(d) for d in dens)
    return np.array(out)


def _step_losses(params, model_cfg, cfg, x, dens, background):
    out = forward(params, model_cfg, T.Tensor(x))
    l_d = density_loss(out["density"], dens, squared=cfg.squared_l2)
    l_s = None
    if "a_inv" in out:
        l_s = seg_loss(out["a_inv"], background)
    if "seg_logits" in out:
        extra = seg_loss(T.sigmoid(out["seg_logits"]), background)
        l_s = extra if l_s is None else T.add(l_s, extra)
    return out, l_d, l_s


def train(model, dataset, cfg, callbacks=()):
    """Train ``model`` (a :class:`CrowdCounter`) in place.

    Returns ``(state, history)`` where history holds one dict per epoch with
    keys epoch, train_mae, val_mae, L_d, L_s, active_set_size.
    """
    if not dataset:
        raise DataError("cannot train on an empty dataset")
    model_cfg, params = model.config, model.params
    rng = np.random.default_rng(cfg.seed)
    train_imgs, val_imgs = split_dataset(dataset, cfg.val_fraction, rng)
    if len(train_imgs) < 2:
        raise DataError(f"need at least 2 training images after the split, got {len(train_imgs)}")

    with T.precision(cfg.precision):
        dtype = T.get_dtype()
        for p in params.values():
            p.data = np.ascontiguousarray(p.data, dtype=dtype)
            p.requires_grad = True
            p.grad = None
        samples = build_samples(train_imgs, cfg, model_cfg, rng)
        samples.images = samples.images.astype(dtype)
        samples.density = samples.density.astype(dtype)
        samples.background = samples.background.astype(dtype)
        logger.info("training on %d patches from %d images, %d validation images",
                    len(samples), len(train_imgs), len(val_imgs))

        state = TrainState(active_indices=np.arange(len(samples)), rng=rng)
        history = []
        for epoch in range(1, cfg.epochs + 1):
            state.epoch = epoch
            order = rng.permutation(state.active_indices)
            sum_ld = sum_ls = 0.0
            n_steps = 0
            abs_err = []
            for start in range(0, len(order), cfg.batch_size):
                idx = np.sort(order[start:start + cfg.batch_size])
                out, l_d, l_s = _step_losses(
                    params, model_cfg, cfg, samples.images[idx], samples.density[idx], samples.background[idx]
                )
                loss = total_loss(l_d, l_s, cfg.lambda_s)
                zero_grads(params)
                loss.backward()
                for p in params.values():
                    if p.grad is None:
                        p.grad = np.zeros_like(p.data)
                adam_step(params, state, cfg)
                sum_ld += l_d.item()
                sum_ls += 0.0 if l_s is None else l_s.item()
                n_steps += 1
                for j, d in zip(idx, out["density"].data):
                    abs_err.append(abs(count_from_density(d) - samples.counts[j]))
            zero_grads(params)

            if val_imgs:
                counter = CrowdCounter(model_cfg, params)
                val_mae = mae([im.count for im in val_imgs], [count_from_density(counter.predict(im.pixels)) for im in val_imgs])
            else:
                val_mae = math.nan
            row = {
                "epoch": epoch,
                "train_mae": float(np.mean(abs_err)),
                "val_mae": val_mae,
                "L_d": sum_ld / n_steps,
                "L_s": sum_ls / n_steps,
                "active_set_size": len(state.active_indices),
            }
            history.append(row)
            logger.info("epoch %d: %s", epoch, row)

            if cfg.hsm_enabled and epoch % cfg.hsm_interval == 0 and epoch < cfg.epochs:
                errors = np.abs(predict_counts(params, model_cfg, samples.images) - samples.counts)
                state.active_indices = hard_sample_mine(errors, cfg.hsm_bins, cfg.hsm_min_fraction)
                logger.info("hard sample mining kept %d of %d samples", len(state.active_indices), len(samples))
            for cb in callbacks:
                cb(epoch, row, state)
    return state, history


HISTORY_COLUMNS = ["epoch", "train_mae", "val_mae", "L_d", "L_s", "active_set_size"]


def write_history_csv(history, path):
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=HISTORY_COLUMNS, lineterminator="\n")
        writer.writeheader()
        for row in history:
            writer.writerow({k: (f"{row[k]:.9g}" if isinstance(row[k], float) else row[k]) for k in HISTORY_COLUMNS})
