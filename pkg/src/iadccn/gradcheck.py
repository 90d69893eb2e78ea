"""Finite-difference checks for every differentiable op and the full model.

Used by ``iadccn gradcheck`` and by the test suite.  All checks run in
64-bit precision on seeded inputs.
"""

import time
from dataclasses import dataclass

import numpy as np

from . import data as D
from . import tensor as T
from .model import IADCCNConfig, forward, iab_forward, init_params
from .training import density_loss, seg_loss, total_loss

OP_TOL = 1e-4
MODEL_TOL = 1e-3

# small enough that every coordinate of every parameter is probed
GRADCHECK_CONFIG = IADCCNConfig(
    in_channels=3,
    block_channels=[2, 3, 4, 4, 4],
    block_depths=[1, 1, 1, 1, 1],
    dru_channels=4,
    iab_hidden=3,
    iab_enabled=True,
)


@dataclass
class CheckResult:
    name: str
    error: float
    tol: float
    seconds: float

    @property
    def passed(self):
        return self.error <= self.tol


def _away_from_zero(rng, shape, margin=0.1):
    v = rng.uniform(margin, 1.0, size=shape)
    return v * rng.choice([-1.0, 1.0], size=shape)


def _distinct(rng, shape):
    # a shuffled grid keeps every pair of values at least 0.05 apart
    n = int(np.prod(shape))
    return rng.permutation(np.arange(n) * 0.05 - n * 0.025).reshape(shape)


def op_cases(seed=0):
    """(name, f, inputs) triples covering each op on random data."""
    rng = np.random.default_rng(seed)

    def t(a):
        return T.Tensor(a, requires_grad=True)

    def weights(shape):
        return T.Tensor(rng.normal(size=shape))

    cases = []
    w_conv = weights((2, 3, 5, 5))
    cases.append((
        "conv2d",
        lambda x, w, b: T.reduce_sum(T.mul(T.conv2d(x, w, b, stride=1, pad=1), w_conv)),
        [t(rng.normal(size=(2, 2, 5, 5))), t(rng.normal(size=(3, 2, 3, 3))), t(rng.normal(size=3))],
    ))
    w_s2 = weights((1, 2, 4, 4))
    cases.append((
        "conv2d_stride2",
        lambda x, w, b: T.reduce_sum(T.mul(T.conv2d(x, w, b, stride=2, pad=1), w_s2)),
        [t(rng.normal(size=(1, 3, 7, 7))), t(rng.normal(size=(2, 3, 3, 3))), t(rng.normal(size=2))],
    ))
    w_relu = weights((2, 3, 4, 4))
    cases.append((
        "relu",
        lambda x: T.reduce_sum(T.mul(T.relu(x), w_relu)),
        [t(_away_from_zero(rng, (2, 3, 4, 4)))],
    ))
    w_sig = weights((1, 2, 3, 3))
    cases.append((
        "sigmoid",
        lambda x: T.reduce_sum(T.mul(T.sigmoid(x), w_sig)),
        [t(rng.normal(scale=3.0, size=(1, 2, 3, 3)))],
    ))
    w_pool = weights((2, 2, 3, 3))
    cases.append((
        "maxpool2d",
        lambda x: T.reduce_sum(T.mul(T.maxpool2d(x), w_pool)),
        [t(_distinct(rng, (2, 2, 6, 6)))],
    ))
    w_up = weights((1, 2, 12, 8))
    cases.append((
        "upsample_bilinear",
        lambda x: T.reduce_sum(T.mul(T.upsample_bilinear(x, 4), w_up)),
        [t(rng.normal(size=(1, 2, 3, 2)))],
    ))
    w_ew = weights((2, 3, 4, 4))
    for kind in ("add", "sub", "mul"):
        cases.append((
            f"elementwise_{kind}",
            lambda a, b, kind=kind: T.reduce_sum(T.mul(T.elementwise(a, b, kind), w_ew)),
            [t(rng.normal(size=(2, 3, 4, 4))), t(rng.normal(size=(2, 3, 4, 4)))],
        ))
        cases.append((
            f"elementwise_{kind}_broadcast",
            lambda a, b, kind=kind: T.reduce_sum(T.mul(T.elementwise(a, b, kind), w_ew)),
            [t(rng.normal(size=(2, 3, 4, 4))), t(rng.normal(size=(2, 1, 4, 4)))],
        ))
    cases.append(("reduce_sum", lambda x: T.reduce_sum(T.mul(x, x)), [t(rng.normal(size=(3, 4)))]))
    cases.append(("reduce_mean", lambda x: T.reduce_mean(T.mul(x, x)), [t(rng.normal(size=(3, 4)))]))
    w_crop = weights((1, 2, 3, 2))
    cases.append((
        "crop",
        lambda x: T.reduce_sum(T.mul(T.crop(x, 3, 2), w_crop)),
        [t(rng.normal(size=(1, 2, 4, 4)))],
    ))
    gt = rng.uniform(size=(2, 1, 4, 4))
    cases.append(("density_loss", lambda p: density_loss(p, gt), [t(rng.normal(size=(2, 1, 4, 4)))]))
    cases.append((
        "density_loss_squared",
        lambda p: density_loss(p, gt, squared=True),
        [t(rng.normal(size=(2, 1, 4, 4)))],
    ))
    target = (rng.uniform(size=(2, 1, 4, 4)) > 0.5).astype(float)
    cases.append(("seg_loss", lambda p: seg_loss(p, target), [t(rng.uniform(0.05, 0.95, size=(2, 1, 4, 4)))]))
    return cases


def iab_case(seed=0):
    """Composite inverse-attention subgraph: CB_A, sigmoid, F - F * A_inv."""
    rng = np.random.default_rng(seed)
    c, hidden = 4, 3
    shapes = [(hidden, c, 1, 1), (hidden,), (hidden, hidden, 3, 3), (hidden,), (1, hidden, 3, 3), (1,)]
    names = ["iab.conv1.weight", "iab.conv1.bias", "iab.conv2.weight", "iab.conv2.bias",
             "iab.conv3.weight", "iab.conv3.bias"]
    w_out = T.Tensor(rng.normal(size=(1, c, 6, 6)))

    def f(feat, *ws):
        params = dict(zip(names, ws))
        attended, a_inv = iab_forward(params, feat)
        return T.add(T.reduce_sum(T.mul(attended, w_out)), T.reduce_sum(a_inv))

    inputs = [T.Tensor(rng.normal(size=(1, c, 6, 6)), requires_grad=True)]
    inputs += [T.Tensor(rng.normal(scale=0.5, size=s), requires_grad=True) for s in shapes]
    return "iab_subgraph", f, inputs


def run_op_checks(seed=0, eps=1e-5):
    results = []
    with T.precision(64):
        for name, f, inputs in op_cases(seed) + [iab_case(seed)]:
            t0 = time.perf_counter()
            err = T.grad_check(f, inputs, eps=eps)
            results.append(CheckResult(name, err, OP_TOL, time.perf_counter() - t0))
    return results


def model_loss_fn(config, names, x, dens, background, lambda_s=0.1):
    """Scalar density + segmentation loss as a function of the named parameter tensors."""
    names = list(names)

    def f(*tensors):
        params = dict(zip(names, tensors))
        out = forward(params, config, x)
        l_s = None
        if "a_inv" in out:
            l_s = seg_loss(out["a_inv"], background)
        if "seg_logits" in out:
            extra = seg_loss(T.sigmoid(out["seg_logits"]), background)
            l_s = extra if l_s is None else T.add(l_s, extra)
        return total_loss(density_loss(out["density"], dens), l_s, lambda_s)

    return f


def run_model_check(seed=0, size=32, config=GRADCHECK_CONFIG, eps=1e-5, max_coords=None):
    """End-to-end gradient of density + segmentation loss w.r.t. every parameter."""
    with T.precision(64):
        rng = np.random.default_rng(seed)
        params = init_params(config, seed, scheme="he")
        # zero biases put pre-activations exactly on the relu kink
        for name, p in params.items():
            if name.endswith(".bias"):
                p.data[...] = rng.normal(scale=0.1, size=p.shape)
        x = T.Tensor(rng.uniform(size=(1, config.in_channels, size, size)))
        pts = rng.uniform(0, size - 1, size=(6, 2))
        dens, background = D.ground_truth(pts, size, size, D.DensityConfig(sigma=2.0), config.output_stride)
        f = model_loss_fn(config, params.keys(), x, dens[None, None], background[None, None])
        t0 = time.perf_counter()
        err = T.grad_check(f, list(params.values()), eps=eps, max_coords=max_coords, rng=rng)
        return CheckResult("model_total_loss", err, MODEL_TOL, time.perf_counter() - t0)
