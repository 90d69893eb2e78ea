"""Crowd-counting network: forward pass and weight-file persistence.

    backbone (5 VGG-style conv blocks, stride 16)
      -> DRU (1x1 conv to ``dru_channels`` + relu, bilinear upsample)
      -> IAB (optional; F' = F - F * sigmoid(CB_A(F)))
      -> density module (two 3x3 conv+relu layers, one linear 3x3 conv)

Parameters are a plain ``dict`` of name -> Tensor.  Each tensor is drawn
from an RNG derived from ``(seed, name)`` so layers shared by two configs
start from the same values.
"""

import math
import struct
import zlib
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import ConfigurationError, DimensionError, InventoryError, ParseError

WEIGHT_MAGIC = b"IAWT"
WEIGHT_VERSION = 1
INPUT_MULTIPLE = 16
HEAD_INIT_STD = 0.01


@dataclass
class IADCCNConfig:
    in_channels: int = 3
    block_channels: list = field(default_factory=lambda: [8, 16, 32, 64, 64])
    block_depths: list = field(default_factory=lambda: [1, 1, 2, 2, 2])
    dru_channels: int = 64
    iab_enabled: bool = True
    iab_hidden: int = 32
    seg_head_enabled: bool = False
    upsample_factor: int = 4

    def __post_init__(self):
        self.block_channels = [int(c) for c in self.block_channels]
        self.block_depths = [int(d) for d in self.block_depths]
        if len(self.block_channels) != 5 or len(self.block_depths) != 5:
            raise ConfigurationError("block_channels and block_depths need 5 entries each")
        if self.in_channels not in (1, 3):
            raise ConfigurationError(f"in_channels must be 1 or 3, got {self.in_channels}")
        counts = self.block_channels + [self.dru_channels, self.iab_hidden]
        if min(counts) < 1 or min(self.block_depths) < 1:
            raise ConfigurationError("channel counts and block depths must be >= 1")
        if self.upsample_factor not in (1, 2, 4):
            raise ConfigurationError(f"upsample_factor must be 1, 2 or 4, got {self.upsample_factor}")

    @classmethod
    def vgg16(cls, **kw):
        return cls(block_channels=[64, 128, 256, 512, 512], block_depths=[2, 2, 3, 3, 3], **kw)

    @property
    def output_stride(self):
        return INPUT_MULTIPLE // self.upsample_factor


def _conv_entries(prefix, cin, cout, k):
    return [(f"{prefix}.weight", (cout, cin, k, k)), (f"{prefix}.bias", (cout,))]


def _attention_head(prefix, cin, hidden):
    return (
        _conv_entries(f"{prefix}.conv1", cin, hidden, 1)
        + _conv_entries(f"{prefix}.conv2", hidden, hidden, 3)
        + _conv_entries(f"{prefix}.conv3", hidden, 1, 3)
    )


def param_inventory(config):
    """Ordered ``(name, shape)`` list implied by ``config``."""
    entries = []
    cin = config.in_channels
    for b, (cout, depth) in enumerate(zip(config.block_channels, config.block_depths), start=1):
        for d in range(1, depth + 1):
            entries += _conv_entries(f"backbone.block{b}.conv{d}", cin, cout, 3)
            cin = cout
    c = config.dru_channels
    entries += _conv_entries("dru.conv", cin, c, 1)
    if config.iab_enabled:
        entries += _attention_head("iab", c, config.iab_hidden)
    if config.seg_head_enabled:
        entries += _attention_head("seg_head", c, config.iab_hidden)
    entries += _conv_entries("density.conv1", c, c, 3)
    entries += _conv_entries("density.conv2", c, c, 3)
    entries += _conv_entries("density.conv3", c, 1, 3)
    return entries


def _init_std(name, shape, scheme):
    if scheme == "he" or name.startswith(("backbone.", "dru.")):
        fan_in = shape[1] * shape[2] * shape[3]
        return math.sqrt(2.0 / fan_in)
    return HEAD_INIT_STD


def init_params(config, seed=0, scheme="default"):
    """Fresh parameters: biases 0, He-normal backbone/DRU, N(0, 0.01^2) elsewhere.

    ``scheme="he"`` uses He-normal for every layer; gradient checks use it
    to keep activations away from the relu kinks.
    """
    if scheme not in ("default", "he"):
        raise ConfigurationError(f"unknown init scheme {scheme!r}")
    params = {}
    for name, shape in param_inventory(config):
        if name.endswith(".bias"):
            params[name] = T.Tensor(np.zeros(shape), requires_grad=True)
            continue
        ss = np.random.SeedSequence([int(seed), zlib.crc32(name.encode())])
        values = np.random.default_rng(ss).normal(0.0, _init_std(name, shape, scheme), size=shape)
        params[name] = T.Tensor(values, requires_grad=True)
    return params


def _conv(params, prefix, x, pad):
    return T.conv2d(x, params[f"{prefix}.weight"], params[f"{prefix}.bias"], stride=1, pad=pad)


def backbone_forward(params, config, x):
    h, w = x.shape[2:]
    if h % INPUT_MULTIPLE or w % INPUT_MULTIPLE:
        raise ConfigurationError(f"backbone input {h}x{w} must be divisible by {INPUT_MULTIPLE}")
    for b, depth in enumerate(config.block_depths, start=1):
        for d in range(1, depth + 1):
            x = T.relu(_conv(params, f"backbone.block{b}.conv{d}", x, 1))
        if b < 5:
            x = T.maxpool2d(x)
    return x


def dru_forward(params, config, f5):
    f = T.relu(_conv(params, "dru.conv", f5, 0))
    return T.upsample_bilinear(f, config.upsample_factor)


def attention_logits(params, prefix, f):
    x = T.relu(_conv(params, f"{prefix}.conv1", f, 0))
    x = T.relu(_conv(params, f"{prefix}.conv2", x, 1))
    return _conv(params, f"{prefix}.conv3", x, 1)


def iab_forward(params, f, forced_a_inv=None):
    """Inverse attention block; returns ``(F', A_inv)``.

    ``forced_a_inv`` replaces the estimated background map (a tensor or a
    constant), which is how the bypass identities are exercised.
    """
    expected = params["iab.conv1.weight"].shape[1]
    if f.shape[1] != expected:
        raise DimensionError(f"IAB channel axis (1): expected {expected}, got {f.shape[1]}")
    if forced_a_inv is None:
        a_inv = T.sigmoid(attention_logits(params, "iab", f))
    elif isinstance(forced_a_inv, T.Tensor):
        a_inv = forced_a_inv
    else:
        n, _, h, w = f.shape
        a_inv = T.Tensor(np.full((n, 1, h, w), float(forced_a_inv)))
    return T.sub(f, T.mul(f, a_inv)), a_inv


def density_module_forward(params, f):
    x = T.relu(_conv(params, "density.conv1", f, 1))
    x = T.relu(_conv(params, "density.conv2", x, 1))
    return _conv(params, "density.conv3", x, 1)


def forward(params, config, x, forced_a_inv=None):
    """Run the network on an N x C x H x W tensor with H, W multiples of 16.

    Returns a dict with ``density`` and, depending on the config, ``a_inv``
    (background probability) and ``seg_logits`` (naive segmentation head).
    """
    f = dru_forward(params, config, backbone_forward(params, config, x))
    out = {}
    if config.seg_head_enabled:
        out["seg_logits"] = attention_logits(params, "seg_head", f)
    if config.iab_enabled:
        f, out["a_inv"] = iab_forward(params, f, forced_a_inv)
    out["density"] = density_module_forward(params, f)
    return out


def pad_to_multiple(pixels, multiple=INPUT_MULTIPLE):
    """H x W x C image -> zero-padded 1 x C x H' x W' array."""
    h, w, c = pixels.shape
    hp = -(-h // multiple) * multiple
    wp = -(-w // multiple) * multiple
    out = np.zeros((1, c, hp, wp))
    out[0, :, :h, :w] = pixels.transpose(2, 0, 1)
    return out


class CrowdCounter:
    """Inference wrapper: pads any image, runs the net, crops the output."""

    def __init__(self, config, params):
        self.config = config
        self.params = params

    def predict(self, pixels):
        """Density map of shape ceil(H/s) x ceil(W/s), s = output stride."""
        pixels = np.asarray(pixels)
        if pixels.ndim == 2:
            pixels = pixels[:, :, None]
        h, w = pixels.shape[:2]
        s = self.config.output_stride
        with T.no_grad():
            out = forward(self.params, self.config, T.Tensor(pad_to_multiple(pixels)))
        dens = T.crop(out["density"], -(-h // s), -(-w // s))
        return np.array(dens.data[0, 0], dtype=np.float64)


# ---------------------------------------------------------------------------
# weight files


def save_params(params, path):
    chunks = [WEIGHT_MAGIC, struct.pack("<II", WEIGHT_VERSION, len(params))]
    for name, t in params.items():
        raw = name.encode("utf-8")
        chunks.append(struct.pack("<H", len(raw)) + raw)
        chunks.append(struct.pack("<B", t.ndim) + struct.pack(f"<{t.ndim}I", *t.shape))
        chunks.append(np.asarray(t.data, dtype="<f4").tobytes(order="C"))
    blob = b"".join(chunks)
    with open(path, "wb") as fh:
        fh.write(blob)
    return blob


def _read(fmt, blob, pos, path):
    size = struct.calcsize(fmt)
    if pos + size > len(blob):
        raise ParseError(f"{path}: truncated weight file", offset=pos)
    return struct.unpack_from(fmt, blob, pos), pos + size


def load_params(path, config=None):
    """Read a weight file; with ``config``, require its exact inventory."""
    blob = open(path, "rb").read()
    if blob[:4] != WEIGHT_MAGIC:
        raise ParseError(f"{path}: not a weight file (bad magic)", offset=0)
    (version, count), pos = _read("<II", blob, 4, path)
    if version != WEIGHT_VERSION:
        raise ParseError(f"{path}: unsupported weight version {version}", offset=4)
    params = {}
    for _ in range(count):
        (n,), pos = _read("<H", blob, pos, path)
        if pos + n > len(blob):
            raise ParseError(f"{path}: truncated tensor name", offset=pos)
        name = blob[pos:pos + n].decode("utf-8")
        pos += n
        (ndim,), pos = _read("<B", blob, pos, path)
        shape, pos = _read(f"<{ndim}I", blob, pos, path)
        nbytes = 4 * int(np.prod(shape, dtype=np.int64))
        if pos + nbytes > len(blob):
            raise ParseError(f"{path}: truncated data for {name}", offset=pos)
        values = np.frombuffer(blob, dtype="<f4", count=nbytes // 4, offset=pos).reshape(shape)
        pos += nbytes
        params[name] = T.Tensor(values.astype(T.get_dtype()), requires_grad=True)
    if pos != len(blob):
        raise ParseError(f"{path}: {len(blob) - pos} trailing bytes", offset=pos)
    if config is not None:
        check_inventory(params, config)
    return params


def check_inventory(params, config):
    expected = dict(param_inventory(config))
    missing = [n for n in expected if n not in params]
    extra = [n for n in params if n not in expected]
    wrong = [n for n in expected if n in params and tuple(params[n].shape) != expected[n]]
    problems = []
    if missing:
        problems.append("missing tensors: " + ", ".join(missing))
    if extra:
        problems.append("unexpected tensors: " + ", ".join(extra))
    if wrong:
        problems.append("shape mismatch: " + ", ".join(wrong))
    if problems:
        raise InventoryError("weight inventory does not match config; " + "; ".join(problems))


def import_weights(params, path, prefix="backbone."):
    """Overwrite the ``prefix`` tensors of ``params`` from a weight file (e.g. full VGG-16)."""
    loaded = load_params(path)
    taken = []
    for name, t in loaded.items():
        if not name.startswith(prefix):
            continue
        if name not in params or params[name].shape != t.shape:
            raise InventoryError(f"cannot import {name}: not in model or shape differs")
        params[name].data = t.data.copy()
        taken.append(name)
    return taken


def params_bytes(params):
    """Raw float32 bytes of every parameter, in order; for identity checks."""
    return b"".join(np.asarray(t.data, dtype="<f4").tobytes() for t in params.values())
