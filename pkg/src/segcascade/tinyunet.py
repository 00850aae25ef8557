"""A small explicit 3D U-Net with an optional residual encoder.

Parameters live in an ordered ``name -> tensor`` dict so that they can be
checkpointed, updated by the hand-written optimiser, and perturbed by
finite-difference checks. Gradients come from ``torch.autograd``.

Layout (``w_l = base_width * 2**l``)::

    enc0:  conv3(in -> w0), conv3(w0 -> w0)              [+ 1x1 projection]
    encL:  conv3 stride 2 (w_{L-1} -> w_L), conv3        [+ 1x1 stride-2 projection]
    decL:  transposed conv 2 (w_{L+1} -> w_L), concat skip, conv3(2 w_L -> w_L), conv3
    head:  conv1(w0 -> classes) + bias, softmax

Every 3x3x3 convolution is followed by instance normalisation (affine) and
a leaky ReLU with slope 0.01. In a residual encoder block the second
normalised convolution is added to the (projected) block input before the
final activation.
"""

from __future__ import annotations

import contextlib
import hashlib
import io
import json
import math
import struct
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .errors import NonFiniteLoss, ShapeMismatch

NEG_SLOPE = 0.01
NORM_EPS = 1e-5
DICE_EPS = 1e-5


@dataclass(frozen=True)
class NetworkConfig:
    in_channels: int
    out_classes: int
    depth: int = 3
    base_width: int = 8
    residual_encoder: bool = False

    def __post_init__(self):
        if self.in_channels < 1:
            raise ValueError("in_channels must be >= 1")
        if self.out_classes < 2:
            raise ValueError("out_classes must be >= 2")
        if self.depth < 2:
            raise ValueError("depth must be >= 2")
        if self.base_width < 2:
            raise ValueError("base_width must be >= 2")

    @property
    def widths(self) -> list[int]:
        return [self.base_width * 2**level for level in range(self.depth)]

    @property
    def divisor(self) -> int:
        return 2 ** (self.depth - 1)


def parameter_shapes(cfg: NetworkConfig) -> dict[str, tuple[int, ...]]:
    """Ordered parameter names and shapes; the order fixes initialisation draws."""
    w = cfg.widths
    shapes: dict[str, tuple[int, ...]] = {}

    def norm(prefix, ch):
        shapes[f"{prefix}.scale"] = (ch,)
        shapes[f"{prefix}.shift"] = (ch,)

    for level in range(cfg.depth):
        cin = cfg.in_channels if level == 0 else w[level - 1]
        p = f"enc{level}"
        shapes[f"{p}.conv1.w"] = (w[level], cin, 3, 3, 3)
        norm(f"{p}.norm1", w[level])
        shapes[f"{p}.conv2.w"] = (w[level], w[level], 3, 3, 3)
        norm(f"{p}.norm2", w[level])
        if cfg.residual_encoder and (cin != w[level] or level > 0):
            shapes[f"{p}.proj.w"] = (w[level], cin, 1, 1, 1)
    for level in reversed(range(cfg.depth - 1)):
        p = f"dec{level}"
        shapes[f"{p}.up.w"] = (w[level + 1], w[level], 2, 2, 2)
        shapes[f"{p}.conv1.w"] = (w[level], 2 * w[level], 3, 3, 3)
        norm(f"{p}.norm1", w[level])
        shapes[f"{p}.conv2.w"] = (w[level], w[level], 3, 3, 3)
        norm(f"{p}.norm2", w[level])
    shapes["head.w"] = (cfg.out_classes, w[0], 1, 1, 1)
    shapes["head.b"] = (cfg.out_classes,)
    return shapes


class Network:
    """Configuration plus named parameter tensors."""

    def __init__(self, config: NetworkConfig, params: dict[str, torch.Tensor], seed: int = 0):
        self.config = config
        self.params = params
        self.seed = seed

    @property
    def parameter_count(self) -> int:
        return sum(int(p.numel()) for p in self.params.values())

    @property
    def dtype(self):
        return next(iter(self.params.values())).dtype

    def to(self, dtype) -> Network:
        return Network(self.config, {k: v.detach().to(dtype).clone() for k, v in self.params.items()}, self.seed)

    def copy(self) -> Network:
        return self.to(self.dtype)

    def checksum(self) -> str:
        h = hashlib.sha256()
        for name, p in self.params.items():
            h.update(name.encode())
            h.update(p.detach().cpu().numpy().astype("<f4").tobytes())
        return h.hexdigest()

    def logits(self, x: torch.Tensor, params: dict[str, torch.Tensor] | None = None) -> torch.Tensor:
        return _logits(self.config, self.params if params is None else params, x)

    def predict(self, inputs: np.ndarray) -> np.ndarray:
        """Class probabilities for one sample of shape (channels, x, y, z).

        The volume is zero-padded up to a multiple of the encoder stride and
        the prediction cropped back.
        """
        return forward(self, inputs[None])[0]


def build_network(config: NetworkConfig, seed: int) -> Network:
    """Fan-in scaled uniform initialisation from a seeded numpy generator."""
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in parameter_shapes(config).items():
        if name.endswith(".scale"):
            value = np.ones(shape)
        elif name.endswith(".shift") or name.endswith(".b"):
            value = np.zeros(shape)
        else:
            if name.endswith("up.w"):
                fan_in = shape[0] * int(np.prod(shape[2:]))
            else:
                fan_in = int(np.prod(shape[1:]))
            gain = 1.0 if name.startswith("head") else math.sqrt(6.0)
            bound = gain / math.sqrt(fan_in)
            value = rng.uniform(-bound, bound, size=shape)
        params[name] = torch.from_numpy(value.astype(np.float32))
    return Network(config, params, seed)


_sign_log: list | None = None


@contextlib.contextmanager
def record_activation_signs():
    """Collect the sign pattern of every leaky-ReLU input during forward passes.

    Finite-difference checks use it to spot perturbations that cross a kink.
    """
    global _sign_log
    previous, _sign_log = _sign_log, []
    try:
        yield _sign_log
    finally:
        _sign_log = previous


def _act(x):
    if _sign_log is not None:
        _sign_log.append((x > 0).detach().clone())
    return F.leaky_relu(x, NEG_SLOPE)


def _inorm(x, scale, shift):
    mean = x.mean(dim=(2, 3, 4), keepdim=True)
    var = ((x - mean) ** 2).mean(dim=(2, 3, 4), keepdim=True)
    x = (x - mean) / torch.sqrt(var + NORM_EPS)
    return x * scale.view(1, -1, 1, 1, 1) + shift.view(1, -1, 1, 1, 1)


def _conv_norm(x, p, prefix, conv, norm, stride=1):
    x = F.conv3d(x, p[f"{prefix}.{conv}.w"], stride=stride, padding=1)
    return _inorm(x, p[f"{prefix}.{norm}.scale"], p[f"{prefix}.{norm}.shift"])


def _logits(cfg: NetworkConfig, p, x: torch.Tensor) -> torch.Tensor:
    skips = []
    for level in range(cfg.depth):
        stride = 1 if level == 0 else 2
        pre = f"enc{level}"
        h = _act(_conv_norm(x, p, pre, "conv1", "norm1", stride))
        h = _conv_norm(h, p, pre, "conv2", "norm2")
        if cfg.residual_encoder:
            proj = p.get(f"{pre}.proj.w")
            skip = x if proj is None else F.conv3d(x, proj, stride=stride)
            h = h + skip
        x = _act(h)
        skips.append(x)
    for level in reversed(range(cfg.depth - 1)):
        pre = f"dec{level}"
        x = F.conv_transpose3d(x, p[f"{pre}.up.w"], stride=2)
        x = torch.cat([x, skips[level]], dim=1)
        x = _act(_conv_norm(x, p, pre, "conv1", "norm1"))
        x = _act(_conv_norm(x, p, pre, "conv2", "norm2"))
    return F.conv3d(x, p["head.w"], p["head.b"])


def _padded(x: np.ndarray, divisor: int) -> tuple[np.ndarray, tuple[int, int, int]]:
    spatial = x.shape[-3:]
    target = [int(math.ceil(n / divisor) * divisor) for n in spatial]
    if list(spatial) == target:
        return x, spatial
    pad = [(0, 0)] * (x.ndim - 3) + [(0, t - n) for n, t in zip(spatial, target)]
    return np.pad(x, pad), spatial


def forward(net: Network, inputs: np.ndarray) -> np.ndarray:
    """Softmax probabilities, shape (batch, classes, x, y, z)."""
    inputs = np.asarray(inputs)
    if inputs.ndim != 5 or inputs.shape[1] != net.config.in_channels:
        raise ShapeMismatch(
            f"expected (batch, {net.config.in_channels}, x, y, z), got {inputs.shape}"
        )
    x, spatial = _padded(inputs, net.config.divisor)
    with torch.no_grad():
        t = torch.from_numpy(np.ascontiguousarray(x)).to(net.dtype)
        probs = torch.softmax(net.logits(t), dim=1).numpy()
    nx, ny, nz = spatial
    return probs[:, :, :nx, :ny, :nz]


@dataclass
class Batch:
    inputs: np.ndarray  # (batch, channels, x, y, z)
    targets: np.ndarray  # (batch, x, y, z) class indices


def _compound_loss(logp: torch.Tensor, targets: torch.Tensor, weights) -> torch.Tensor:
    w_dice, w_ce = weights
    n_classes = logp.shape[1]
    ce = -torch.gather(logp, 1, targets[:, None]).mean()
    probs = logp.exp()
    onehot = F.one_hot(targets, n_classes).permute(0, 4, 1, 2, 3).to(probs.dtype)
    dims = (2, 3, 4)
    inter = (probs * onehot).sum(dims)[:, 1:]
    denom = (probs.sum(dims) + onehot.sum(dims))[:, 1:]
    dice = (2 * inter + DICE_EPS) / (denom + DICE_EPS)
    return w_ce * ce + w_dice * (1 - dice.mean())


def loss(probs, targets, weights=(1.0, 1.0)) -> float:
    """Compound loss ``w_ce * CE + w_dice * (1 - mean foreground soft Dice)``.

    ``probs`` has shape (batch, classes, x, y, z), ``targets`` (batch, x, y, z).
    """
    p = torch.as_tensor(np.asarray(probs, dtype=np.float64))
    t = torch.as_tensor(np.asarray(targets, dtype=np.int64))
    if p.shape[0] != t.shape[0] or p.shape[2:] != t.shape[1:]:
        raise ShapeMismatch(f"probs {tuple(p.shape)} vs targets {tuple(t.shape)}")
    logp = torch.log(p.clamp_min(1e-300))
    return float(_compound_loss(logp, t, weights))


def soft_dice_per_class(probs: np.ndarray, targets: np.ndarray) -> np.ndarray:
    """Soft Dice of each foreground class, averaged over the batch."""
    p = np.asarray(probs, dtype=np.float64)
    onehot = np.eye(p.shape[1])[np.asarray(targets)].transpose(0, 4, 1, 2, 3)
    inter = (p * onehot).sum((2, 3, 4))
    denom = p.sum((2, 3, 4)) + onehot.sum((2, 3, 4))
    return ((2 * inter + DICE_EPS) / (denom + DICE_EPS))[:, 1:].mean(0)


def _check_batch(net: Network, batch: Batch) -> None:
    cfg = net.config
    x, y = batch.inputs, batch.targets
    if x.ndim != 5 or x.shape[1] != cfg.in_channels:
        raise ShapeMismatch(f"inputs {x.shape} do not match in_channels={cfg.in_channels}")
    if y.shape != (x.shape[0],) + x.shape[2:]:
        raise ShapeMismatch(f"targets {y.shape} vs inputs {x.shape}")
    if any(n % cfg.divisor for n in x.shape[2:]):
        raise ShapeMismatch(f"spatial extents {x.shape[2:]} not divisible by {cfg.divisor}")
    if y.size and (y.min() < 0 or y.max() >= cfg.out_classes):
        raise ShapeMismatch("target class outside [0, out_classes)")


def batch_loss(net: Network, batch: Batch, weights=(1.0, 1.0), params=None) -> torch.Tensor:
    _check_batch(net, batch)
    x = torch.from_numpy(np.ascontiguousarray(batch.inputs)).to(net.dtype)
    y = torch.from_numpy(np.asarray(batch.targets, dtype=np.int64))
    logp = torch.log_softmax(net.logits(x, params), dim=1)
    return _compound_loss(logp, y, weights)


def loss_and_gradients(net: Network, batch: Batch, weights=(1.0, 1.0)):
    """Loss value and exact gradients for every parameter (zeros where unused)."""
    params = {k: v.detach().requires_grad_(True) for k, v in net.params.items()}
    value = batch_loss(net, batch, weights, params)
    if not torch.isfinite(value):
        raise NonFiniteLoss(f"loss is {value.item()}")
    names = list(params)
    grads = torch.autograd.grad(value, [params[n] for n in names], allow_unused=True)
    out = {
        n: (torch.zeros_like(params[n]) if g is None else g.detach())
        for n, g in zip(names, grads)
    }
    return value.item(), out


def gradients(net: Network, batch: Batch, weights=(1.0, 1.0)) -> dict[str, torch.Tensor]:
    return loss_and_gradients(net, batch, weights)[1]


# --- checkpoints ---------------------------------------------------------

CKPT_MAGIC = b"SEGCKPT\x00"
CKPT_VERSION = 1


def save_checkpoint(net: Network, path=None, epoch: int = 0, extra: dict | None = None) -> bytes:
    """Serialise to a versioned container.

    Layout: magic, u32 version, u32 header length, canonical JSON header
    (config, seed, epoch, tensor table), then row-major little-endian
    float32 tensors in table order.
    """
    table, blobs, offset = [], [], 0
    for name, p in net.params.items():
        data = p.detach().cpu().numpy().astype("<f4")
        table.append({"name": name, "shape": list(data.shape), "offset": offset})
        blobs.append(data.tobytes(order="C"))
        offset += data.nbytes
    header = {
        "config": asdict(net.config),
        "seed": net.seed,
        "epoch": epoch,
        "tensors": table,
        "extra": extra or {},
    }
    hdr = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    raw = CKPT_MAGIC + struct.pack("<II", CKPT_VERSION, len(hdr)) + hdr + b"".join(blobs)
    if path is not None:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_bytes(raw)
    return raw


def load_checkpoint(source) -> tuple[Network, dict]:
    raw = source if isinstance(source, (bytes, bytearray)) else Path(source).read_bytes()
    buf = io.BytesIO(raw)
    if buf.read(len(CKPT_MAGIC)) != CKPT_MAGIC:
        raise ValueError("not a segcascade checkpoint")
    version, hlen = struct.unpack("<II", buf.read(8))
    if version != CKPT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    header = json.loads(buf.read(hlen))
    body = buf.read()
    params = {}
    for entry in header["tensors"]:
        n = int(np.prod(entry["shape"]))
        arr = np.frombuffer(body, dtype="<f4", count=n, offset=entry["offset"])
        params[entry["name"]] = torch.from_numpy(arr.reshape(entry["shape"]).astype(np.float32))
    net = Network(NetworkConfig(**header["config"]), params, header["seed"])
    return net, header


def stack_batch(samples: Sequence[tuple[np.ndarray, np.ndarray]], divisor: int) -> Batch:
    """Pad each (inputs, targets) pair to a multiple of ``divisor`` and stack."""
    xs, ys = [], []
    for x, y in samples:
        xp, _ = _padded(np.asarray(x, dtype=np.float32), divisor)
        yp, _ = _padded(np.asarray(y, dtype=np.int64), divisor)
        xs.append(xp)
        ys.append(yp)
    return Batch(np.stack(xs), np.stack(ys))
