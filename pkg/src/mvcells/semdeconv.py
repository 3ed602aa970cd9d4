"""Semantic deconvolution with a patch-to-patch neural network.

The network maps cubic input patches (one per view) of side ``n = 2h + 1``
to an output patch of the same side whose voxels are soma probabilities.
Hidden layers use rectifiers and the output layer is logistic; training
minimizes the summed log-loss by backpropagation.  The columnar variant is
a flat network whose first layer is constrained block-diagonal, giving one
independent column per view before the shared layers.
"""
from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .fusion import fuse_views
from .volume import MarkerList, Volume

log = logging.getLogger(__name__)

CLAMP = 1e-7


# ---------------------------------------------------------------------------
# Targets

@dataclass
class TargetSpec:
    sigma: float = 3.0

    def __post_init__(self):
        if self.sigma <= 0:
            raise ValueError("sigma must be positive")

    @property
    def radius(self) -> float:
        return 2.0 * self.sigma / 3.0


def make_target(markers: MarkerList, dims, spec: TargetSpec = TargetSpec()) -> Volume:
    """Ideal image: a truncated Gaussian blob at each (rounded) marker.

    Blobs are ``exp(-d^2 / (2 sigma^2))`` out to ``d <= 2 sigma / 3`` and
    zero beyond; overlaps take the voxel-wise maximum.
    """
    dims = tuple(int(d) for d in dims)
    out = np.zeros(dims)
    pts = np.asarray(getattr(markers, "points", markers), dtype=float).reshape(-1, 3)
    if len(pts) == 0:
        return Volume(out)
    centers = np.rint(pts).astype(int)
    if np.any(centers < 0) or np.any(centers >= np.array(dims)):
        raise ValueError("marker outside target dims")
    rad = spec.radius
    reach = int(np.floor(rad))
    g = np.arange(-reach, reach + 1)
    off = np.stack(np.meshgrid(g, g, g, indexing="ij"), axis=-1).reshape(-1, 3)
    d2 = (off ** 2).sum(axis=1)
    keep = d2 <= rad * rad + 1e-9
    off, vals = off[keep], np.exp(-d2[keep] / (2.0 * spec.sigma ** 2))
    for c in centers:
        q = c + off
        ok = np.all((q >= 0) & (q < np.array(dims)), axis=1)
        qi = tuple(q[ok].T)
        out[qi] = np.maximum(out[qi], vals[ok])
    return Volume(out)


# ---------------------------------------------------------------------------
# Network

@dataclass
class PatchNet:
    """Fully connected patch network.

    `weights[k]` has shape (fan_in, fan_out); `masks[k]` (same shape or
    None) pins connections to zero, which is how columns are expressed.
    """

    architecture: str
    half_width: int
    arity: int
    layer_sizes: list            # hidden sizes, first to last
    weights: list = field(default_factory=list)
    biases: list = field(default_factory=list)
    masks: list = field(default_factory=list)

    @property
    def side(self) -> int:
        return 2 * self.half_width + 1

    @property
    def patch_size(self) -> int:
        return self.side ** 3

    @property
    def n_layers(self) -> int:
        return len(self.weights)

    def copy(self) -> "PatchNet":
        return PatchNet(self.architecture, self.half_width, self.arity, list(self.layer_sizes),
                        [w.copy() for w in self.weights], [b.copy() for b in self.biases],
                        [None if m is None else m.copy() for m in self.masks])

    def astype(self, dtype) -> "PatchNet":
        net = self.copy()
        net.weights = [w.astype(dtype) for w in net.weights]
        net.biases = [b.astype(dtype) for b in net.biases]
        return net

    def n_params(self) -> int:
        return sum(w.size for w in self.weights) + sum(b.size for b in self.biases)


def default_layer_sizes(architecture: str, half_width: int) -> list:
    n3 = (2 * half_width + 1) ** 3
    if architecture == "flat":
        return [4 * n3, 4 * n3]
    if architecture == "columnar":
        return [2 * n3, 4 * n3]  # per-view column width, then shared layer(s)
    raise ValueError(f"unknown architecture {architecture!r}")


def init_net(architecture: str = "flat", half_width: int = 2, arity: int = 2,
             layer_sizes: Optional[Sequence[int]] = None, seed: int = 0,
             output_bias: float = 0.0) -> PatchNet:
    """Randomly initialized network (He-normal hidden layers).

    For ``columnar`` the first entry of `layer_sizes` is the width of each
    per-view column; the first hidden layer has ``arity * width`` units.
    """
    if arity not in (1, 2):
        raise ValueError("arity must be 1 or 2")
    rng = np.random.default_rng(seed)
    sizes = list(layer_sizes) if layer_sizes is not None else default_layer_sizes(
        architecture, half_width)
    n3 = (2 * half_width + 1) ** 3
    fan = [arity * n3]
    masks = []
    if architecture == "columnar":
        col = sizes[0]
        fan.append(arity * col)
        m = np.zeros((arity * n3, arity * col), dtype=bool)
        for v in range(arity):
            m[v * n3:(v + 1) * n3, v * col:(v + 1) * col] = True
        masks.append(m)
        for s in sizes[1:]:
            fan.append(s)
            masks.append(None)
    elif architecture == "flat":
        for s in sizes:
            fan.append(s)
            masks.append(None)
    else:
        raise ValueError(f"unknown architecture {architecture!r}")
    fan.append(n3)
    masks.append(None)

    weights, biases = [], []
    for k in range(len(fan) - 1):
        fan_in = n3 if (k == 0 and architecture == "columnar") else fan[k]
        scale = np.sqrt(2.0 / fan_in) if k < len(fan) - 2 else np.sqrt(1.0 / fan_in)
        w = rng.normal(0.0, scale, size=(fan[k], fan[k + 1]))
        if masks[k] is not None:
            w = w * masks[k]
        weights.append(w)
        biases.append(np.zeros(fan[k + 1]))
    biases[-1][:] = output_bias
    return PatchNet(architecture, half_width, arity, sizes, weights, biases, masks)


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def _stack_inputs(net: PatchNet, patch_a, patch_b=None) -> np.ndarray:
    a = np.asarray(patch_a)
    a = a.reshape(-1, net.patch_size) if a.size % net.patch_size == 0 else a
    if a.ndim != 2 or a.shape[1] != net.patch_size:
        raise ValueError(f"patch_a must hold {net.patch_size} voxels per patch")
    if net.arity == 1:
        if patch_b is not None:
            raise ValueError("single-view network takes one patch")
        return a
    if patch_b is None:
        raise ValueError("two-view network requires patch_b")
    b = np.asarray(patch_b).reshape(-1, net.patch_size)
    if b.shape != a.shape:
        raise ValueError("patch_a and patch_b differ in shape")
    return np.concatenate([a, b], axis=1)


def _forward_cache(net: PatchNet, x: np.ndarray):
    acts = [x]
    pre = []
    h = x
    for k, (w, b) in enumerate(zip(net.weights, net.biases)):
        z = h @ w + b
        pre.append(z)
        h = np.maximum(z, 0) if k < net.n_layers - 1 else _sigmoid(z)
        acts.append(h)
    return pre, acts


def forward(net: PatchNet, patch_a, patch_b=None) -> np.ndarray:
    """Output probabilities, shape (batch, n^3) (or (n^3,) for one patch)."""
    single = np.asarray(patch_a).size == net.patch_size
    x = _stack_inputs(net, patch_a, patch_b).astype(net.weights[0].dtype, copy=False)
    _, acts = _forward_cache(net, x)
    return acts[-1][0] if single else acts[-1]


def loss(outputs, targets) -> float:
    """Summed log-loss ``-sum(y log F + (1 - y) log(1 - F))``, F clamped."""
    f = np.clip(np.asarray(outputs, dtype=np.float64), CLAMP, 1 - CLAMP)
    y = np.asarray(targets, dtype=np.float64)
    return float(-np.sum(y * np.log(f) + (1 - y) * np.log(1 - f)))


def loss_and_gradient(net: PatchNet, x: np.ndarray, y: np.ndarray):
    """Summed log-loss and its gradient for a stacked input batch.

    Returns ``(E, grad_w, grad_b)`` with lists aligned to ``net.weights``.
    """
    pre, acts = _forward_cache(net, x)
    f = acts[-1]
    fc = np.clip(f, CLAMP, 1 - CLAMP)
    e = float(-np.sum(y * np.log(fc) + (1 - y) * np.log(1 - fc)))
    # dE/dz = F - y where the clamp is inactive, 0 where it saturates
    delta = np.where((f > CLAMP) & (f < 1 - CLAMP), f - y, 0.0).astype(f.dtype)
    gw = [None] * net.n_layers
    gb = [None] * net.n_layers
    for k in range(net.n_layers - 1, -1, -1):
        gw[k] = acts[k].T @ delta
        if net.masks[k] is not None:
            gw[k] = gw[k] * net.masks[k]
        gb[k] = delta.sum(axis=0)
        if k > 0:
            delta = (delta @ net.weights[k].T) * (pre[k - 1] > 0)
    return e, gw, gb


def loss_gradient(net: PatchNet, batch):
    """Gradient of the summed log-loss for ``batch = (patch_a, patch_b, target)``."""
    patch_a, patch_b, target = batch
    x = _stack_inputs(net, patch_a, patch_b).astype(net.weights[0].dtype)
    y = np.asarray(target, dtype=x.dtype).reshape(len(x), net.patch_size)
    _, gw, gb = loss_and_gradient(net, x, y)
    return gw, gb


# ---------------------------------------------------------------------------
# Training

@dataclass
class TrainConfig:
    epochs: int = 30
    patches_per_epoch: int = 8192
    batch_size: int = 128
    learning_rate: float = 1e-3
    lr_decay: float = 0.97             # per epoch
    optimizer: str = "adam"            # "adam" or "sgd"
    momentum: float = 0.0              # sgd only
    p_mask: float = 0.2
    soma_fraction: float = 0.5
    seed: int = 0
    dtype: str = "float32"
    trainable_layers: Optional[list] = None   # None trains every layer

    def __post_init__(self):
        if not 0 <= self.p_mask < 1:
            raise ValueError("p_mask must lie in [0, 1)")
        if self.epochs <= 0 or self.learning_rate <= 0 or self.batch_size <= 0:
            raise ValueError("epochs, learning rate and batch size must be positive")
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")


def normalize_input(volume) -> np.ndarray:
    """Scale a substack to [0, 1] by its maximum."""
    data = volume.data if isinstance(volume, Volume) else np.asarray(volume, dtype=float)
    m = data.max() if data.size else 0.0
    return data / m if m > 0 else np.zeros_like(data)


def mask_views(xa: np.ndarray, xb: np.ndarray, p_mask: float, rng) -> np.ndarray:
    """Zero one randomly chosen view in a fraction `p_mask` of the examples.

    Modifies the arrays in place and returns per-example codes: 0 untouched,
    1 view a zeroed, 2 view b zeroed.
    """
    n = len(xa)
    masked = rng.random(n) < p_mask
    which = rng.integers(1, 3, size=n)
    code = np.where(masked, which, 0)
    xa[code == 1] = 0
    xb[code == 2] = 0
    return code


class _PatchSampler:
    """Draws aligned input/target patches from a list of training substacks."""

    def __init__(self, substacks, half_width, soma_fraction, arity):
        self.h = half_width
        self.n = 2 * half_width + 1
        self.soma_fraction = soma_fraction
        self.arity = arity
        self.items = []
        for views_a, views_b, target in substacks:
            a = normalize_input(views_a)
            b = normalize_input(views_b) if arity == 2 else None
            y = target.data if isinstance(target, Volume) else np.asarray(target)
            if min(a.shape) < self.n:
                raise ValueError("substack smaller than the patch")
            lo, hi = self.h, np.array(a.shape) - self.h
            core = np.zeros(a.shape, dtype=bool)
            core[lo:hi[0], lo:hi[1], lo:hi[2]] = True
            soma = np.argwhere((y > 0) & core)
            self.items.append((a, b, y, np.array(a.shape), soma))

    def sample(self, count, rng):
        n = self.n
        xa = np.empty((count, n ** 3))
        xb = np.empty((count, n ** 3)) if self.arity == 2 else None
        ys = np.empty((count, n ** 3))
        which = rng.integers(0, len(self.items), size=count)
        on_soma = rng.random(count) < self.soma_fraction
        for i in range(count):
            a, b, y, shape, soma = self.items[which[i]]
            if on_soma[i] and len(soma):
                c = soma[rng.integers(len(soma))]
            else:
                c = rng.integers(self.h, shape - self.h)
            sl = tuple(slice(c[k] - self.h, c[k] + self.h + 1) for k in range(3))
            xa[i] = a[sl].ravel()
            if xb is not None:
                xb[i] = b[sl].ravel()
            ys[i] = y[sl].ravel()
        return xa, xb, ys


def train(net: PatchNet, substacks, cfg: TrainConfig = TrainConfig()):
    """Fit `net` to ``(view_a, view_b, target)`` substacks by minibatch descent.

    Every epoch draws `cfg.patches_per_epoch` fresh patches (a fraction
    `cfg.soma_fraction` centered on target support).  For two-view nets a
    fraction `cfg.p_mask` of the examples has one view zeroed.

    Returns
    -------
    (PatchNet, list of float)
        The trained network and the mean per-voxel training loss per epoch,
        preceded by the loss before the first update.
    """
    substacks = list(substacks)
    if not substacks:
        raise ValueError("empty training set")
    dtype = np.dtype(cfg.dtype)
    rng = np.random.default_rng(cfg.seed)
    sampler = _PatchSampler(substacks, net.half_width, cfg.soma_fraction, net.arity)
    work = net.astype(dtype)
    layers = range(work.n_layers) if cfg.trainable_layers is None else cfg.trainable_layers
    layers = sorted(int(k) for k in layers)

    mw = {k: np.zeros_like(work.weights[k]) for k in layers}
    vw = {k: np.zeros_like(work.weights[k]) for k in layers}
    mb = {k: np.zeros_like(work.biases[k]) for k in layers}
    vb = {k: np.zeros_like(work.biases[k]) for k in layers}
    beta1, beta2, eps = 0.9, 0.999, 1e-8
    step = 0

    def batch_xy(count):
        xa, xb, y = sampler.sample(count, rng)
        if net.arity == 2 and cfg.p_mask > 0:
            mask_views(xa, xb, cfg.p_mask, rng)
        x = xa if xb is None else np.concatenate([xa, xb], axis=1)
        return x.astype(dtype), y.astype(dtype)

    # held-in probe set to report the starting loss on the same distribution
    x0, y0 = batch_xy(min(cfg.patches_per_epoch, 2048))
    e0, _, _ = loss_and_gradient(work, x0, y0)
    curve = [e0 / y0.size]

    lr = cfg.learning_rate
    for epoch in range(cfg.epochs):
        x_all, y_all = batch_xy(cfg.patches_per_epoch)
        total = 0.0
        for s in range(0, len(x_all), cfg.batch_size):
            x, y = x_all[s:s + cfg.batch_size], y_all[s:s + cfg.batch_size]
            e, gw, gb = loss_and_gradient(work, x, y)
            total += e
            scale = 1.0 / len(x)
            step += 1
            for k in layers:
                g_w, g_b = gw[k] * scale, gb[k] * scale
                if cfg.optimizer == "adam":
                    mw[k] = beta1 * mw[k] + (1 - beta1) * g_w
                    vw[k] = beta2 * vw[k] + (1 - beta2) * g_w * g_w
                    mb[k] = beta1 * mb[k] + (1 - beta1) * g_b
                    vb[k] = beta2 * vb[k] + (1 - beta2) * g_b * g_b
                    c1 = 1 - beta1 ** step
                    c2 = 1 - beta2 ** step
                    upd_w = lr * (mw[k] / c1) / (np.sqrt(vw[k] / c2) + eps)
                    upd_b = lr * (mb[k] / c1) / (np.sqrt(vb[k] / c2) + eps)
                else:
                    mw[k] = cfg.momentum * mw[k] + g_w
                    mb[k] = cfg.momentum * mb[k] + g_b
                    upd_w, upd_b = lr * mw[k], lr * mb[k]
                if work.masks[k] is not None:
                    upd_w = upd_w * work.masks[k]
                work.weights[k] -= upd_w.astype(dtype)
                work.biases[k] -= upd_b.astype(dtype)
        curve.append(total / y_all.size)
        log.info("epoch %d/%d loss %.5f", epoch + 1, cfg.epochs, curve[-1])
        lr *= cfg.lr_decay

    trained = work.astype(net.weights[0].dtype)
    return trained, curve


# ---------------------------------------------------------------------------
# Convolutional application

def _lattice(n, h, stride):
    c = list(range(h, n - h, stride))
    if not c or c[-1] != n - 1 - h:
        c.append(n - 1 - h)
    return np.array(c)


def predict_volume(net: PatchNet, view_a: Volume, view_b: Optional[Volume] = None,
                   stride: int = 1, dtype="float32", chunk: int = 4096) -> Volume:
    """Apply the network on a lattice of patches and average the overlaps.

    Patch centers lie on a lattice of spacing `stride` (plus the last valid
    center on each axis).  Each voxel receives the mean of all patch
    outputs covering it, so interior voxels at stride 1 average ``n^3``
    predictions and borders are renormalized by their actual coverage.
    """
    if stride < 1:
        raise ValueError("stride must be >= 1")
    if net.arity == 2:
        if view_b is None:
            raise ValueError("two-view network requires view_b")
        if view_b.dims != view_a.dims:
            raise ValueError("views differ in dims")
    elif view_b is not None:
        raise ValueError("single-view network takes one view")
    dims = view_a.dims
    h, n = net.half_width, net.side
    if min(dims) < n:
        raise ValueError(f"substack {dims} smaller than patch side {n}")

    work = net.astype(dtype)
    wa = sliding_window_view(normalize_input(view_a).astype(dtype), (n, n, n))
    wb = None if view_b is None else sliding_window_view(
        normalize_input(view_b).astype(dtype), (n, n, n))
    cx, cy, cz = (_lattice(d, h, stride) for d in dims)
    total = np.zeros(dims)
    count = np.zeros(dims)
    offs = np.arange(-h, h + 1)

    per_x = max(1, chunk // (len(cy) * len(cz)))
    for s in range(0, len(cx), per_x):
        xs = cx[s:s + per_x]
        ix = np.ix_(xs - h, cy - h, cz - h)
        pa = wa[ix].reshape(-1, n ** 3)
        x = pa if wb is None else np.concatenate([pa, wb[ix].reshape(-1, n ** 3)], axis=1)
        _, acts = _forward_cache(work, x)
        out = acts[-1].reshape(len(xs), len(cy), len(cz), n, n, n).astype(np.float64)
        for i, dx in enumerate(offs):
            for j, dy in enumerate(offs):
                for k, dz in enumerate(offs):
                    sel = np.ix_(xs + dx, cy + dy, cz + dz)
                    total[sel] += out[:, :, :, i, j, k]
                    count[sel] += 1
    return Volume(np.clip(total / count, 0.0, 1.0), view_a.voxel_size)


# ---------------------------------------------------------------------------
# Pipelines

PIPELINES = ("svim", "ifi", "msd")


def sd_pipelines(mode: str, view_a: Volume, view_b: Volume, nets: dict, stride: int = 1,
                 fusion_window: int = 9):
    """Semantic deconvolution of an aligned substack pair.

    `nets` maps ``"single"`` (one-view net, SVIM), ``"fused"`` (one-view net
    trained on fused images, IFI; falls back to ``"single"``) and ``"msd"``
    (two-view net).  SVIM returns a tuple of two volumes, IFI and MSD one.
    """
    mode = mode.lower()
    if mode == "svim":
        net = nets["single"]
        if net.arity != 1:
            raise ValueError("SVIM needs a single-view network")
        return (predict_volume(net, view_a, stride=stride),
                predict_volume(net, view_b, stride=stride))
    if mode == "ifi":
        net = nets.get("fused", nets.get("single"))
        if net is None or net.arity != 1:
            raise ValueError("IFI needs a single-view network")
        return predict_volume(net, fuse_views(view_a, view_b, fusion_window), stride=stride)
    if mode == "msd":
        net = nets["msd"]
        if net.arity != 2:
            raise ValueError("MSD needs a two-view network")
        return predict_volume(net, view_a, view_b, stride=stride)
    raise ValueError(f"unknown pipeline {mode!r}")


def binarize_or(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Union of two binarized outputs, as used for SVIM voxel scoring."""
    return np.logical_or(a, b)


# ---------------------------------------------------------------------------
# Serialization

def save_net(net: PatchNet, path: str) -> None:
    header = {
        "format": "patchnet-1",
        "architecture": net.architecture,
        "half_width": net.half_width,
        "arity": net.arity,
        "layer_sizes": list(net.layer_sizes),
        "activations": ["relu"] * (net.n_layers - 1) + ["logistic"],
        "n_layers": net.n_layers,
    }
    arrays = {"header": np.frombuffer(json.dumps(header, sort_keys=True).encode(), dtype=np.uint8)}
    for k in range(net.n_layers):
        arrays[f"w{k}"] = net.weights[k]
        arrays[f"b{k}"] = net.biases[k]
        if net.masks[k] is not None:
            arrays[f"m{k}"] = net.masks[k]
    with open(path, "wb") as f:
        np.savez(f, **arrays)


def load_net(path: str) -> PatchNet:
    with np.load(path) as z:
        header = json.loads(bytes(z["header"]).decode())
        if header.get("format") != "patchnet-1":
            raise ValueError(f"{path}: unknown network format")
        k_layers = header["n_layers"]
        weights = [z[f"w{k}"] for k in range(k_layers)]
        biases = [z[f"b{k}"] for k in range(k_layers)]
        masks = [z[f"m{k}"] if f"m{k}" in z.files else None for k in range(k_layers)]
    return PatchNet(header["architecture"], header["half_width"], header["arity"],
                    header["layer_sizes"], weights, biases, masks)


def save_loss_curve(curve, path: str) -> None:
    with open(path, "w") as f:
        f.write("epoch,loss\n")
        for i, v in enumerate(curve):
            f.write(f"{i},{v:.8f}\n")
