"""Fence-texel classifier: a small five-layer convolutional network.

Architecture: conv(6 maps, 5x5) -> meanpool(2x2) -> conv(12 maps, 5x5, fully
connected across input maps) -> meanpool(2x2) -> fully-connected 300 -> 2,
with logistic sigmoid on the conv and output layers. Trained by plain
mini-batch gradient descent on MSE against one-hot targets. Forward,
backward and serialization are implemented here directly; no autograd.

Output order is (score_joint, score_nonjoint).
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import expit

from .image import Patch
from .synth import LABEL_JOINT, TexelDataset

__all__ = [
    "CnnArch",
    "CnnModel",
    "TrainConfig",
    "TrainReport",
    "init_model",
    "forward",
    "forward_batch",
    "loss",
    "loss_and_gradients",
    "parameters_to_vector",
    "model_with_vector",
    "train",
    "gradient_check",
    "save_model",
    "load_model",
]

MODEL_MAGIC = "DEFENCE-CNN v1"


@dataclass(frozen=True)
class CnnArch:
    """Layer widths of the classifier; defaults give 2570 learnable parameters."""

    input_side: int = 32
    conv1_maps: int = 6
    conv2_maps: int = 12
    kernel: int = 5
    pool: int = 2
    outputs: int = 2

    def __post_init__(self):
        c1 = self.input_side - self.kernel + 1
        if c1 < 1 or c1 % self.pool:
            raise ValueError(f"conv1 output {c1} not divisible by pool {self.pool}")
        c2 = c1 // self.pool - self.kernel + 1
        if c2 < 1 or c2 % self.pool:
            raise ValueError(f"conv2 output {c2} not divisible by pool {self.pool}")

    @property
    def conv1_out(self) -> int:
        return self.input_side - self.kernel + 1

    @property
    def conv2_out(self) -> int:
        return self.conv1_out // self.pool - self.kernel + 1

    @property
    def flat_len(self) -> int:
        return self.conv2_maps * (self.conv2_out // self.pool) ** 2

    @property
    def parameter_count(self) -> int:
        k2 = self.kernel**2
        return (
            self.conv1_maps * k2 + self.conv1_maps
            + self.conv2_maps * self.conv1_maps * k2 + self.conv2_maps
            + self.flat_len * self.outputs + self.outputs
        )


@dataclass(frozen=True)
class CnnModel:
    """Immutable weight set; safe for concurrent forward evaluation."""

    arch: CnnArch
    k1: np.ndarray  # (conv1_maps, 1, k, k)
    b1: np.ndarray  # (conv1_maps,)
    k2: np.ndarray  # (conv2_maps, conv1_maps, k, k)
    b2: np.ndarray  # (conv2_maps,)
    w: np.ndarray   # (outputs, flat_len)
    c: np.ndarray   # (outputs,)

    def __post_init__(self):
        for name in ("k1", "b1", "k2", "b2", "w", "c"):
            arr = np.ascontiguousarray(getattr(self, name), dtype=np.float64)
            arr.flags.writeable = False
            object.__setattr__(self, name, arr)


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 500
    batch_size: int = 50
    learning_rate: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")
        if self.learning_rate < 0.0:
            raise ValueError("learning_rate must be >= 0")


@dataclass(frozen=True)
class TrainReport:
    per_epoch_mse: list[float]
    final_mse: float
    wall_time: float


def init_model(seed: int = 0, arch: CnnArch = CnnArch()) -> CnnModel:
    """Glorot-uniform kernels (a = sqrt(6/(fan_in+fan_out)) per layer), zero biases."""
    rng = np.random.default_rng(seed)
    k2 = arch.kernel**2

    def glorot(shape, fan_in, fan_out):
        a = np.sqrt(6.0 / (fan_in + fan_out))
        return rng.uniform(-a, a, size=shape)

    return CnnModel(
        arch=arch,
        k1=glorot((arch.conv1_maps, 1, arch.kernel, arch.kernel), k2, arch.conv1_maps * k2),
        b1=np.zeros(arch.conv1_maps),
        k2=glorot(
            (arch.conv2_maps, arch.conv1_maps, arch.kernel, arch.kernel),
            arch.conv1_maps * k2,
            arch.conv2_maps * k2,
        ),
        b2=np.zeros(arch.conv2_maps),
        w=glorot((arch.outputs, arch.flat_len), arch.flat_len, arch.outputs),
        c=np.zeros(arch.outputs),
    )


# --- forward / backward -----------------------------------------------------


def _im2col(x: np.ndarray, k: int) -> tuple[np.ndarray, int, int]:
    """Unfold (B,C,H,W) into ((B*oh*ow), C*k*k) rows of valid k-by-k windows."""
    b = x.shape[0]
    oh = x.shape[2] - k + 1
    ow = x.shape[3] - k + 1
    win = sliding_window_view(x, (k, k), axis=(2, 3))  # (B, C, oh, ow, k, k)
    col = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(b * oh * ow, -1)
    return col, oh, ow


def _conv_from_col(col: np.ndarray, kernels: np.ndarray, b: int, oh: int, ow: int) -> np.ndarray:
    out = col @ kernels.reshape(kernels.shape[0], -1).T
    # Transposed view; the caller's bias add materializes it contiguously.
    return out.reshape(b, oh, ow, -1).transpose(0, 3, 1, 2)


def _conv_input_grad(dz: np.ndarray, kernels: np.ndarray, in_shape: tuple[int, int]) -> np.ndarray:
    """Gradient w.r.t. the conv input: scatter dz back through every kernel tap."""
    k = kernels.shape[-1]
    b, _, oh, ow = dz.shape
    dz_last = np.ascontiguousarray(dz.transpose(0, 2, 3, 1))  # (B, oh, ow, Cout)
    dx = np.zeros((b, kernels.shape[1]) + in_shape)
    for u in range(k):
        for v in range(k):
            tap = dz_last @ kernels[:, :, u, v]  # (B, oh, ow, Cin)
            dx[:, :, u : u + oh, v : v + ow] += tap.transpose(0, 3, 1, 2)
    return dx


def _meanpool(x: np.ndarray, p: int) -> np.ndarray:
    b, c, h, w = x.shape
    return x.reshape(b, c, h // p, p, w // p, p).mean(axis=(3, 5))


def _meanpool_grad(dp: np.ndarray, p: int) -> np.ndarray:
    return np.repeat(np.repeat(dp, p, axis=2), p, axis=3) / (p * p)


def _forward_full(model: CnnModel, x: np.ndarray) -> dict[str, np.ndarray]:
    """All layer activations for a batch x of shape (B, side, side).

    The im2col matrices are kept so the backward pass can reuse them.
    """
    arch = model.arch
    b = x.shape[0]
    a0 = x[:, None, :, :]
    col1, oh1, ow1 = _im2col(a0, arch.kernel)
    a1 = expit(_conv_from_col(col1, model.k1, b, oh1, ow1) + model.b1[None, :, None, None])
    p1 = _meanpool(a1, arch.pool)
    col2, oh2, ow2 = _im2col(p1, arch.kernel)
    a2 = expit(_conv_from_col(col2, model.k2, b, oh2, ow2) + model.b2[None, :, None, None])
    p2 = _meanpool(a2, arch.pool)
    f = p2.reshape(b, -1)
    o = expit(f @ model.w.T + model.c[None, :])
    return {"a1": a1, "p1": p1, "a2": a2, "p2": p2, "f": f, "o": o, "col1": col1, "col2": col2}


def _check_batch(model: CnnModel, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    side = model.arch.input_side
    if x.ndim != 3 or x.shape[1] != side or x.shape[2] != side:
        raise ValueError(f"expected batch of {side}x{side} patches, got shape {x.shape}")
    return x


def forward_batch(model: CnnModel, x: np.ndarray) -> np.ndarray:
    """Class scores for a batch of single-channel patches, shape (B, 2)."""
    return _forward_full(model, _check_batch(model, x))["o"]


def forward(model: CnnModel, patch: Patch) -> tuple[float, float]:
    """(score_joint, score_nonjoint) for one single-channel patch."""
    if patch.channels != 1 or patch.side != model.arch.input_side:
        raise ValueError(
            f"expected single-channel {model.arch.input_side}x{model.arch.input_side} patch, "
            f"got {patch.channels}x{patch.side}x{patch.side}"
        )
    o = forward_batch(model, patch.planes)
    return float(o[0, 0]), float(o[0, 1])


def loss(model: CnnModel, x: np.ndarray, targets: np.ndarray) -> float:
    """Half mean squared error: sum_b ||o_b - t_b||^2 / (2B)."""
    o = forward_batch(model, x)
    return float(np.sum((o - targets) ** 2) / (2 * x.shape[0]))


def loss_and_gradients(model: CnnModel, x: np.ndarray, targets: np.ndarray):
    """Loss plus its gradients w.r.t. every weight tensor, as a dict keyed by field."""
    x = _check_batch(model, x)
    arch = model.arch
    batch = x.shape[0]
    acts = _forward_full(model, x)
    o = acts["o"]
    value = float(np.sum((o - targets) ** 2) / (2 * batch))

    def kernel_grad(dz: np.ndarray, col: np.ndarray, shape) -> np.ndarray:
        flat = dz.transpose(0, 2, 3, 1).reshape(-1, dz.shape[1])
        return (flat.T @ col).reshape(shape)

    dzo = (o - targets) / batch * o * (1.0 - o)
    dw = dzo.T @ acts["f"]
    dc = dzo.sum(axis=0)
    dp2 = (dzo @ model.w).reshape(acts["p2"].shape)
    dz2 = _meanpool_grad(dp2, arch.pool) * acts["a2"] * (1.0 - acts["a2"])
    dk2 = kernel_grad(dz2, acts["col2"], model.k2.shape)
    db2 = dz2.sum(axis=(0, 2, 3))
    dp1 = _conv_input_grad(dz2, model.k2, acts["p1"].shape[2:])
    dz1 = _meanpool_grad(dp1, arch.pool) * acts["a1"] * (1.0 - acts["a1"])
    dk1 = kernel_grad(dz1, acts["col1"], model.k1.shape)
    db1 = dz1.sum(axis=(0, 2, 3))

    return value, {"k1": dk1, "b1": db1, "k2": dk2, "b2": db2, "w": dw, "c": dc}


# --- parameter vector (canonical order) --------------------------------------

_FIELDS = ("k1", "b1", "k2", "b2", "w", "c")


def parameters_to_vector(model: CnnModel) -> np.ndarray:
    """Flatten all weights in file order: conv1 kernels/biases, conv2, FC."""
    return np.concatenate([getattr(model, name).ravel() for name in _FIELDS])


def model_with_vector(model: CnnModel, vec: np.ndarray) -> CnnModel:
    """New model with the same architecture and weights taken from a flat vector."""
    vec = np.asarray(vec, dtype=np.float64)
    if vec.size != model.arch.parameter_count:
        raise ValueError(f"expected {model.arch.parameter_count} parameters, got {vec.size}")
    parts = {}
    pos = 0
    for name in _FIELDS:
        shape = getattr(model, name).shape
        n = int(np.prod(shape))
        parts[name] = vec[pos : pos + n].reshape(shape)
        pos += n
    return replace(model, **parts)


# --- training ----------------------------------------------------------------


def _dataset_arrays(dataset: TexelDataset, side: int) -> tuple[np.ndarray, np.ndarray]:
    """Luminance patch stack (N, side, side) and one-hot targets (N, 2)."""
    if not dataset.samples:
        raise ValueError("empty dataset")
    x = np.zeros((len(dataset.samples), side, side))
    t = np.zeros((len(dataset.samples), 2))
    for i, (patch, label) in enumerate(dataset.samples):
        if patch.side != side:
            raise ValueError(f"sample {i}: patch side {patch.side}, expected {side}")
        x[i] = patch.luminance()
        t[i] = (1.0, 0.0) if label == LABEL_JOINT else (0.0, 1.0)
    return x, t


def train(model: CnnModel, dataset: TexelDataset, config: TrainConfig = TrainConfig()):
    """Mini-batch SGD on MSE; returns the trained model and a per-epoch loss report.

    The dataset is reshuffled every epoch with the seeded generator, so the
    whole run is reproducible from (initial model, dataset, config).
    """
    x, targets = _dataset_arrays(dataset, model.arch.input_side)
    n = x.shape[0]
    rng = np.random.default_rng(config.seed)
    start = time.perf_counter()
    per_epoch: list[float] = []

    for epoch in range(config.epochs):
        order = rng.permutation(n)
        epoch_sum = 0.0
        for lo in range(0, n, config.batch_size):
            idx = order[lo : lo + config.batch_size]
            value, grads = loss_and_gradients(model, x[idx], targets[idx])
            if not np.isfinite(value):
                raise RuntimeError(
                    f"training diverged: non-finite loss at epoch {epoch + 1}, "
                    f"batch {lo // config.batch_size + 1}"
                )
            epoch_sum += value * len(idx)
            if config.learning_rate:
                model = replace(
                    model,
                    **{
                        name: getattr(model, name) - config.learning_rate * grads[name]
                        for name in _FIELDS
                    },
                )
        per_epoch.append(epoch_sum / n)
        if per_epoch[-1] > 10.0 * per_epoch[0]:
            raise RuntimeError(
                f"training diverged: epoch {epoch + 1} MSE {per_epoch[-1]:.4g} exceeds "
                f"10x the first-epoch MSE {per_epoch[0]:.4g}"
            )

    report = TrainReport(per_epoch, per_epoch[-1], time.perf_counter() - start)
    return model, report


def gradient_check(
    model: CnnModel,
    sample: tuple[Patch, int],
    epsilon: float = 1e-4,
    n_params: int = 100,
    seed: int = 0,
) -> float:
    """Max relative error between backprop and central finite differences.

    Checks a random subset of parameters on a single labeled sample; the
    acceptance gate is max error < 1e-3 at epsilon = 1e-4.
    """
    if not 1e-6 <= epsilon <= 1e-3:
        raise ValueError("epsilon must lie in [1e-6, 1e-3]")
    patch, label = sample
    x = patch.luminance()[None, :, :]
    t = np.array([(1.0, 0.0) if label == LABEL_JOINT else (0.0, 1.0)])

    _, grads = loss_and_gradients(model, x, t)
    analytic = np.concatenate([grads[name].ravel() for name in _FIELDS])
    vec = parameters_to_vector(model)

    rng = np.random.default_rng(seed)
    subset = rng.choice(vec.size, size=min(n_params, vec.size), replace=False)
    worst = 0.0
    for i in subset:
        bumped = vec.copy()
        bumped[i] = vec[i] + epsilon
        lo_plus = loss(model_with_vector(model, bumped), x, t)
        bumped[i] = vec[i] - epsilon
        lo_minus = loss(model_with_vector(model, bumped), x, t)
        numeric = (lo_plus - lo_minus) / (2.0 * epsilon)
        denom = max(abs(analytic[i]), abs(numeric), 1e-8)
        worst = max(worst, abs(analytic[i] - numeric) / denom)
    return worst


# --- serialization ------------------------------------------------------------


def save_model(model: CnnModel, path: str | Path) -> None:
    """Versioned text format: magic, arch descriptor, one decimal weight per line."""
    a = model.arch
    lines = [
        MODEL_MAGIC,
        f"arch input={a.input_side} conv1={a.conv1_maps} conv2={a.conv2_maps} "
        f"kernel={a.kernel} pool={a.pool} outputs={a.outputs}",
    ]
    lines.extend(repr(float(v)) for v in parameters_to_vector(model))
    Path(path).write_text("\n".join(lines) + "\n")


def load_model(path: str | Path) -> CnnModel:
    text = Path(path).read_text()
    lines = text.splitlines()
    if len(lines) < 2:
        raise ValueError(f"{path}: truncated model file")
    if lines[0] != MODEL_MAGIC:
        raise ValueError(f"{path}: bad magic {lines[0]!r}, expected {MODEL_MAGIC!r}")
    head, *pairs = lines[1].split()
    if head != "arch":
        raise ValueError(f"{path}: missing arch descriptor")
    try:
        kv = dict(p.split("=", 1) for p in pairs)
        arch = CnnArch(
            input_side=int(kv["input"]),
            conv1_maps=int(kv["conv1"]),
            conv2_maps=int(kv["conv2"]),
            kernel=int(kv["kernel"]),
            pool=int(kv["pool"]),
            outputs=int(kv["outputs"]),
        )
    except (KeyError, ValueError) as exc:
        raise ValueError(f"{path}: malformed arch descriptor ({exc})") from exc

    weights = lines[2:]
    if len(weights) != arch.parameter_count:
        raise ValueError(
            f"{path}: expected {arch.parameter_count} weights, found {len(weights)}"
        )
    try:
        vec = np.array([float(w) for w in weights])
    except ValueError as exc:
        raise ValueError(f"{path}: non-numeric weight line ({exc})") from exc

    template = CnnModel(
        arch=arch,
        k1=np.zeros((arch.conv1_maps, 1, arch.kernel, arch.kernel)),
        b1=np.zeros(arch.conv1_maps),
        k2=np.zeros((arch.conv2_maps, arch.conv1_maps, arch.kernel, arch.kernel)),
        b2=np.zeros(arch.conv2_maps),
        w=np.zeros((arch.outputs, arch.flat_len)),
        c=np.zeros(arch.outputs),
    )
    return model_with_vector(template, vec)
