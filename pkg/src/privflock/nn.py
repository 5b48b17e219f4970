"""Leader-identity discriminator: a small CNN with exact backpropagation.

The net maps an observation window (channels = time samples, spatial grid =
robots x coordinates) to one logit per robot. Everything is float64 numpy;
the conv and max-pool inner loops go through the kernel backend. Gradients
are derived by hand and checked against finite differences in the tests, so
no autograd framework is involved.

Architecture: Conv2d(3x3, stride 1, pad 1) -> BatchNorm2d -> ReLU ->
MaxPool2d(3x3, stride 1, pad 1) -> flatten -> Linear -> ReLU -> Linear.
"""

from __future__ import annotations

import io
import struct
from dataclasses import dataclass, field

import numpy as np

from privflock import _kernels

CHECKPOINT_MAGIC = b"PFNN"
CHECKPOINT_VERSION = 1

# serialization order; parameters first, then batch-norm buffers and scalars
_TENSOR_ORDER = ("conv_w", "conv_b", "bn_gamma", "bn_beta", "bn_mean",
                 "bn_var", "fc1_w", "fc1_b", "fc2_w", "fc2_b",
                 "bn_eps", "bn_momentum")

PARAM_NAMES = ("conv_w", "conv_b", "bn_gamma", "bn_beta",
               "fc1_w", "fc1_b", "fc2_w", "fc2_b")


class CheckpointError(RuntimeError):
    """Malformed or incompatible checkpoint file."""


class DiscriminatorNet:
    """CNN from observation windows to per-robot leader logits.

    Weights use a uniform fan-in initialization (bound 1 / sqrt(fan_in)),
    biases start at zero, batch-norm at identity with running stats
    (mean 0, var 1).
    """

    def __init__(self, in_channels: int, n_robots: int, n_cols: int = 3,
                 conv_channels: int = 16, hidden: int = 512,
                 bn_eps: float = 1e-5, bn_momentum: float = 0.1,
                 seed: int = 0):
        self.in_channels = in_channels
        self.n_robots = n_robots
        self.n_cols = n_cols
        self.conv_channels = conv_channels
        self.hidden = hidden
        self.bn_eps = float(bn_eps)
        self.bn_momentum = float(bn_momentum)
        self.n_features = conv_channels * n_robots * n_cols

        rng = np.random.default_rng(seed)

        def uniform(shape, fan_in):
            bound = 1.0 / np.sqrt(fan_in)
            return rng.uniform(-bound, bound, size=shape)

        self.conv_w = uniform((conv_channels, in_channels, 3, 3),
                              in_channels * 9)
        self.conv_b = np.zeros(conv_channels)
        self.bn_gamma = np.ones(conv_channels)
        self.bn_beta = np.zeros(conv_channels)
        self.bn_mean = np.zeros(conv_channels)
        self.bn_var = np.ones(conv_channels)
        self.fc1_w = uniform((hidden, self.n_features), self.n_features)
        self.fc1_b = np.zeros(hidden)
        self.fc2_w = uniform((n_robots, hidden), hidden)
        self.fc2_b = np.zeros(n_robots)

    def parameters(self) -> dict[str, np.ndarray]:
        return {name: getattr(self, name) for name in PARAM_NAMES}

    def parameter_count(self) -> int:
        return sum(p.size for p in self.parameters().values())

    def clone(self) -> "DiscriminatorNet":
        other = DiscriminatorNet.__new__(DiscriminatorNet)
        other.__dict__.update({
            k: (v.copy() if isinstance(v, np.ndarray) else v)
            for k, v in self.__dict__.items()
        })
        return other


def stack_windows(windows) -> tuple[np.ndarray, np.ndarray]:
    """Pack observation windows into net inputs (count, C, N, 3) and labels."""
    xs = np.stack([np.ascontiguousarray(w.data.transpose(2, 0, 1))
                   for w in windows])
    ys = np.array([w.label for w in windows], dtype=np.int64)
    return xs, ys


def _check_input(net: DiscriminatorNet, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.ndim != 4:
        raise ValueError(f"conv input: expected a 4-d batch, got shape {x.shape}")
    if x.shape[1] != net.in_channels:
        raise ValueError(
            f"conv input: expected {net.in_channels} channels, got {x.shape[1]}")
    if x.shape[2] != net.n_robots or x.shape[3] != net.n_cols:
        raise ValueError(
            f"flatten: expected spatial grid {net.n_robots}x{net.n_cols}, "
            f"got {x.shape[2]}x{x.shape[3]}")
    return x


def forward(net: DiscriminatorNet, x, train: bool = False,
            cache: dict | None = None) -> np.ndarray:
    """Logits for a batch of windows, shape (batch, n_robots).

    train=True normalizes with batch statistics and updates the running
    stats; eval mode uses the running stats. Pass a dict as `cache` to keep
    the intermediates backward() needs.
    """
    x = _check_input(net, x)
    b = x.shape[0]
    z1 = _kernels.conv3x3_forward(x, net.conv_w, net.conv_b)
    if train:
        mu = z1.mean(axis=(0, 2, 3))
        var = z1.var(axis=(0, 2, 3))
        m = b * z1.shape[2] * z1.shape[3]
        net.bn_mean = (1.0 - net.bn_momentum) * net.bn_mean + net.bn_momentum * mu
        unbiased = var * m / (m - 1) if m > 1 else var
        net.bn_var = (1.0 - net.bn_momentum) * net.bn_var + net.bn_momentum * unbiased
    else:
        mu = net.bn_mean
        var = net.bn_var
    inv_std = 1.0 / np.sqrt(var + net.bn_eps)
    xhat = (z1 - mu[None, :, None, None]) * inv_std[None, :, None, None]
    z2 = net.bn_gamma[None, :, None, None] * xhat + net.bn_beta[None, :, None, None]
    a2 = np.maximum(z2, 0.0)
    p3, pool_idx = _kernels.maxpool3x3_forward(a2)
    flat = p3.reshape(b, net.n_features)
    h1 = flat @ net.fc1_w.T + net.fc1_b
    a1 = np.maximum(h1, 0.0)
    logits = a1 @ net.fc2_w.T + net.fc2_b
    if cache is not None:
        cache.update(x=x, z1=z1, mu=mu, var=var, inv_std=inv_std, xhat=xhat,
                     z2=z2, a2=a2, pool_idx=pool_idx, flat=flat, h1=h1, a1=a1,
                     logits=logits)
    return logits


def softmax(logits: np.ndarray) -> np.ndarray:
    """Row-wise stabilized softmax."""
    z = np.asarray(logits, dtype=float)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def cross_entropy(logits, y) -> float:
    """Multi-class cross-entropy of one logit vector against class y."""
    z = np.asarray(logits, dtype=float)
    zmax = z.max()
    lse = zmax + np.log(np.exp(z - zmax).sum())
    return float(lse - z[int(y)])


def _batch_cross_entropy(logits: np.ndarray, y: np.ndarray) -> np.ndarray:
    zmax = logits.max(axis=1, keepdims=True)
    lse = zmax[:, 0] + np.log(np.exp(logits - zmax).sum(axis=1))
    return lse - logits[np.arange(len(y)), y]


def backward(net: DiscriminatorNet, x, y) -> tuple[float, dict[str, np.ndarray]]:
    """Mean cross-entropy over the batch and its exact parameter gradients.

    Runs the train-mode forward pass internally (batch statistics, running
    stats updated) and backpropagates through it, including the batch-norm
    statistics.
    """
    y = np.asarray(y, dtype=np.int64)
    cache: dict = {}
    logits = forward(net, x, train=True, cache=cache)
    b = logits.shape[0]
    losses = _batch_cross_entropy(logits, y)
    loss = float(losses.mean())

    probs = softmax(logits)
    dlogits = probs
    dlogits[np.arange(b), y] -= 1.0
    dlogits /= b

    grads: dict[str, np.ndarray] = {}
    grads["fc2_w"] = dlogits.T @ cache["a1"]
    grads["fc2_b"] = dlogits.sum(axis=0)
    da1 = dlogits @ net.fc2_w
    dh1 = da1 * (cache["h1"] > 0.0)
    grads["fc1_w"] = dh1.T @ cache["flat"]
    grads["fc1_b"] = dh1.sum(axis=0)
    dflat = dh1 @ net.fc1_w
    dp3 = dflat.reshape(b, net.conv_channels, net.n_robots, net.n_cols)
    da2 = _kernels.maxpool3x3_backward(dp3, cache["pool_idx"],
                                       net.n_robots, net.n_cols)
    dz2 = da2 * (cache["z2"] > 0.0)
    xhat = cache["xhat"]
    grads["bn_gamma"] = (dz2 * xhat).sum(axis=(0, 2, 3))
    grads["bn_beta"] = dz2.sum(axis=(0, 2, 3))

    # backprop through the batch statistics
    m = b * dz2.shape[2] * dz2.shape[3]
    inv_std = cache["inv_std"]
    dxhat = dz2 * net.bn_gamma[None, :, None, None]
    centered = cache["z1"] - cache["mu"][None, :, None, None]
    dvar = (dxhat * centered).sum(axis=(0, 2, 3)) * (-0.5) * inv_std ** 3
    dmu = (-(dxhat.sum(axis=(0, 2, 3))) * inv_std
           + dvar * (-2.0 / m) * centered.sum(axis=(0, 2, 3)))
    dz1 = (dxhat * inv_std[None, :, None, None]
           + dvar[None, :, None, None] * 2.0 * centered / m
           + dmu[None, :, None, None] / m)

    dx, dw, db = _kernels.conv3x3_backward(cache["x"], net.conv_w, dz1)
    grads["conv_w"] = dw
    grads["conv_b"] = db
    return loss, grads


@dataclass
class OptimizerState:
    """SGD with classical momentum: v <- mu v + g, theta <- theta - lr v."""

    learning_rate: float = 0.025
    momentum: float = 0.9
    velocity: dict[str, np.ndarray] = field(default_factory=dict)


def sgd_step(net: DiscriminatorNet, grads: dict[str, np.ndarray],
             opt: OptimizerState) -> None:
    """Apply one momentum-SGD update in place."""
    for name in PARAM_NAMES:
        g = grads[name]
        p = getattr(net, name)
        if g.shape != p.shape:
            raise ValueError(f"gradient shape mismatch for {name}: "
                             f"{g.shape} vs {p.shape}")
        v = opt.velocity.get(name)
        if v is None:
            v = np.zeros_like(p)
        v = opt.momentum * v + g
        opt.velocity[name] = v
        setattr(net, name, p - opt.learning_rate * v)


def train_epoch(net: DiscriminatorNet, xs: np.ndarray, ys: np.ndarray,
                opt: OptimizerState, batch_size: int,
                rng: np.random.Generator) -> float:
    """One shuffled pass over the dataset; returns the mean sample loss."""
    n = xs.shape[0]
    if n == 0:
        raise ValueError("empty dataset")
    order = rng.permutation(n)
    total = 0.0
    for start in range(0, n, batch_size):
        idx = order[start:start + batch_size]
        loss, grads = backward(net, xs[idx], ys[idx])
        sgd_step(net, grads, opt)
        total += loss * len(idx)
    return total / n


def _eval_logits(net: DiscriminatorNet, xs: np.ndarray,
                 chunk: int = 512) -> np.ndarray:
    outs = [forward(net, xs[s:s + chunk], train=False)
            for s in range(0, xs.shape[0], chunk)]
    return np.concatenate(outs, axis=0)


def accuracy(net: DiscriminatorNet, xs: np.ndarray, ys: np.ndarray) -> float:
    """Fraction of windows whose argmax logit (first index on ties) is correct."""
    if xs.shape[0] == 0:
        raise ValueError("empty dataset")
    pred = np.argmax(_eval_logits(net, xs), axis=1)
    return float((pred == ys).mean())


def privacy_loss(net: DiscriminatorNet, xs: np.ndarray, ys: np.ndarray,
                 gamma: float) -> float:
    """Reciprocal of the accumulated cross-entropy over a window set.

    Small values mean a confused adversary (good privacy); the ceiling 1/gamma
    is approached when the discriminator is confidently correct everywhere.
    """
    if xs.shape[0] == 0:
        raise ValueError("empty window set")
    logits = _eval_logits(net, xs)
    total = float(_batch_cross_entropy(logits, np.asarray(ys, np.int64)).sum())
    return 1.0 / (total + gamma)


def _tensors(net: DiscriminatorNet) -> dict[str, np.ndarray]:
    out = {name: getattr(net, name) for name in _TENSOR_ORDER[:-2]}
    out["bn_eps"] = np.array(net.bn_eps)
    out["bn_momentum"] = np.array(net.bn_momentum)
    return out


def save_weights(net: DiscriminatorNet, path) -> None:
    """Serialize all tensors (running stats included) to `path`."""
    tensors = _tensors(net)
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<II", CHECKPOINT_VERSION, len(_TENSOR_ORDER)))
    for name in _TENSOR_ORDER:
        arr = np.ascontiguousarray(tensors[name], dtype="<f8")
        raw = name.encode()
        buf.write(struct.pack("<I", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<I", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        buf.write(arr.tobytes())
    data = buf.getvalue()
    if hasattr(path, "write"):
        path.write(data)
    else:
        with open(path, "wb") as fh:
            fh.write(data)


def _read_exact(fh, n: int) -> bytes:
    data = fh.read(n)
    if len(data) != n:
        raise CheckpointError("truncated checkpoint file")
    return data


def load_weights(path, expected_channels: int | None = None,
                 expected_classes: int | None = None) -> DiscriminatorNet:
    """Rebuild a net from a checkpoint; shapes come from the file.

    expected_channels / expected_classes assert compatibility with the run
    and raise CheckpointError naming the offending layer on mismatch.
    """
    if hasattr(path, "read"):
        fh = path
        close = False
    else:
        fh = open(path, "rb")
        close = True
    try:
        if _read_exact(fh, 4) != CHECKPOINT_MAGIC:
            raise CheckpointError("bad magic bytes: not a discriminator checkpoint")
        version, count = struct.unpack("<II", _read_exact(fh, 8))
        if version != CHECKPOINT_VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version}")
        tensors: dict[str, np.ndarray] = {}
        for _ in range(count):
            (name_len,) = struct.unpack("<I", _read_exact(fh, 4))
            name = _read_exact(fh, name_len).decode()
            (rank,) = struct.unpack("<I", _read_exact(fh, 4))
            shape = struct.unpack(f"<{rank}Q", _read_exact(fh, 8 * rank))
            size = int(np.prod(shape)) if rank else 1
            data = np.frombuffer(_read_exact(fh, 8 * size), dtype="<f8")
            tensors[name] = data.reshape(shape).astype(float)
    finally:
        if close:
            fh.close()
    missing = [n for n in _TENSOR_ORDER if n not in tensors]
    if missing:
        raise CheckpointError(f"checkpoint missing tensors: {missing}")

    conv_w = tensors["conv_w"]
    fc1_w = tensors["fc1_w"]
    fc2_w = tensors["fc2_w"]
    if conv_w.ndim != 4 or fc1_w.ndim != 2 or fc2_w.ndim != 2:
        raise CheckpointError("checkpoint tensor ranks are inconsistent")
    conv_channels, in_channels = conv_w.shape[0], conv_w.shape[1]
    n_robots = fc2_w.shape[0]
    if fc1_w.shape[1] % (conv_channels * n_robots) != 0:
        raise CheckpointError("layer fc1_w: feature count does not match "
                              "conv channels and class count")
    n_cols = fc1_w.shape[1] // (conv_channels * n_robots)
    if expected_channels is not None and in_channels != expected_channels:
        raise CheckpointError(
            f"input layer conv_w: checkpoint has {in_channels} channels, "
            f"run expects {expected_channels}")
    if expected_classes is not None and n_robots != expected_classes:
        raise CheckpointError(
            f"output layer fc2_w: checkpoint is for N={n_robots}, "
            f"run expects N={expected_classes}")

    net = DiscriminatorNet(in_channels, n_robots, n_cols=n_cols,
                           conv_channels=conv_channels,
                           hidden=fc1_w.shape[0],
                           bn_eps=float(tensors["bn_eps"].reshape(-1)[0]),
                           bn_momentum=float(
                               tensors["bn_momentum"].reshape(-1)[0]))
    for name in _TENSOR_ORDER[:-2]:
        current = getattr(net, name)
        if tensors[name].shape != current.shape:
            raise CheckpointError(
                f"layer {name}: checkpoint shape {tensors[name].shape} "
                f"does not match {current.shape}")
        setattr(net, name, tensors[name])
    return net


def net_to_bytes(net: DiscriminatorNet) -> bytes:
    buf = io.BytesIO()
    save_weights(net, buf)
    return buf.getvalue()


def net_from_bytes(data: bytes) -> DiscriminatorNet:
    return load_weights(io.BytesIO(data))
