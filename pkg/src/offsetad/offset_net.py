"""Per-point offset regressor trained on pseudo-anomalies.

The network is a three-layer MLP with PReLU activations mapping a feature
row to a 3D offset. The loss is the sum of a per-point L1 distance term and
a negative-cosine direction term; the direction term is zero for points
whose ground-truth offset is zero. Gradients are derived by hand.
"""

from __future__ import annotations

import io
import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

from .norm_as import generate_pseudo_anomaly, generate_random_direction_anomaly
from .pointcloud import PointCloud, PointCloudError, normalize_params, random_rotation
from .voxel import NeighborhoodCache, extract_features, voxelize

EPS = 1e-8
ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8
PARAM_NAMES = ("W1", "b1", "a1", "W2", "b2", "a2", "W3", "b3")
VARIANTS = ("full", "dist_only", "dir_only", "random_direction")


class NumericError(ArithmeticError):
    """A non-finite value appeared in parameters or gradients."""


@dataclass
class OffsetNet:
    """Parameters of the C -> H -> H -> 3 offset MLP."""

    params: dict

    def __post_init__(self):
        self.params = {k: np.array(v, dtype=np.float64) for k, v in self.params.items()}

    @classmethod
    def init(cls, in_dim: int, hidden: int = 64, rng: Optional[np.random.Generator] = None):
        rng = rng if rng is not None else np.random.default_rng(0)

        def glorot(fan_in, fan_out):
            lim = math.sqrt(6.0 / (fan_in + fan_out))
            return rng.uniform(-lim, lim, size=(fan_in, fan_out))

        return cls(
            {
                "W1": glorot(in_dim, hidden),
                "b1": np.zeros(hidden),
                "a1": np.array(0.25),
                "W2": glorot(hidden, hidden),
                "b2": np.zeros(hidden),
                "a2": np.array(0.25),
                "W3": glorot(hidden, 3),
                "b3": np.zeros(3),
            }
        )

    @classmethod
    def zeros(cls, in_dim: int, hidden: int = 64):
        net = cls.init(in_dim, hidden)
        return cls({k: np.zeros_like(v) for k, v in net.params.items()})

    @property
    def in_dim(self) -> int:
        return self.params["W1"].shape[0]

    @property
    def hidden(self) -> int:
        return self.params["W1"].shape[1]

    def copy(self) -> "OffsetNet":
        return OffsetNet({k: np.array(v, copy=True) for k, v in self.params.items()})

    def n_params(self) -> int:
        return sum(v.size for v in self.params.values())


@dataclass
class LossBreakdown:
    l_dist: float
    l_dir: float

    @property
    def l_off(self) -> float:
        return self.l_dist + self.l_dir


# ---------------------------------------------------------------------------
# forward / losses
# ---------------------------------------------------------------------------


def prelu(z, a):
    return z * _prelu_slope(z, a)


def _prelu_slope(z, a):
    # derivative at 0 is taken from the positive branch
    slope = np.less(z, 0).astype(np.float64)
    slope *= a - 1.0
    slope += 1.0
    return slope


def _forward_cache(net: OffsetNet, X: np.ndarray):
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != net.in_dim:
        raise ValueError(f"feature width {X.shape[-1]} != network input width {net.in_dim}")
    p = net.params
    z1 = X @ p["W1"]
    z1 += p["b1"]
    s1 = _prelu_slope(z1, p["a1"])
    h1 = z1 * s1
    z2 = h1 @ p["W2"]
    z2 += p["b2"]
    s2 = _prelu_slope(z2, p["a2"])
    h2 = z2 * s2
    y = h2 @ p["W3"]
    y += p["b3"]
    return y, (X, z1, s1, h1, z2, s2, h2)


def forward(net: OffsetNet, features: np.ndarray) -> np.ndarray:
    """Predicted offsets, shape (N, 3)."""
    return _forward_cache(net, features)[0]


def _check_pair(pred, gt):
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ValueError(f"prediction shape {pred.shape} != target shape {gt.shape}")
    return pred, gt


def loss_dist(pred, gt) -> float:
    """Mean over points of the L1 norm of the residual."""
    pred, gt = _check_pair(pred, gt)
    return float(np.abs(pred - gt).sum(axis=1).mean())


def _unit_gt(gt):
    return gt / (np.linalg.norm(gt, axis=1, keepdims=True) + EPS)


def loss_dir(pred, gt) -> float:
    """Negative mean cosine; zero ground-truth rows contribute nothing."""
    pred, gt = _check_pair(pred, gt)
    u = pred / (np.linalg.norm(pred, axis=1, keepdims=True) + EPS)
    return float(-np.einsum("ij,ij->i", u, _unit_gt(gt)).mean())


def _dloss_dpred(pred, gt, variant):
    n = len(pred)
    grad = np.zeros_like(pred)
    if variant != "dir_only":
        grad += np.sign(pred - gt) / n
    if variant != "dist_only":
        g = _unit_gt(gt)
        s = np.linalg.norm(pred, axis=1)
        se = s + EPS
        dot = np.einsum("ij,ij->i", pred, g)
        coef = np.divide(dot, s * se * se, out=np.zeros_like(s), where=s > 0)
        grad -= (g / se[:, None] - coef[:, None] * pred) / n
    return grad


def _losses(pred, gt, variant):
    ld = loss_dist(pred, gt) if variant != "dir_only" else 0.0
    lr = loss_dir(pred, gt) if variant != "dist_only" else 0.0
    return LossBreakdown(ld, lr)


def _backward(net, cache, dy, want_dx=False):
    X, z1, s1, h1, z2, s2, h2 = cache
    p = net.params
    grads = {"W3": h2.T @ dy, "b3": dy.sum(axis=0)}
    dh2 = dy @ p["W3"].T
    # d(prelu)/da is z on the negative side, 0 elsewhere
    grads["a2"] = np.array(np.vdot(dh2, np.minimum(z2, 0.0)))
    dz2 = dh2
    dz2 *= s2
    grads["W2"] = h1.T @ dz2
    grads["b2"] = dz2.sum(axis=0)
    dh1 = dz2 @ p["W2"].T
    grads["a1"] = np.array(np.vdot(dh1, np.minimum(z1, 0.0)))
    dz1 = dh1
    dz1 *= s1
    grads["W1"] = X.T @ dz1
    grads["b1"] = dz1.sum(axis=0)
    dX = dz1 @ p["W1"].T if want_dx else None
    return grads, dX


def _check_finite(grads):
    for name in PARAM_NAMES:
        if not np.all(np.isfinite(grads[name])):
            raise NumericError(f"non-finite gradient for parameter {name}")


def loss_and_grad(net: OffsetNet, features, gt, variant: str = "full"):
    """Loss breakdown and gradients of the trained objective w.r.t. every parameter.

    `variant` selects the objective: both terms ("full", "random_direction"),
    only the distance term ("dist_only") or only the direction term ("dir_only").
    """
    if variant not in VARIANTS:
        raise ValueError(f"unknown variant {variant!r}")
    pred, cache = _forward_cache(net, features)
    pred, gt = _check_pair(pred, gt)
    losses = _losses(pred, gt, variant)
    grads, _ = _backward(net, cache, _dloss_dpred(pred, gt, variant))
    _check_finite(grads)
    return losses, grads


def objective(net, features, gt, variant="full") -> float:
    pred = forward(net, features)
    return _losses(pred, np.asarray(gt, dtype=np.float64), variant).l_off


def export_attention(net: OffsetNet, features, gt, variant: str = "full") -> np.ndarray:
    """Per-point saliency: L2 norm of the loss gradient w.r.t. each feature row."""
    pred, cache = _forward_cache(net, features)
    pred, gt = _check_pair(pred, gt)
    _, dX = _backward(net, cache, _dloss_dpred(pred, gt, variant), want_dx=True)
    return np.linalg.norm(dX, axis=1)


# ---------------------------------------------------------------------------
# optimisation
# ---------------------------------------------------------------------------


@dataclass
class AdamState:
    m: dict
    v: dict
    t: int = 0

    @classmethod
    def for_net(cls, net: OffsetNet):
        return cls(
            {k: np.zeros_like(v) for k, v in net.params.items()},
            {k: np.zeros_like(v) for k, v in net.params.items()},
        )


def adam_step(net: OffsetNet, grads: dict, state: AdamState, lr: float):
    """One Adam update. Returns a new net and a new state; inputs are untouched."""
    t = state.t + 1
    new_params, m_new, v_new = {}, {}, {}
    for name, theta in net.params.items():
        g = grads[name]
        if g.shape != theta.shape or state.m[name].shape != theta.shape:
            raise ValueError(f"shape mismatch for {name}")
        m = ADAM_BETA1 * state.m[name] + (1 - ADAM_BETA1) * g
        v = ADAM_BETA2 * state.v[name] + (1 - ADAM_BETA2) * g * g
        m_hat = m / (1 - ADAM_BETA1**t)
        v_hat = v / (1 - ADAM_BETA2**t)
        upd = theta - lr * m_hat / (np.sqrt(v_hat) + ADAM_EPS)
        if not np.all(np.isfinite(upd)):
            raise NumericError(f"non-finite value in parameter {name} after update")
        new_params[name], m_new[name], v_new[name] = upd, m, v
    return OffsetNet(new_params), AdamState(m_new, v_new, t)


def cosine_lr(t: int, T: int, lr0: float) -> float:
    if T <= 0:
        raise ValueError("total steps T must be positive")
    if not 0 <= t <= T:
        raise ValueError(f"step {t} outside [0, {T}]")
    return 0.5 * lr0 * (1.0 + math.cos(math.pi * t / T))


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------


@dataclass
class TrainConfig:
    epochs: int = 1000
    batch_size: int = 32
    lr0: float = 0.001
    replication: int = 100
    beta_range: tuple = (0.06, 0.12)
    patches: int = 64
    voxel_size: float = 0.03
    seed: int = 0
    variant: str = "full"
    hidden: int = 64
    feature_dim: int = 32
    k: int = 16

    def __post_init__(self):
        self.beta_range = tuple(float(b) for b in self.beta_range)
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        for name in ("batch_size", "replication", "patches", "hidden", "feature_dim", "k"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.epochs < 0:
            raise ValueError("epochs must be non-negative")
        if self.lr0 <= 0 or self.voxel_size <= 0:
            raise ValueError("lr0 and voxel_size must be positive")
        lo, hi = self.beta_range
        if not 0 < lo <= hi:
            raise ValueError(f"invalid beta range {self.beta_range}")


@dataclass
class TrainResult:
    net: OffsetNet
    history: list = field(default_factory=list)  # LossBreakdown per epoch


def sample_rng(seed: int, stream: int, *keys: int) -> np.random.Generator:
    """Independent generator for (master seed, stream id, keys...)."""
    return np.random.default_rng([int(seed), int(stream), *map(int, keys)])


STREAM_INIT, STREAM_ORDER, STREAM_SAMPLE = 0, 1, 2


def make_training_sample(
    cloud: PointCloud,
    cfg: TrainConfig,
    rng: np.random.Generator,
    cache: Optional[NeighborhoodCache] = None,
):
    """Rotate, normalise, inject one pseudo-anomaly and featurise it.

    With a `cache` built from `cloud`, only neighbourhoods touched by the
    displaced patch are recomputed; the result matches the uncached path.
    """
    rotated = random_rotation(cloud, rng)
    center, scale = normalize_params(rotated)
    clean = rotated.replace(points=(rotated.points - center) / scale)
    gen = generate_random_direction_anomaly if cfg.variant == "random_direction" else generate_pseudo_anomaly
    sample = gen(clean, cfg.patches, cfg.beta_range, rng)
    grid = voxelize(sample.cloud, cfg.voxel_size)
    if cache is None:
        feats = extract_features(sample.cloud, grid, k=cfg.k, dim=cfg.feature_dim)
    else:
        moved = np.flatnonzero(np.any(sample.gt_offsets != 0, axis=1))
        feats = cache.features(sample.cloud, grid, scale, moved, dim=cfg.feature_dim)
    return sample, feats


def train(
    dataset: Sequence[PointCloud],
    cfg: TrainConfig,
    progress: Optional[Callable[[int, LossBreakdown], None]] = None,
) -> TrainResult:
    """Train an offset net; fully determined by `cfg.seed`."""
    if not dataset:
        raise ValueError("training set is empty")
    for c in dataset:
        if c.normals is None:
            raise PointCloudError("training clouds need normals")
    net = OffsetNet.init(cfg.feature_dim, cfg.hidden, sample_rng(cfg.seed, STREAM_INIT))
    state = AdamState.for_net(net)
    n_samples = len(dataset) * cfg.replication
    steps_per_epoch = math.ceil(n_samples / cfg.batch_size)
    total = cfg.epochs * steps_per_epoch
    caches = [NeighborhoodCache(c, cfg.k) for c in dataset]
    history = []
    step = 0
    for epoch in range(cfg.epochs):
        order = sample_rng(cfg.seed, STREAM_ORDER, epoch).permutation(n_samples)
        ep_dist = ep_dir = 0.0
        for start in range(0, n_samples, cfg.batch_size):
            batch = order[start : start + cfg.batch_size]
            acc = {k: np.zeros_like(v) for k, v in net.params.items()}
            for slot in batch:
                rng = sample_rng(cfg.seed, STREAM_SAMPLE, epoch, slot)
                src = slot % len(dataset)
                sample, feats = make_training_sample(dataset[src], cfg, rng, caches[src])
                losses, grads = loss_and_grad(net, feats, sample.gt_offsets, cfg.variant)
                for k in acc:
                    acc[k] += grads[k]
                ep_dist += losses.l_dist
                ep_dir += losses.l_dir
            for k in acc:
                acc[k] /= len(batch)
            net, state = adam_step(net, acc, state, cosine_lr(step, total, cfg.lr0))
            step += 1
        record = LossBreakdown(ep_dist / n_samples, ep_dir / n_samples)
        history.append(record)
        if progress is not None:
            progress(epoch, record)
    return TrainResult(net, history)


# ---------------------------------------------------------------------------
# persistence
# ---------------------------------------------------------------------------

CHECKPOINT_MAGIC = "offsetad-checkpoint 1"


def serialize_checkpoint(net: OffsetNet) -> bytes:
    """Text layout: magic line, then per parameter a header line
    `name ndim dim...` followed by one line of row-major values."""
    out = io.StringIO()
    out.write(CHECKPOINT_MAGIC + "\n")
    for name in PARAM_NAMES:
        arr = np.asarray(net.params[name])
        out.write(" ".join([name, str(arr.ndim), *map(str, arr.shape)]) + "\n")
        out.write(" ".join(repr(float(x)) for x in arr.ravel()) + "\n")
    return out.getvalue().encode("utf-8")


def parse_checkpoint(data) -> OffsetNet:
    if isinstance(data, (bytes, bytearray)):
        data = data.decode("utf-8")
    lines = data.splitlines()
    if not lines or lines[0].strip() != CHECKPOINT_MAGIC:
        raise ValueError("not an offset-net checkpoint")
    body = lines[1:]
    if len(body) % 2:
        raise ValueError("truncated checkpoint")
    params = {}
    for head, vals in zip(body[::2], body[1::2]):
        try:
            parts = head.split()
            name, ndim = parts[0], int(parts[1])
            shape = tuple(int(s) for s in parts[2 : 2 + ndim])
            values = np.array([float(t) for t in vals.split()], dtype=np.float64)
            params[name] = values.reshape(shape)
        except (IndexError, ValueError):
            raise ValueError(f"malformed checkpoint entry {head!r}") from None
    missing = set(PARAM_NAMES) - set(params)
    if missing:
        raise ValueError(f"checkpoint missing parameters: {sorted(missing)}")
    return OffsetNet(params)


def serialize_history(history: Iterable[LossBreakdown]) -> bytes:
    lines = ["epoch,l_dist,l_dir,l_off"]
    for e, h in enumerate(history):
        lines.append(f"{e},{h.l_dist!r},{h.l_dir!r},{h.l_off!r}")
    return ("\n".join(lines) + "\n").encode("utf-8")
