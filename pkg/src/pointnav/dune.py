"""Neural encoder mapping body-frame obstacle points to distance multipliers.

The network predicts the edge multipliers ``mu`` of the dual distance
problem; the separating direction ``lam`` is rebuilt from ``mu`` and the
robot pose, so the stationarity residual vanishes identically.
"""

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .distance import exact_distance_batch
from .errors import TrainingDiverged, WeightsFormatError
from .geometry import PointFlow, rectangle

HIDDEN_WIDTHS = (32, 64, 128, 64, 32)

_MAGIC = b"DUNEW\x00\x00\x00"
_FORMAT_VERSION = 1

DEFAULT_WEIGHTS = Path(__file__).with_name("data") / "default_rect_1.0x0.6.dunew"
DEFAULT_LENGTH = 1.0
DEFAULT_WIDTH = 0.6


class EncoderNet:
    """Six-layer ReLU perceptron ``R^2 -> R^l`` with a ReLU output.

    The output nonlinearity makes every predicted multiplier nonnegative by
    construction.
    """

    def __init__(self, weights, biases):
        if len(weights) != len(biases):
            raise ValueError("need one bias per weight matrix")
        self.weights = [np.ascontiguousarray(W, dtype=float) for W in weights]
        self.biases = [np.ascontiguousarray(b, dtype=float) for b in biases]
        for W, b, W_next in zip(self.weights, self.biases, self.weights[1:] + [None]):
            if W.shape[1] != b.shape[0] or (W_next is not None and W.shape[1] != W_next.shape[0]):
                raise ValueError("inconsistent layer shapes")

    @classmethod
    def initialize(cls, l, seed=0, hidden=HIDDEN_WIDTHS, input_scale=1.0):
        """He-initialized network; ``input_scale`` is the typical input magnitude."""
        rng = np.random.default_rng(seed)
        widths = (2,) + tuple(hidden) + (l,)
        weights, biases = [], []
        for k, (fan_in, fan_out) in enumerate(zip(widths[:-1], widths[1:])):
            std = np.sqrt(2.0 / fan_in)
            if k == 0:
                std /= input_scale
            weights.append(rng.normal(0.0, std, size=(fan_in, fan_out)))
            biases.append(np.zeros(fan_out))
        # A small positive output bias keeps output units alive at the start.
        biases[-1][:] = 0.1
        return cls(weights, biases)

    @property
    def widths(self):
        return (self.weights[0].shape[0],) + tuple(W.shape[1] for W in self.weights)

    @property
    def l(self):
        return self.widths[-1]

    @property
    def num_parameters(self):
        return sum(W.size + b.size for W, b in zip(self.weights, self.biases))

    def copy(self):
        return EncoderNet([W.copy() for W in self.weights], [b.copy() for b in self.biases])

    def __call__(self, points):
        a = np.asarray(points, dtype=float)
        lead = a.shape[:-1]
        a = a.reshape(-1, 2)
        for W, b in zip(self.weights, self.biases):
            a = a @ W
            a += b
            np.maximum(a, 0.0, out=a)
        return a.reshape(lead + (a.shape[-1],))

    def _forward_cached(self, x):
        acts = [x]
        for W, b in zip(self.weights, self.biases):
            acts.append(np.maximum(acts[-1] @ W + b, 0.0))
        return acts

    def _backward(self, acts, grad_out):
        """Gradients of a loss w.r.t. all parameters given ``dloss/doutput``."""
        gW = [None] * len(self.weights)
        gb = [None] * len(self.weights)
        delta = grad_out * (acts[-1] > 0.0)
        for k in range(len(self.weights) - 1, -1, -1):
            gW[k] = acts[k].T @ delta
            gb[k] = delta.sum(axis=0)
            if k > 0:
                delta = (delta @ self.weights[k].T) * (acts[k] > 0.0)
        return gW, gb

    # -- serialization -------------------------------------------------

    def to_bytes(self):
        widths = self.widths
        header = _MAGIC + struct.pack("<III", _FORMAT_VERSION, self.l, len(widths))
        header += struct.pack(f"<{len(widths)}I", *widths)
        body = b"".join(
            W.astype("<f8").tobytes(order="C") + b.astype("<f8").tobytes(order="C")
            for W, b in zip(self.weights, self.biases)
        )
        return header + body

    @classmethod
    def from_bytes(cls, data, shape=None):
        if len(data) < len(_MAGIC) + 12 or data[: len(_MAGIC)] != _MAGIC:
            raise WeightsFormatError("not an encoder weights file")
        off = len(_MAGIC)
        version, l, n = struct.unpack_from("<III", data, off)
        off += 12
        if version != _FORMAT_VERSION:
            raise WeightsFormatError(f"unsupported weights format version {version}")
        widths = struct.unpack_from(f"<{n}I", data, off)
        off += 4 * n
        if widths[-1] != l or widths[0] != 2:
            raise WeightsFormatError("layer widths inconsistent with header")
        expected = sum(a * b + b for a, b in zip(widths[:-1], widths[1:])) * 8
        if len(data) - off != expected:
            raise WeightsFormatError(
                f"weights payload has {len(data) - off} bytes, expected {expected}"
            )
        if shape is not None and shape.l != l:
            raise WeightsFormatError(
                f"weights were trained for {l} edges but the robot shape has {shape.l}"
            )
        weights, biases = [], []
        for a, b in zip(widths[:-1], widths[1:]):
            weights.append(np.frombuffer(data, "<f8", a * b, off).reshape(a, b).astype(float))
            off += 8 * a * b
            biases.append(np.frombuffer(data, "<f8", b, off).astype(float))
            off += 8 * b
        return cls(weights, biases)

    def save(self, path):
        with open(path, "wb") as fh:
            fh.write(self.to_bytes())

    @classmethod
    def load(cls, path, shape=None):
        with open(path, "rb") as fh:
            return cls.from_bytes(fh.read(), shape=shape)


@dataclass(frozen=True)
class TrainConfig:
    n_samples: int = 50_000
    r_max: float = 10.0
    holdout_fraction: float = 0.1
    epochs: int = 150
    batch_size: int = 256
    learning_rate: float = 1e-3
    w_mu: float = 1.0
    w_d: float = 5.0
    w_c: float = 1.0
    d_interior_cap: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if self.n_samples < 1 or self.r_max <= 0 or self.batch_size < 1 or self.epochs < 0:
            raise ValueError("invalid training configuration")
        if not 0.0 <= self.holdout_fraction < 1.0:
            raise ValueError("holdout_fraction must lie in [0, 1)")


@dataclass(frozen=True, eq=False)
class Dataset:
    points: np.ndarray
    mu: np.ndarray
    d: np.ndarray

    def __len__(self):
        return self.points.shape[0]

    def split(self, holdout_fraction):
        """Disjoint (train, held-out) split; the held-out part is the tail."""
        n_hold = int(round(len(self) * holdout_fraction))
        cut = len(self) - n_hold
        head = Dataset(self.points[:cut], self.mu[:cut], self.d[:cut])
        tail = Dataset(self.points[cut:], self.mu[cut:], self.d[cut:])
        return head, tail


def sample_training_set(shape, config):
    """Uniform samples in the disc of radius ``r_max`` labeled by the exact oracle."""
    rng = np.random.default_rng(config.seed)
    chunks, total = [], 0
    while total < config.n_samples:
        n = config.n_samples - total
        r = config.r_max * np.sqrt(rng.random(n))
        a = rng.random(n) * 2.0 * np.pi
        pts = np.column_stack([r * np.cos(a), r * np.sin(a)])
        table = exact_distance_batch(pts, shape)
        keep = table.d >= -config.d_interior_cap
        chunks.append((pts[keep], table.mu[keep], table.d[keep]))
        total += int(keep.sum())
    pts, mu, d = (np.concatenate(parts) for parts in zip(*chunks))
    return Dataset(pts[: config.n_samples], mu[: config.n_samples], d[: config.n_samples])


def _batch_loss(net, shape, x, mu_star, d_star, config, with_grad=True):
    acts = net._forward_cached(x)
    mu_hat = acts[-1]
    n = x.shape[0]
    slack = x @ shape.G.T - shape.h
    d_hat = (mu_hat * slack).sum(axis=1)
    lam = mu_hat @ shape.G
    lam_norm = np.sqrt((lam * lam).sum(axis=1))
    excess = np.maximum(lam_norm - 1.0, 0.0)
    # Distance residuals are scaled by the sampling radius so the three terms
    # stay comparable regardless of r_max.
    scale = config.r_max**2
    loss = (
        config.w_mu * ((mu_hat - mu_star) ** 2).sum(axis=1).mean()
        + config.w_d * ((d_hat - d_star) ** 2).mean() / scale
        + config.w_c * (excess**2).mean()
    )
    if not with_grad:
        return loss, None
    grad = 2.0 * config.w_mu * (mu_hat - mu_star) / n
    grad += (2.0 * config.w_d * (d_hat - d_star) / (n * scale))[:, None] * slack
    coef = 2.0 * config.w_c * excess / np.maximum(lam_norm, 1e-12) / n
    grad += coef[:, None] * (lam @ shape.G.T)
    return loss, net._backward(acts, grad)


def train(net, dataset, shape, config, callback=None):
    """Fit ``net`` in place with mini-batch Adam and a cosine learning-rate decay.

    Returns ``(net, history)`` where ``history`` holds the mean training loss
    of every epoch. Raises :class:`TrainingDiverged` on a non-finite loss.
    """
    if len(dataset) == 0:
        raise ValueError("empty training set")
    rng = np.random.default_rng(config.seed + 1)
    params = net.weights + net.biases
    m1 = [np.zeros_like(p) for p in params]
    m2 = [np.zeros_like(p) for p in params]
    beta1, beta2, eps = 0.9, 0.999, 1e-8
    step = 0
    history = []
    n = len(dataset)
    for epoch in range(config.epochs):
        lr = config.learning_rate * 0.5 * (1.0 + np.cos(np.pi * epoch / config.epochs))
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, config.batch_size):
            idx = order[start : start + config.batch_size]
            # A blow-up surfaces as a non-finite loss, checked just below.
            with np.errstate(over="ignore", invalid="ignore"):
                loss, (gW, gb) = _batch_loss(
                    net, shape, dataset.points[idx], dataset.mu[idx], dataset.d[idx], config
                )
            if not np.isfinite(loss):
                raise TrainingDiverged(f"non-finite loss at epoch {epoch}")
            total += loss * idx.size
            step += 1
            corr1 = 1.0 - beta1**step
            corr2 = 1.0 - beta2**step
            for p, g, a, b in zip(params, gW + gb, m1, m2):
                a *= beta1
                a += (1.0 - beta1) * g
                b *= beta2
                b += (1.0 - beta2) * g * g
                p -= lr * (a / corr1) / (np.sqrt(b / corr2) + eps)
        history.append(total / n)
        if callback is not None:
            callback(epoch, history[-1])
    return net, history


def distance_errors(net, dataset, shape):
    """Absolute errors ``|mu_hat @ (G p - h) - d*|`` on a labeled dataset."""
    mu_hat = net(dataset.points)
    d_hat = (mu_hat * (dataset.points @ shape.G.T - shape.h)).sum(axis=1)
    return np.abs(d_hat - dataset.d)


def train_encoder(shape, config=None, callback=None):
    """Sample, split, train; returns ``(net, history, held_out_errors)``."""
    config = config or TrainConfig()
    data = sample_training_set(shape, config)
    train_set, held_out = data.split(config.holdout_fraction)
    net = EncoderNet.initialize(shape.l, seed=config.seed, input_scale=config.r_max)
    net, history = train(net, train_set, shape, config, callback=callback)
    errors = distance_errors(net, held_out, shape) if len(held_out) else np.empty(0)
    return net, history, errors


@dataclass(frozen=True, eq=False)
class LatentDistanceFeatures:
    """Per-step, per-point multipliers.

    ``mu`` is ``(H + 1, M, l)``, ``lam`` (world frame) and ``points`` (world
    positions) are ``(H + 1, M, 2)``, ``d_hat`` is ``(H + 1, M)``. ``index``
    maps each column back to the scan point it came from.
    """

    mu: np.ndarray
    lam: np.ndarray
    d_hat: np.ndarray
    points: np.ndarray
    index: np.ndarray = field(default=None)

    @property
    def horizon(self):
        return self.mu.shape[0] - 1

    @property
    def num_points(self):
        return self.mu.shape[1]

    @classmethod
    def empty(cls, horizon, l):
        return cls(
            mu=np.zeros((horizon + 1, 0, l)),
            lam=np.zeros((horizon + 1, 0, 2)),
            d_hat=np.zeros((horizon + 1, 0)),
            points=np.zeros((horizon + 1, 0, 2)),
            index=np.zeros((horizon + 1, 0), dtype=int),
        )


def reconstruct_lambda(mu, G, theta):
    """World-frame ``lam`` with ``lam^T = -mu^T G R(theta)^T`` for each step.

    ``mu`` is ``(H + 1, M, l)`` and ``theta`` is ``(H + 1,)``.
    """
    body = -(mu @ G)  # (H+1, M, 2)
    c, s = np.cos(theta)[:, None], np.sin(theta)[:, None]
    lam = np.empty_like(body)
    lam[..., 0] = c * body[..., 0] - s * body[..., 1]
    lam[..., 1] = s * body[..., 0] + c * body[..., 1]
    return lam


def encode(net, point_flow: PointFlow, plan, shape, max_radius=None):
    """Latent distance features for every point of a point flow.

    Points farther than ``max_radius`` from the robot (outside the region the
    encoder was trained on) get ``d_hat = inf`` so they are never selected.
    """
    plan = np.asarray(plan, dtype=float)
    body = point_flow.body
    n_steps, m = body.shape[:2]
    if m == 0:
        return LatentDistanceFeatures.empty(n_steps - 1, shape.l)
    mu = net(body)
    d_hat = (mu * (body @ shape.G.T - shape.h)).sum(axis=-1)
    if max_radius is not None:
        far = (body * body).sum(axis=-1) > max_radius**2
        d_hat = np.where(far, np.inf, d_hat)
    lam = reconstruct_lambda(mu, shape.G, plan[:, 2])
    index = np.broadcast_to(np.arange(m), (n_steps, m)).copy()
    return LatentDistanceFeatures(
        mu=mu, lam=lam, d_hat=d_hat, points=point_flow.world.copy(), index=index
    )


def sort_and_select(features, m_prime):
    """Keep the ``m_prime`` smallest ``d_hat`` per step, ordered by ``(d_hat, index)``."""
    if m_prime < 1:
        raise ValueError("m_prime must be at least 1")
    if features.num_points <= m_prime:
        order = np.argsort(features.d_hat, axis=1, kind="stable")
    else:
        order = np.argsort(features.d_hat, axis=1, kind="stable")[:, :m_prime]
    take = lambda a: np.take_along_axis(a, order[..., None], axis=1)  # noqa: E731
    return LatentDistanceFeatures(
        mu=take(features.mu),
        lam=take(features.lam),
        d_hat=np.take_along_axis(features.d_hat, order, axis=1),
        points=take(features.points),
        index=np.take_along_axis(features.index, order, axis=1),
    )


def exact_features(point_flow, plan, shape, max_radius=None):
    """Features from the exact oracle instead of the network (reference path)."""
    table = exact_distance_batch(point_flow.body, shape)
    plan = np.asarray(plan, dtype=float)
    d = table.d
    if max_radius is not None:
        far = (point_flow.body**2).sum(axis=-1) > max_radius**2
        d = np.where(far, np.inf, d)
    n_steps, m = point_flow.body.shape[:2]
    return LatentDistanceFeatures(
        mu=table.mu,
        lam=reconstruct_lambda(table.mu, shape.G, plan[:, 2]),
        d_hat=d,
        points=point_flow.world.copy(),
        index=np.broadcast_to(np.arange(m), (n_steps, m)).copy(),
    )


class OracleEncoder:
    """Drop-in stand-in for :class:`EncoderNet` that returns exact multipliers."""

    def __init__(self, shape):
        self.shape = shape

    @property
    def l(self):
        return self.shape.l

    def __call__(self, points):
        return exact_distance_batch(points, self.shape).mu


def default_shape():
    """The 1.0 m x 0.6 m rectangle the shipped weights were trained for."""
    return rectangle(DEFAULT_LENGTH, DEFAULT_WIDTH)


def load_default_encoder():
    """Shipped encoder weights (trained with ``TrainConfig()`` defaults) and their shape."""
    shape = default_shape()
    return EncoderNet.load(DEFAULT_WEIGHTS, shape), shape
