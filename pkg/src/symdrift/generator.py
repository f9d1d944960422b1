"""One-shot generator, stop-gradient drifting loss, training step and sampling.

The generator is a plain tanh MLP, one network per atom count, fed with the
flattened prior noise concatenated to a learned class embedding.  Output is
mean-centred.  Forward and reverse mode are written out by hand in numpy.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Hashable, Sequence

import numpy as np

from .data import Dataset
from .drift import DriftConfig, build_drift_batch_arrays, multi_temperature_drift
from .errors import DataError, InvalidCacheError, InvalidConfigError, ShapeError
from .geometry import Conformation, RandomSource


@dataclass(frozen=True)
class TrainConfig:
    n_classes_per_step: int = 8
    n_pos: int = 30
    n_neg: int = 64
    learning_rate: float = 1e-2
    steps: int = 2000
    seed: int = 0
    drift: DriftConfig = field(default_factory=DriftConfig)
    hidden_widths: tuple[int, ...] = (128, 128, 128)
    embed_dim: int = 8
    init_output_scale: float = 0.1

    def __post_init__(self):
        if self.n_neg < 1:
            raise InvalidConfigError("n_neg must be >= 1 during training")
        if self.n_pos < 1 or self.n_classes_per_step < 1:
            raise InvalidConfigError("n_pos and n_classes_per_step must be >= 1")
        if not self.learning_rate > 0:
            raise InvalidConfigError("learning_rate must be positive")
        if self.steps < 0:
            raise InvalidConfigError("steps must be >= 0")
        object.__setattr__(self, "hidden_widths", tuple(int(w) for w in self.hidden_widths))


@dataclass(eq=False)
class GeneratorParams:
    hidden_widths: tuple[int, ...]
    embed_dim: int
    # class_id -> atom types, in table order
    class_types: dict[str, tuple[int, ...]]
    class_embeddings: dict[str, np.ndarray]
    # n_atoms -> [(W, b), ...] from input to output
    networks: dict[int, list[tuple[np.ndarray, np.ndarray]]]
    seed: int = 0

    def layer_dims(self, n_atoms: int) -> list[int]:
        return [3 * n_atoms + self.embed_dim, *self.hidden_widths, 3 * n_atoms]

    def arrays(self) -> list[tuple[str, np.ndarray]]:
        """All parameter arrays in the canonical (checkpoint) order."""
        out = []
        for n in sorted(self.networks):
            for li, (w, b) in enumerate(self.networks[n]):
                out.append((f"net{n}.W{li}", w))
                out.append((f"net{n}.b{li}", b))
        for cid in self.class_types:
            out.append((f"emb.{cid}", self.class_embeddings[cid]))
        return out

    def map(self, fn, *others: GeneratorParams) -> GeneratorParams:
        nets = {
            n: [
                (fn(w, *(o.networks[n][li][0] for o in others)), fn(b, *(o.networks[n][li][1] for o in others)))
                for li, (w, b) in enumerate(layers)
            ]
            for n, layers in self.networks.items()
        }
        embs = {cid: fn(e, *(o.class_embeddings[cid] for o in others)) for cid, e in self.class_embeddings.items()}
        return GeneratorParams(self.hidden_widths, self.embed_dim, dict(self.class_types), embs, nets, self.seed)

    def zeros_like(self) -> GeneratorParams:
        return self.map(np.zeros_like)

    def flatten(self) -> np.ndarray:
        return np.concatenate([a.reshape(-1) for _, a in self.arrays()])

    def unflatten(self, flat: np.ndarray) -> GeneratorParams:
        """Inverse of flatten: same architecture, values taken from ``flat``."""
        flat = np.asarray(flat, dtype=float)
        if flat.shape != (self.n_parameters(),):
            raise ShapeError(f"expected {self.n_parameters()} values, got shape {flat.shape}")
        pieces = iter(np.split(flat, np.cumsum([a.size for _, a in self.arrays()])[:-1]))
        return self.map(lambda a: next(pieces).reshape(a.shape).copy())

    def n_parameters(self) -> int:
        return sum(a.size for _, a in self.arrays())


def init_generator(
    class_types: dict[str, Sequence[int]],
    hidden_widths: Sequence[int] = (128, 128, 128),
    embed_dim: int = 8,
    seed: int = 0,
    output_scale: float = 0.1,
) -> GeneratorParams:
    rng = RandomSource(seed)
    table = {str(k): tuple(int(t) for t in v) for k, v in class_types.items()}
    hidden = tuple(int(w) for w in hidden_widths)
    nets: dict[int, list] = {}
    for n in sorted({len(t) for t in table.values()}):
        dims = [3 * n + embed_dim, *hidden, 3 * n]
        layers = []
        for li, (fan_in, fan_out) in enumerate(zip(dims[:-1], dims[1:])):
            scale = 1.0 / np.sqrt(fan_in)
            if li == len(dims) - 2:
                scale *= output_scale
            layers.append((scale * rng.normal((fan_in, fan_out)), np.zeros(fan_out)))
        nets[n] = layers
    embs = {cid: rng.normal(embed_dim) for cid in table}
    return GeneratorParams(hidden, int(embed_dim), table, embs, nets, int(seed))


@dataclass(frozen=True, eq=False)
class ForwardCache:
    n_atoms: int
    class_ids: tuple[str, ...]
    inputs: tuple[np.ndarray, ...]  # input to every linear layer
    hidden: tuple[np.ndarray, ...]  # tanh outputs


def forward_batch(params: GeneratorParams, eps: np.ndarray, class_ids: Sequence[Hashable]) -> tuple[np.ndarray, ForwardCache]:
    """Map (B, N, 3) prior noise to centred (B, N, 3) samples for per-row classes."""
    eps = np.asarray(eps, dtype=np.float64)
    b, n, _ = eps.shape
    cids = tuple(str(c) for c in class_ids)
    if len(cids) != b:
        raise ShapeError("one class id per noise sample is required")
    for cid in cids:
        if cid not in params.class_types:
            raise KeyError(f"unknown class {cid!r}")
        if len(params.class_types[cid]) != n:
            raise ShapeError(f"class {cid} has {len(params.class_types[cid])} atoms, noise has {n}")
    layers = params.networks[n]
    h = np.concatenate([eps.reshape(b, -1), np.stack([params.class_embeddings[c] for c in cids])], axis=1)
    inputs, hidden = [], []
    for li, (w, bias) in enumerate(layers):
        inputs.append(h)
        a = h @ w + bias
        if li < len(layers) - 1:
            h = np.tanh(a)
            hidden.append(h)
        else:
            h = a
    out = h.reshape(b, n, 3)
    out = out - out.mean(axis=1, keepdims=True)
    return out, ForwardCache(n, cids, tuple(inputs), tuple(hidden))


def generator_forward(params: GeneratorParams, eps, class_id) -> tuple[Conformation, ForwardCache]:
    noise = np.asarray(getattr(eps, "noise", eps), dtype=np.float64)
    out, cache = forward_batch(params, noise[None], [class_id])
    return Conformation(out[0], params.class_types[str(class_id)], str(class_id)), cache


def generator_backward(params: GeneratorParams, cache: ForwardCache, cotangent: np.ndarray) -> GeneratorParams:
    """Gradient of <cotangent, centred output> with respect to every parameter."""
    cot = np.asarray(cotangent, dtype=np.float64)
    b = cache.inputs[0].shape[0]
    n = cache.n_atoms
    if cot.ndim == 2:
        cot = cot[None]
    if cot.shape != (b, n, 3):
        raise InvalidCacheError(f"cotangent shape {cot.shape} does not match cached forward {(b, n, 3)}")
    layers = params.networks.get(n)
    if layers is None or len(layers) != len(cache.inputs) or layers[0][0].shape[0] != cache.inputs[0].shape[1]:
        raise InvalidCacheError("cache does not match the parameter architecture")
    grads = params.zeros_like()
    # centring is a symmetric projection, so its transpose is itself
    delta = (cot - cot.mean(axis=1, keepdims=True)).reshape(b, -1)
    for li in range(len(layers) - 1, -1, -1):
        w, _ = layers[li]
        gw = cache.inputs[li].T @ delta
        gb = delta.sum(axis=0)
        grads.networks[n][li] = (gw, gb)
        delta = delta @ w.T
        if li > 0:
            delta = delta * (1.0 - cache.hidden[li - 1] ** 2)
    emb_cot = delta[:, 3 * n :]
    for row, cid in enumerate(cache.class_ids):
        grads.class_embeddings[cid] = grads.class_embeddings[cid] + emb_cot[row]
    return grads


def drifting_loss_and_cotangent(points, drifts, normalizer: float | None = None) -> tuple[float, np.ndarray]:
    """Stop-gradient drifting loss mean ||u - sg(u + V)||^2 and its gradient -2 V / count."""
    u = np.asarray(points, dtype=np.float64)
    v = np.asarray(drifts, dtype=np.float64)
    if u.shape != v.shape:
        raise ShapeError(f"points {u.shape} and drifts {v.shape} differ")
    count = float(u.shape[0]) if normalizer is None else float(normalizer)
    u2 = u.reshape(u.shape[0], -1)
    target = u2 + v.reshape(u2.shape)  # frozen
    resid = u2 - target
    loss = float(np.sum(resid * resid) / count)
    return loss, (2.0 * resid / count).reshape(u.shape)


@dataclass(frozen=True, eq=False)
class ClassStep:
    """Everything one class contributed to a training step."""

    class_id: str
    positives: np.ndarray
    noise: np.ndarray
    generated: np.ndarray
    drift: np.ndarray
    points: np.ndarray


def compute_step(params: GeneratorParams, dataset: Dataset, config: TrainConfig, rng: RandomSource):
    """Loss, parameter gradient and per-class record for one mini-batch (no update)."""
    if not dataset.classes:
        raise DataError("dataset is empty")
    n_classes = len(dataset.classes)
    n_c = min(config.n_classes_per_step, n_classes)
    chosen = rng.choice(n_classes, size=n_c, replace=False)
    normalizer = float(n_c * config.n_neg)
    grads = params.zeros_like()
    loss = 0.0
    records = []
    for ci in chosen:
        cls = dataset.classes[int(ci)]
        m = cls.conformers.shape[0]
        if m < 1:
            raise DataError(f"class {cls.class_id} has no conformers")
        pos_idx = rng.choice(m, size=min(config.n_pos, m), replace=False)
        positives = cls.conformers[np.sort(pos_idx)]
        noise = rng.normal((config.n_neg, cls.n_atoms, 3))
        x, cache = forward_batch(params, noise, [cls.class_id] * config.n_neg)
        mask = np.eye(config.n_neg, dtype=bool) if config.drift.exclude_self else None
        batch, back = build_drift_batch_arrays(x, positives, x.copy(), cls.types, config.drift, mask)
        v = multi_temperature_drift(batch, config.drift)
        l, cot_u = drifting_loss_and_cotangent(batch.points, v, normalizer)
        loss += l
        g = generator_backward(params, cache, back.pullback(cot_u))
        grads = grads.map(np.add, g)
        records.append(ClassStep(cls.class_id, positives, noise, x, v, batch.points))
    return loss, grads, records


def sgd_update(params: GeneratorParams, grads: GeneratorParams, lr: float) -> GeneratorParams:
    return params.map(lambda p, g: p - lr * g, grads)


def train_step(params: GeneratorParams, dataset: Dataset, config: TrainConfig, rng: RandomSource, trace: list | None = None):
    """One SGD step on the drifting loss; returns ``(new_params, loss)``."""
    loss, grads, records = compute_step(params, dataset, config, rng)
    if trace is not None:
        trace.extend(records)
    return sgd_update(params, grads, config.learning_rate), loss


def train(dataset: Dataset, config: TrainConfig, params: GeneratorParams | None = None, log_every: int = 0, logger=None):
    """Run ``config.steps`` training steps; returns ``(params, losses)``."""
    if params is None:
        params = init_generator(
            {c.class_id: c.types for c in dataset.classes},
            config.hidden_widths,
            config.embed_dim,
            seed=config.seed,
            output_scale=config.init_output_scale,
        )
    rng = RandomSource(config.seed).spawn(1)
    losses = []
    for step in range(config.steps):
        params, loss = train_step(params, dataset, config, rng)
        losses.append(loss)
        if logger is not None and log_every and (step + 1) % log_every == 0:
            logger.info("step %d loss %.6g", step + 1, loss)
    return params, np.array(losses)


def median_index(samples: np.ndarray) -> int:
    """Index of the sample closest (Frobenius) to the coordinate-wise median of the set."""
    med = np.median(samples, axis=0)
    d = np.sqrt(np.sum((samples - med) ** 2, axis=(1, 2)))
    return int(np.argmin(d))


def sample_one_shot(params: GeneratorParams, class_id, k: int, rng: RandomSource, select: str | None = None):
    """k one-shot samples for a class, or the median-closest one when ``select == 'median'``."""
    cid = str(class_id)
    if cid not in params.class_types:
        raise KeyError(f"unknown class {cid!r}")
    if k < 1:
        raise InvalidConfigError("k must be >= 1")
    types = params.class_types[cid]
    noise = rng.normal((k, len(types), 3))
    out, _ = forward_batch(params, noise, [cid] * k)
    confs = [Conformation(c, types, cid) for c in out]
    if select in (None, "none"):
        return confs
    if select == "median":
        return confs[median_index(out)]
    raise InvalidConfigError(f"select must be 'none' or 'median', got {select!r}")
