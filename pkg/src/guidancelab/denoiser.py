"""A tiny feedforward noise predictor with hand-written backpropagation.

The network maps (x_t, t, coarse label, fine label) to a noise estimate of
the same dimension as x_t.  Inputs are concatenated: the data vector, a
sinusoidal embedding of t / T, and one learned embedding row per condition
slot.  Each slot's table carries a dedicated null row (the last one) for
the "no condition" case, which is also what condition dropout feeds during
training, so a single network learns conditional and unconditional
prediction at once.

Everything is explicit float64 numpy: forward pass, reverse-mode gradients,
and plain SGD.  No autodiff framework is involved, which keeps training
bit-deterministic given a seed and lets the test suite check gradients
against central finite differences.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    DimensionMismatchError,
    DivergenceError,
    InvalidParameterError,
)
from .mixtures import GaussianMixture, exact_eps, sample
from .schedule import Schedule, build_schedule

CHECKPOINT_FORMAT_VERSION = 1

NULL = -1  # label sentinel in batch arrays; scalar APIs use None


def time_embedding(t, T: int, freq_count: int, max_period: float) -> np.ndarray:
    """Sinusoidal features of normalized time u = t / T.

    Uses freq_count frequencies spaced geometrically from 1 to max_period,
    returning [sin(u*f_k), cos(u*f_k)] of width 2 * freq_count.  The top
    frequency resolves single-step changes of u for T up to ~max_period.
    """
    u = np.asarray(t, dtype=np.float64) / T
    exponents = np.arange(freq_count) / max(freq_count - 1, 1)
    freqs = max_period**exponents
    ang = u[..., None] * freqs
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=-1)


@dataclass
class Denoiser:
    """Parameter container for one noise-prediction network.

    weights[i] has shape (fan_in, fan_out) and biases[i] shape (fan_out,);
    hidden layers apply tanh, the final layer is linear.  coarse_table and
    fine_table have vocab + 1 rows, the last row being the reserved null
    condition.  The schedule the net was built for travels with it so t / T
    normalization and checkpoints stay self-contained.
    """

    dim: int
    hidden_sizes: tuple
    freq_count: int
    max_period: float
    embed_dim: int
    vocab_coarse: int
    vocab_fine: int
    weights: list
    biases: list
    coarse_table: np.ndarray
    fine_table: np.ndarray
    schedule: Schedule
    seed: int

    @property
    def time_width(self) -> int:
        return 2 * self.freq_count

    @property
    def input_width(self) -> int:
        return self.dim + self.time_width + 2 * self.embed_dim

    def clone(self) -> "Denoiser":
        return Denoiser(
            dim=self.dim,
            hidden_sizes=tuple(self.hidden_sizes),
            freq_count=self.freq_count,
            max_period=self.max_period,
            embed_dim=self.embed_dim,
            vocab_coarse=self.vocab_coarse,
            vocab_fine=self.vocab_fine,
            weights=[w.copy() for w in self.weights],
            biases=[b.copy() for b in self.biases],
            coarse_table=self.coarse_table.copy(),
            fine_table=self.fine_table.copy(),
            schedule=self.schedule,
            seed=self.seed,
        )

    def param_items(self) -> list:
        """(name, array) pairs in the fixed serialization order."""
        items = []
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            items.append((f"w{i}", w))
            items.append((f"b{i}", b))
        items.append(("coarse_table", self.coarse_table))
        items.append(("fine_table", self.fine_table))
        return items


def init_denoiser(
    dim: int,
    vocab_coarse: int,
    vocab_fine: int,
    schedule: Schedule,
    seed: int,
    hidden_sizes: tuple = (128, 128, 128),
    embed_dim: int = 8,
    freq_count: int = 8,
    max_period: float = 1000.0,
) -> Denoiser:
    """Fresh network with 1/sqrt(fan_in) hidden init and a zeroed output layer.

    Zeroing the last layer makes the untrained prediction identically zero
    (the prior mean of the noise), a sane starting point for the regression.
    """
    if dim < 1 or vocab_coarse < 1 or vocab_fine < 1:
        raise InvalidParameterError("dim and vocab sizes must be >= 1")
    rng = np.random.default_rng([seed, 0])
    time_width = 2 * freq_count
    sizes = [dim + time_width + 2 * embed_dim, *hidden_sizes, dim]
    weights, biases = [], []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        weights.append(rng.standard_normal((fan_in, fan_out)) / np.sqrt(fan_in))
        biases.append(np.zeros(fan_out))
    weights[-1][:] = 0.0
    coarse_table = rng.standard_normal((vocab_coarse + 1, embed_dim)) * 0.1
    fine_table = rng.standard_normal((vocab_fine + 1, embed_dim)) * 0.1
    return Denoiser(
        dim=dim,
        hidden_sizes=tuple(int(h) for h in hidden_sizes),
        freq_count=int(freq_count),
        max_period=float(max_period),
        embed_dim=int(embed_dim),
        vocab_coarse=int(vocab_coarse),
        vocab_fine=int(vocab_fine),
        weights=weights,
        biases=biases,
        coarse_table=coarse_table,
        fine_table=fine_table,
        schedule=schedule,
        seed=int(seed),
    )


def _label_rows(labels, vocab: int, n: int, what: str) -> np.ndarray:
    """Map labels (None / int / array with -1 as null) to embedding row indices."""
    if labels is None:
        return np.full(n, vocab, dtype=np.int64)
    arr = np.asarray(labels)
    if arr.ndim == 0:
        arr = np.full(n, int(arr), dtype=np.int64)
    else:
        arr = arr.astype(np.int64, copy=True)
        if arr.shape != (n,):
            raise DimensionMismatchError(f"{what} labels: expected shape ({n},), got {arr.shape}")
    if np.any(arr < NULL) or np.any(arr >= vocab):
        raise InvalidParameterError(f"{what} label out of range [0, {vocab}) (or -1/None for null)")
    rows = arr.copy()
    rows[rows == NULL] = vocab
    return rows


def _forward(net: Denoiser, x: np.ndarray, t: np.ndarray, c_rows, f_rows):
    """Batched forward pass; returns (output, activations) with activations[i]
    the input of layer i."""
    temb = time_embedding(t, net.schedule.T, net.freq_count, net.max_period)
    h = np.concatenate([x, temb, net.coarse_table[c_rows], net.fine_table[f_rows]], axis=1)
    acts = [h]
    for w, b in zip(net.weights[:-1], net.biases[:-1]):
        h = np.tanh(h @ w + b)
        acts.append(h)
    out = h @ net.weights[-1] + net.biases[-1]
    return out, acts


def predict_eps(net: Denoiser, x_t, t, coarse=None, fine=None) -> np.ndarray:
    """Deterministic forward pass.

    x_t may be a single d-vector or an (n, d) batch; t an int or an (n,)
    array; each label None (null condition), a scalar, or an (n,) array
    where -1 marks null.  Output shape mirrors x_t.
    """
    x = np.asarray(x_t, dtype=np.float64)
    single = x.ndim == 1
    x = x[None, :] if single else x
    if x.ndim != 2 or x.shape[1] != net.dim:
        raise DimensionMismatchError(f"expected inputs of dimension {net.dim}, got shape {np.shape(x_t)}")
    n = x.shape[0]
    t_arr = np.asarray(t, dtype=np.int64)
    if t_arr.ndim == 0:
        t_arr = np.full(n, int(t_arr), dtype=np.int64)
    if np.any(t_arr < 0) or np.any(t_arr >= net.schedule.T):
        raise InvalidParameterError(f"step index outside [0, {net.schedule.T})")
    c_rows = _label_rows(coarse, net.vocab_coarse, n, "coarse")
    f_rows = _label_rows(fine, net.vocab_fine, n, "fine")
    out, _ = _forward(net, x, t_arr, c_rows, f_rows)
    return out[0] if single else out


@dataclass(frozen=True)
class Batch:
    """One training minibatch; labels already have dropout applied (-1 = null)."""

    x0: np.ndarray
    eps: np.ndarray
    t: np.ndarray
    coarse: np.ndarray
    fine: np.ndarray


@dataclass
class Grads:
    weights: list
    biases: list
    coarse_table: np.ndarray
    fine_table: np.ndarray

    def param_items(self) -> list:
        """(name, array) pairs in the same order as Denoiser.param_items()."""
        items = []
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            items.append((f"w{i}", w))
            items.append((f"b{i}", b))
        items.append(("coarse_table", self.coarse_table))
        items.append(("fine_table", self.fine_table))
        return items


def loss_and_grads(net: Denoiser, batch: Batch, schedule: Schedule):
    """MSE between the net's prediction on noised data and the true noise,
    plus gradients for every parameter by reverse-mode accumulation.

    The loss averages over all batch rows and dimensions, so duplicating
    every row leaves loss and gradients unchanged.
    """
    x0 = np.asarray(batch.x0, dtype=np.float64)
    eps = np.asarray(batch.eps, dtype=np.float64)
    if x0.ndim != 2 or x0.shape[0] == 0:
        raise InvalidParameterError("batch must be a non-empty (n, d) matrix")
    if x0.shape != eps.shape:
        raise DimensionMismatchError(f"x0 {x0.shape} and eps {eps.shape} differ")
    n, d = x0.shape
    t = np.asarray(batch.t, dtype=np.int64)
    ab = schedule.alpha_bars[t][:, None]
    x_t = np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * eps

    c_rows = _label_rows(batch.coarse, net.vocab_coarse, n, "coarse")
    f_rows = _label_rows(batch.fine, net.vocab_fine, n, "fine")
    out, acts = _forward(net, x_t, t, c_rows, f_rows)

    resid = out - eps
    loss = float(np.mean(resid * resid))

    g = 2.0 * resid / (n * d)
    g_w = [np.empty(0)] * len(net.weights)
    g_b = [np.empty(0)] * len(net.biases)
    for layer in reversed(range(len(net.weights))):
        g_w[layer] = acts[layer].T @ g
        g_b[layer] = g.sum(axis=0)
        g = g @ net.weights[layer].T
        if layer > 0:
            g = g * (1.0 - acts[layer] ** 2)  # tanh'
    # g is now the gradient w.r.t. the concatenated input row.
    off_c = net.dim + net.time_width
    off_f = off_c + net.embed_dim
    g_ct = np.zeros_like(net.coarse_table)
    g_ft = np.zeros_like(net.fine_table)
    np.add.at(g_ct, c_rows, g[:, off_c:off_f])
    np.add.at(g_ft, f_rows, g[:, off_f : off_f + net.embed_dim])
    return loss, Grads(weights=g_w, biases=g_b, coarse_table=g_ct, fine_table=g_ft)


@dataclass(frozen=True)
class TrainConfig:
    """Hyperparameters for one (pre-)training or fine-tuning run.

    drop_rate_coarse / drop_rate_fine are the per-example probabilities of
    replacing that condition slot with the null row; the two draws are
    independent.  steps = 0 is allowed and means "no optimization" (used for
    null fine-tunes).
    """

    steps: int
    batch: int
    lr: float
    drop_rate_coarse: float
    drop_rate_fine: float
    seed: int
    world: GaussianMixture
    schedule: Schedule

    def __post_init__(self):
        if self.steps < 0:
            raise InvalidParameterError(f"steps must be >= 0, got {self.steps}")
        if self.batch < 1:
            raise InvalidParameterError(f"batch must be >= 1, got {self.batch}")
        if self.lr <= 0:
            raise InvalidParameterError(f"lr must be positive, got {self.lr}")
        for name, rate in (("drop_rate_coarse", self.drop_rate_coarse), ("drop_rate_fine", self.drop_rate_fine)):
            if not 0.0 <= rate <= 1.0:
                raise InvalidParameterError(f"{name} must lie in [0, 1], got {rate}")


def _train_loop(net: Denoiser, cfg: TrainConfig) -> np.ndarray:
    """SGD over freshly drawn minibatches; returns the per-step loss curve.

    Draw order per step is fixed (data, t, eps, coarse dropout, fine
    dropout) so runs are bit-reproducible for a given seed.
    """
    rng = np.random.default_rng([cfg.seed, 1])
    world, schedule = cfg.world, cfg.schedule
    losses = np.empty(cfg.steps)
    for step in range(cfg.steps):
        x0, labels = sample(world, cfg.batch, rng)
        t = rng.integers(0, schedule.T, size=cfg.batch)
        eps = rng.standard_normal((cfg.batch, world.dim))
        coarse = labels[:, 0].copy()
        fine = labels[:, 1].copy()
        coarse[rng.random(cfg.batch) < cfg.drop_rate_coarse] = NULL
        fine[rng.random(cfg.batch) < cfg.drop_rate_fine] = NULL
        loss, grads = loss_and_grads(net, Batch(x0, eps, t, coarse, fine), schedule)
        if not np.isfinite(loss):
            raise DivergenceError(f"non-finite loss {loss} at training step {step}")
        for w, gw in zip(net.weights, grads.weights):
            w -= cfg.lr * gw
        for b, gb in zip(net.biases, grads.biases):
            b -= cfg.lr * gb
        net.coarse_table -= cfg.lr * grads.coarse_table
        net.fine_table -= cfg.lr * grads.fine_table
        losses[step] = loss
    for name, arr in net.param_items():
        if not np.all(np.isfinite(arr)):
            raise DivergenceError(f"non-finite values in {name} after training")
    return losses


def train(cfg: TrainConfig):
    """Train a fresh network on cfg.world; returns (net, loss_curve).

    Vocabulary sizes come from the world's label ranges; architecture is the
    package default (3 tanh layers of 128).
    """
    net = init_denoiser(
        dim=cfg.world.dim,
        vocab_coarse=int(cfg.world.coarse_labels.max()) + 1,
        vocab_fine=int(cfg.world.fine_labels.max()) + 1,
        schedule=cfg.schedule,
        seed=cfg.seed,
    )
    losses = _train_loop(net, cfg)
    return net, losses


def finetune(base: Denoiser, cfg: TrainConfig):
    """Copy base and keep training it on cfg.world; returns (net, loss_curve).

    The caller's base net is never touched.  steps = 0 returns an exact
    copy.  The new world must match the base architecture: same dimension,
    labels within the base vocabularies.
    """
    if base.dim != cfg.world.dim:
        raise DimensionMismatchError(
            f"architecture mismatch: base dim {base.dim}, world dim {cfg.world.dim}"
        )
    if int(cfg.world.coarse_labels.max()) >= base.vocab_coarse or int(
        cfg.world.fine_labels.max()
    ) >= base.vocab_fine:
        raise InvalidParameterError("world labels exceed the base net's vocabularies")
    net = base.clone()
    if cfg.steps == 0:
        return net, np.empty(0)
    losses = _train_loop(net, cfg)
    return net, losses


def eps_probe_error(
    net: Denoiser,
    world: GaussianMixture,
    schedule: Schedule,
    t: int,
    points,
    coarse=None,
    fine=None,
    kind: str = "mse",
) -> float:
    """Mean error between the net's prediction and the exact mixture noise
    prediction over a set of probe points at step t.  kind is "mse" or "mae"."""
    points = np.atleast_2d(np.asarray(points, dtype=np.float64))
    predicted = predict_eps(net, points, t, coarse, fine)
    target = exact_eps(world, schedule, t, points, coarse, fine)
    diff = predicted - target
    if kind == "mse":
        return float(np.mean(diff * diff))
    if kind == "mae":
        return float(np.mean(np.abs(diff)))
    raise InvalidParameterError(f"unknown error kind {kind!r}")


# --- checkpoints -------------------------------------------------------------


def save_checkpoint(net: Denoiser, path) -> None:
    """Write a versioned JSON checkpoint.

    Floats are serialized with full repr precision, so load_checkpoint
    reproduces bit-identical predictions.  Derived schedule vectors are not
    stored; they are rebuilt from the four schedule scalars on load.
    """
    doc = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "dim": net.dim,
        "hidden_sizes": list(net.hidden_sizes),
        "freq_count": net.freq_count,
        "max_period": net.max_period,
        "embed_dim": net.embed_dim,
        "vocab_coarse": net.vocab_coarse,
        "vocab_fine": net.vocab_fine,
        "schedule": net.schedule.params(),
        "seed": net.seed,
        "params": [[name, arr.ravel().tolist()] for name, arr in net.param_items()],
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh)
        fh.write("\n")


def load_checkpoint(path) -> Denoiser:
    """Rebuild a Denoiser from save_checkpoint output."""
    with open(path, "r", encoding="utf-8") as fh:
        doc = json.load(fh)
    version = doc.get("format_version")
    if version != CHECKPOINT_FORMAT_VERSION:
        raise InvalidParameterError(
            f"unsupported checkpoint format_version {version!r} (expected {CHECKPOINT_FORMAT_VERSION})"
        )
    schedule = build_schedule(**doc["schedule"])
    net = init_denoiser(
        dim=doc["dim"],
        vocab_coarse=doc["vocab_coarse"],
        vocab_fine=doc["vocab_fine"],
        schedule=schedule,
        seed=doc["seed"],
        hidden_sizes=tuple(doc["hidden_sizes"]),
        embed_dim=doc["embed_dim"],
        freq_count=doc["freq_count"],
        max_period=doc["max_period"],
    )
    stored = dict((name, values) for name, values in doc["params"])
    for name, arr in net.param_items():
        values = np.asarray(stored[name], dtype=np.float64)
        if values.size != arr.size:
            raise InvalidParameterError(f"checkpoint parameter {name} has wrong size")
        arr[...] = values.reshape(arr.shape)
    return net
