"""Stacked sparse autoencoder with a two-class softmax head.

Matrices follow the features-by-samples convention: a batch is I x B.
Class index 0 is preictal and index 1 is interictal.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy.special import expit, log_softmax, softmax

from .signal_data import Label

RHO_CLAMP = 1e-8
MAGIC = b"SAEN"
VERSION = 1
N_CLASSES = 2


class TrainingDivergedError(RuntimeError):
    def __init__(self, epoch: int, what: str = "training"):
        super().__init__(f"{what} diverged (non-finite loss) at epoch {epoch}")
        self.epoch = epoch


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 200
    learning_rate: float = 0.1
    l2_coeff: float = 1e-4
    sparsity_coeff: float = 3.0
    sparsity_target: float = 0.05
    seed: int = 0
    batch_size: int = 32

    def validate(self) -> None:
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("epochs must be >= 0 and batch_size >= 1")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if self.l2_coeff < 0 or self.sparsity_coeff < 0:
            raise ValueError("regularization coefficients must be nonnegative")
        if not 0 < self.sparsity_target < 1:
            raise ValueError("sparsity_target must lie in (0, 1)")


def _check_finite(x, what="input") -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if not np.all(np.isfinite(x)):
        raise ValueError(f"{what} contains non-finite values")
    return x


def _glorot(rng: np.random.Generator, fan_out: int, fan_in: int) -> np.ndarray:
    r = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-r, r, size=(fan_out, fan_in))


# --------------------------------------------------------------------------
# Layers
# --------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class AutoencoderLayer:
    """Sigmoid encoder with a linear decoder."""

    w_enc: np.ndarray  # H x I
    b_enc: np.ndarray  # H
    w_dec: np.ndarray  # I x H
    b_dec: np.ndarray  # I
    loss_trace: tuple = field(default=(), repr=False)

    def __post_init__(self):
        h, i = self.w_enc.shape
        if not h < i:
            raise ValueError(f"hidden size {h} must be smaller than input size {i}")
        if self.b_enc.shape != (h,) or self.w_dec.shape != (i, h) or self.b_dec.shape != (i,):
            raise ValueError("inconsistent autoencoder parameter shapes")
        for name in ("w_enc", "b_enc", "w_dec", "b_dec"):
            _check_finite(getattr(self, name), name)

    @property
    def n_in(self) -> int:
        return self.w_enc.shape[1]

    @property
    def n_hidden(self) -> int:
        return self.w_enc.shape[0]

    def params(self) -> list[np.ndarray]:
        return [self.w_enc, self.b_enc, self.w_dec, self.b_dec]

    @classmethod
    def from_params(cls, params, loss_trace=()) -> "AutoencoderLayer":
        return cls(*(np.array(p, dtype=np.float64) for p in params), loss_trace=tuple(loss_trace))

    @classmethod
    def initialize(cls, n_in: int, n_hidden: int, rng: np.random.Generator) -> "AutoencoderLayer":
        return cls(
            _glorot(rng, n_hidden, n_in), np.zeros(n_hidden),
            _glorot(rng, n_in, n_hidden), np.zeros(n_in),
        )


@dataclass(frozen=True, eq=False)
class SoftmaxHead:
    w: np.ndarray  # 2 x H
    b: np.ndarray  # 2

    def __post_init__(self):
        if self.w.ndim != 2 or self.w.shape[0] != N_CLASSES or self.b.shape != (N_CLASSES,):
            raise ValueError("softmax head must have shapes (2, H) and (2,)")
        _check_finite(self.w, "w")
        _check_finite(self.b, "b")

    @property
    def n_in(self) -> int:
        return self.w.shape[1]

    def params(self) -> list[np.ndarray]:
        return [self.w, self.b]


@dataclass(frozen=True, eq=False)
class StackedNetwork:
    layers: tuple[AutoencoderLayer, ...]
    head: SoftmaxHead
    config_echo: str = ""

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))
        check_chain(self.layers, self.head)

    @property
    def sizes(self) -> list[int]:
        return [self.layers[0].n_in] + [l.n_hidden for l in self.layers] + [N_CLASSES]

    def encoder_params(self) -> list[np.ndarray]:
        out = []
        for layer in self.layers:
            out += [layer.w_enc, layer.b_enc]
        return out + self.head.params()


def check_chain(layers, head: SoftmaxHead) -> None:
    if not layers:
        raise ValueError("network needs at least one encoder")
    for prev, nxt in zip(layers, layers[1:]):
        if nxt.n_in != prev.n_hidden:
            raise ValueError(f"layer chain mismatch: {prev.n_hidden} outputs feed {nxt.n_in} inputs")
    if head.n_in != layers[-1].n_hidden:
        raise ValueError(f"softmax head expects {head.n_in} features, top encoder gives {layers[-1].n_hidden}")


# --------------------------------------------------------------------------
# Losses and gradients (parameter-list level)
# --------------------------------------------------------------------------

def _kl_terms(h, cfg: TrainConfig):
    rho = cfg.sparsity_target
    raw = h.mean(axis=1)
    rho_hat = np.clip(raw, RHO_CLAMP, 1 - RHO_CLAMP)
    return rho, raw, rho_hat


def _ae_loss(params, x, cfg: TrainConfig) -> float:
    w1, b1, w2, b2 = params
    h = expit(w1 @ x + b1[:, None])
    diff = w2 @ h + b2[:, None] - x
    rho, _, rho_hat = _kl_terms(h, cfg)
    kl = np.sum(rho * np.log(rho / rho_hat) + (1 - rho) * np.log((1 - rho) / (1 - rho_hat)))
    l2 = np.sum(w1 * w1) + np.sum(w2 * w2)
    return float(0.5 * np.sum(diff * diff) / x.shape[1] + cfg.l2_coeff * l2 + cfg.sparsity_coeff * kl)


def _ae_grads(params, x, cfg: TrainConfig):
    w1, b1, w2, b2 = params
    h = expit(w1 @ x + b1[:, None])
    d_out = w2 @ h
    d_out += b2[:, None]
    d_out -= x
    d_out *= 1.0 / x.shape[1]
    g_w2 = d_out @ h.T
    g_w2 += (2 * cfg.l2_coeff) * w2
    rho, raw, rho_hat = _kl_terms(h, cfg)
    d_rho = (1 - rho) / (1 - rho_hat) - rho / rho_hat
    d_rho[rho_hat != raw] = 0.0  # clamped units have zero derivative
    d_h = w2.T @ d_out
    d_h += (cfg.sparsity_coeff / x.shape[1]) * d_rho[:, None]
    d_h *= h * (1 - h)
    g_w1 = d_h @ x.T
    g_w1 += (2 * cfg.l2_coeff) * w1
    return [g_w1, d_h.sum(axis=1), g_w2, d_out.sum(axis=1)]


def _ae_loss_grad(params, x, cfg: TrainConfig):
    return _ae_loss(params, x, cfg), _ae_grads(params, x, cfg)


def _head_loss(params, feats, labels, cfg: TrainConfig) -> float:
    w, b = params
    logp = log_softmax(w @ feats + b[:, None], axis=0)
    return float(-logp[labels, np.arange(feats.shape[1])].mean() + cfg.l2_coeff * np.sum(w * w))


def _head_grads(params, feats, labels, cfg: TrainConfig):
    """Gradients for (w, b) plus the gradient with respect to the logits."""
    w, b = params
    d_logits = softmax(w @ feats + b[:, None], axis=0)
    d_logits[labels, np.arange(feats.shape[1])] -= 1
    d_logits *= 1.0 / feats.shape[1]
    g_w = d_logits @ feats.T
    g_w += (2 * cfg.l2_coeff) * w
    return [g_w, d_logits.sum(axis=1)], d_logits


def _encoder_forward(params, x):
    acts = [x]
    for j in range((len(params) - 2) // 2):
        w, b = params[2 * j], params[2 * j + 1]
        acts.append(expit(w @ acts[-1] + b[:, None]))
    return acts


def _stack_loss(params, x, labels, cfg: TrainConfig) -> float:
    """params: [W1, b1, ..., WL, bL, W_head, b_head]."""
    acts = _encoder_forward(params, x)
    loss = _head_loss(params[-2:], acts[-1], labels, cfg)
    for w in params[0:-2:2]:
        loss += cfg.l2_coeff * float(np.sum(w * w))
    return loss


def _stack_grads(params, x, labels, cfg: TrainConfig):
    acts = _encoder_forward(params, x)
    n_enc = len(acts) - 1
    head_grads, d_logits = _head_grads(params[-2:], acts[-1], labels, cfg)
    grads = [None] * (2 * n_enc) + head_grads
    delta = params[-2].T @ d_logits
    for j in reversed(range(n_enc)):
        w = params[2 * j]
        h = acts[j + 1]
        delta *= h * (1 - h)
        g_w = delta @ acts[j].T
        g_w += (2 * cfg.l2_coeff) * w
        grads[2 * j] = g_w
        grads[2 * j + 1] = delta.sum(axis=1)
        if j:
            delta = w.T @ delta
    return grads


def _descend(params, loss_fn, grad_fn, n: int, cfg: TrainConfig, rng: np.random.Generator, what: str):
    """Mini-batch gradient descent.

    ``grad_fn(params, idx)`` gives gradients on the columns ``idx``;
    ``loss_fn(params)`` the full-data loss. That loss is checked after every
    epoch; an epoch that raises it is rolled back and the learning rate
    halved for the rest of training, so the returned trace never increases.
    """
    params = [np.array(p, dtype=np.float64) for p in params]
    with np.errstate(over="ignore", invalid="ignore"):
        return _descend_loop(params, loss_fn, grad_fn, n, cfg, rng, what)


def _descend_loop(params, loss_fn, grad_fn, n, cfg, rng, what):
    loss = loss_fn(params)
    if not np.isfinite(loss):
        raise TrainingDivergedError(0, what)
    trace = [loss]
    lr = cfg.learning_rate
    for epoch in range(cfg.epochs):
        perm = rng.permutation(n)
        trial = [p.copy() for p in params]
        for start in range(0, n, cfg.batch_size):
            for p, g in zip(trial, grad_fn(trial, perm[start:start + cfg.batch_size])):
                p -= lr * g
        new_loss = loss_fn(trial)
        if not np.isfinite(new_loss):
            raise TrainingDivergedError(epoch, what)
        if new_loss > loss:
            lr *= 0.5
        else:
            params, loss = trial, new_loss
        trace.append(loss)
    return params, trace


# --------------------------------------------------------------------------
# Public operations
# --------------------------------------------------------------------------

def ae_loss_grad(layer: AutoencoderLayer, batch, cfg: TrainConfig):
    """Loss and exact gradients of one sparse autoencoder on an I x B batch.

    loss = 0.5 * mean_b ||x_hat - x||^2
           + l2_coeff * (||W_enc||^2 + ||W_dec||^2)
           + sparsity_coeff * sum_j KL(rho || rho_hat_j)
    """
    x = _check_finite(batch, "batch")
    if x.ndim != 2 or x.shape[0] != layer.n_in or x.shape[1] < 1:
        raise ValueError(f"batch must be {layer.n_in} x B with B >= 1, got {x.shape}")
    loss, grads = _ae_loss_grad(layer.params(), x, cfg)
    return loss, dict(zip(("w_enc", "b_enc", "w_dec", "b_dec"), grads))


def train_autoencoder(data, hidden: int, cfg: TrainConfig) -> AutoencoderLayer:
    cfg.validate()
    x = _check_finite(data, "data")
    n_in, n = x.shape
    if not hidden < n_in:
        raise ValueError(f"hidden size {hidden} must be smaller than input size {n_in}")
    if n < 1:
        raise ValueError("need at least one training column")
    rng = np.random.default_rng(cfg.seed)
    init = AutoencoderLayer.initialize(n_in, hidden, rng)
    params, trace = _descend(
        init.params(), lambda p: _ae_loss(p, x, cfg), lambda p, idx: _ae_grads(p, x[:, idx], cfg),
        n, cfg, rng, "autoencoder",
    )
    return AutoencoderLayer.from_params(params, trace)


def encode(layer: AutoencoderLayer, data) -> np.ndarray:
    x = np.asarray(data, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] != layer.n_in:
        raise ValueError(f"expected {layer.n_in} x N input, got {x.shape}")
    return expit(layer.w_enc @ x + layer.b_enc[:, None])


def softmax_predict(head: SoftmaxHead, features) -> np.ndarray:
    f = np.asarray(features, dtype=np.float64)
    if f.ndim != 2 or f.shape[0] != head.n_in:
        raise ValueError(f"expected {head.n_in} x N features, got {f.shape}")
    # scipy's softmax subtracts the column max before exponentiating
    return softmax(head.w @ f + head.b[:, None], axis=0)


def _label_indices(labels, n: int) -> np.ndarray:
    labels = np.asarray([int(l) for l in labels], dtype=np.int64)
    if labels.shape != (n,):
        raise ValueError(f"expected {n} labels, got {labels.shape[0]}")
    if not np.all((labels == Label.PREICTAL) | (labels == Label.INTERICTAL)):
        raise ValueError("labels must be preictal or interictal")
    if len(np.unique(labels)) < 2:
        raise ValueError("training labels contain a single class; decision boundary undefined")
    return labels


def softmax_loss_grad(head: SoftmaxHead, features, labels, cfg: TrainConfig):
    """Mean cross-entropy plus l2_coeff * ||W||^2, with gradients for (w, b)."""
    f = _check_finite(features, "features")
    labels = np.asarray([int(l) for l in labels], dtype=np.int64)
    grads, _ = _head_grads(head.params(), f, labels, cfg)
    return _head_loss(head.params(), f, labels, cfg), {"w": grads[0], "b": grads[1]}


def train_softmax(features, labels, cfg: TrainConfig) -> SoftmaxHead:
    cfg.validate()
    f = _check_finite(features, "features")
    if f.ndim != 2 or f.shape[1] < 2:
        raise ValueError("need an H x N feature matrix with N >= 2")
    y = _label_indices(labels, f.shape[1])
    rng = np.random.default_rng(cfg.seed)
    init = [_glorot(rng, N_CLASSES, f.shape[0]), np.zeros(N_CLASSES)]
    params, _ = _descend(
        init, lambda p: _head_loss(p, f, y, cfg), lambda p, idx: _head_grads(p, f[:, idx], y[idx], cfg)[0],
        f.shape[1], cfg, rng, "softmax",
    )
    return SoftmaxHead(*params)


def stacked_loss_grad(net: StackedNetwork, data, labels, cfg: TrainConfig):
    """Cross-entropy of the whole stack plus L2 on every weight matrix."""
    x = _check_finite(data, "data")
    labels = np.asarray([int(l) for l in labels], dtype=np.int64)
    params = net.encoder_params()
    return _stack_loss(params, x, labels, cfg), _stack_grads(params, x, labels, cfg)


def stack_and_finetune(layers, head: SoftmaxHead, data, labels, cfg: TrainConfig) -> StackedNetwork:
    cfg.validate()
    layers = tuple(layers)
    check_chain(layers, head)
    x = _check_finite(data, "data")
    if x.shape[0] != layers[0].n_in:
        raise ValueError(f"data has {x.shape[0]} rows, first encoder expects {layers[0].n_in}")
    y = _label_indices(labels, x.shape[1])
    net = StackedNetwork(layers, head)
    if cfg.epochs == 0:
        return net
    rng = np.random.default_rng(cfg.seed)
    params, _ = _descend(
        net.encoder_params(), lambda p: _stack_loss(p, x, y, cfg),
        lambda p, idx: _stack_grads(p, x[:, idx], y[idx], cfg), x.shape[1], cfg, rng, "fine-tuning",
    )
    new_layers = tuple(
        replace(layer, w_enc=params[2 * j], b_enc=params[2 * j + 1]) for j, layer in enumerate(layers)
    )
    return StackedNetwork(new_layers, SoftmaxHead(params[-2], params[-1]))


def predict_proba(net: StackedNetwork, data) -> np.ndarray:
    """Class probabilities (2 x N) for an I x N matrix of windows."""
    h = np.asarray(data, dtype=np.float64)
    for layer in net.layers:
        h = encode(layer, h)
    return softmax_predict(net.head, h)


def predict_label(net: StackedNetwork, window) -> tuple[Label, float]:
    """Most probable class of one window; an exact tie resolves to preictal."""
    window = np.asarray(window, dtype=np.float64).reshape(-1, 1)
    if window.shape[0] != net.layers[0].n_in:
        raise ValueError(f"window has {window.shape[0]} values, network expects {net.layers[0].n_in}")
    probs = predict_proba(net, window)[:, 0]
    idx = int(np.argmax(probs))  # first maximum wins, i.e. index 0 on a tie
    return Label(idx), float(probs[idx])


def train_network(data, labels, hidden_sizes, pretrain_cfg: TrainConfig, softmax_cfg: TrainConfig,
                  finetune_cfg: TrainConfig, pretrain_max_columns: int | None = None) -> StackedNetwork:
    """Greedy layer-wise pretraining, softmax on the top features, then fine-tuning.

    With ``pretrain_max_columns`` the unsupervised stage only sees that many
    evenly spaced columns; the supervised stages always use all of them.
    """
    x = _check_finite(data, "data")
    unsup = x
    if pretrain_max_columns is not None and x.shape[1] > pretrain_max_columns:
        unsup = x[:, np.linspace(0, x.shape[1] - 1, pretrain_max_columns).round().astype(np.int64)]
    layers = []
    prev = x.shape[0]
    for j, size in enumerate(hidden_sizes):
        if not size < prev:
            raise ValueError(f"hidden layer sizes must strictly decrease, got {list(hidden_sizes)}")
        layer = train_autoencoder(unsup, size, replace(pretrain_cfg, seed=pretrain_cfg.seed + j))
        layers.append(layer)
        unsup = encode(layer, unsup)
        prev = size
    feats = x
    for layer in layers:
        feats = encode(layer, feats)
    head = train_softmax(feats, labels, softmax_cfg)
    return stack_and_finetune(layers, head, x, labels, finetune_cfg)


# --------------------------------------------------------------------------
# Persistence
# --------------------------------------------------------------------------

def _f64(a) -> bytes:
    return np.ascontiguousarray(a, dtype="<f8").tobytes()


def network_to_bytes(net: StackedNetwork) -> bytes:
    sizes = net.sizes
    parts = [MAGIC, struct.pack("<HH", VERSION, len(sizes)), struct.pack(f"<{len(sizes)}Q", *sizes)]
    for layer in net.layers:
        parts += [_f64(p) for p in layer.params()]
    parts += [_f64(net.head.w), _f64(net.head.b)]
    echo = net.config_echo.encode("utf-8")
    parts += [struct.pack("<I", len(echo)), echo]
    return b"".join(parts)


def network_from_bytes(buf: bytes) -> StackedNetwork:
    view = memoryview(buf)
    pos = 0

    def take(n):
        nonlocal pos
        if pos + n > len(view):
            raise ValueError("truncated network file")
        out = view[pos:pos + n]
        pos += n
        return out

    def arr(*shape):
        count = int(np.prod(shape))
        return np.frombuffer(take(8 * count), dtype="<f8").reshape(shape).copy()

    if bytes(take(4)) != MAGIC:
        raise ValueError("not a network file (bad magic)")
    version, n_sizes = struct.unpack("<HH", take(4))
    if version != VERSION:
        raise ValueError(f"unsupported network file version {version}")
    sizes = struct.unpack(f"<{n_sizes}Q", take(8 * n_sizes))
    if n_sizes < 3 or sizes[-1] != N_CLASSES:
        raise ValueError(f"bad architecture header {sizes}")
    layers = []
    for i_in, h in zip(sizes[:-2], sizes[1:-1]):
        layers.append(AutoencoderLayer(arr(h, i_in), arr(h), arr(i_in, h), arr(i_in)))
    head = SoftmaxHead(arr(N_CLASSES, sizes[-2]), arr(N_CLASSES))
    (echo_len,) = struct.unpack("<I", take(4))
    echo = bytes(take(echo_len)).decode("utf-8")
    if pos != len(view):
        raise ValueError("trailing bytes after network payload")
    return StackedNetwork(tuple(layers), head, echo)


def save_network(net: StackedNetwork, path) -> None:
    Path(path).write_bytes(network_to_bytes(net))


def load_network(path) -> StackedNetwork:
    return network_from_bytes(Path(path).read_bytes())
