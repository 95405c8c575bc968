# Deep-MLP activity detector: per-device cluster-signal selection, shared
# ReLU branches, concatenation and a sigmoid head, trained with binary
# cross-entropy over all K devices.

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

PROB_CLAMP = 1e-12
CHECKPOINT_MAGIC = b"DMLP"
CHECKPOINT_VERSION = 1
FLAG_UNTIED = 1


@dataclass
class MlpHyperparams:
    hidden_layers: int = 2          # Z, at least two
    neurons_per_layer: int = 512    # V
    learning_rate: float = 1e-3
    batch_size: int = 256
    max_epochs: int = 50
    patience: int = 5
    seed: int = 0
    tied_branches: bool = True      # share weights across the T branches
    positive_weight: float = 1.0    # optional class reweighting
    dtype: str = "float64"          # training precision

    def __post_init__(self):
        if self.hidden_layers < 2:
            raise ValueError("hidden_layers must be >= 2")
        if self.neurons_per_layer < 1:
            raise ValueError("neurons_per_layer must be >= 1")
        if self.batch_size < 1 or self.max_epochs < 1 or self.patience < 1:
            raise ValueError("batch_size, max_epochs, patience must be >= 1")
        if self.dtype not in ("float32", "float64"):
            raise ValueError("dtype must be float32 or float64")


@dataclass
class MlpModel:
    """Weights of the per-device detector.

    branch_layers[b] is the list of (W, b) pairs for branch b; with tied
    branches the list has a single shared entry used by every branch.
    head_w maps the concatenated T*V features to one logit. norm_scale is
    the frozen input scaling (1 / feature RMS at training time).
    """

    input_dim: int
    branch_count: int
    branch_layers: list
    head_w: np.ndarray
    head_b: np.ndarray              # shape (1,)
    norm_scale: float
    tied: bool = True
    history: dict = field(default_factory=dict, repr=False)

    @property
    def hidden_layers(self) -> int:
        return len(self.branch_layers[0])

    @property
    def neurons_per_layer(self) -> int:
        return self.branch_layers[0][0][0].shape[1]

    def parameters(self):
        """(name, array) pairs in checkpoint declaration order."""
        out = []
        for bi, layers in enumerate(self.branch_layers):
            tag = "shared" if self.tied else f"branch{bi}"
            for li, (W, b) in enumerate(layers):
                out.append((f"{tag}.layer{li}.W", W))
                out.append((f"{tag}.layer{li}.b", b))
        out.append(("head.w", self.head_w))
        out.append(("head.b", self.head_b))
        return out

    def copy(self) -> "MlpModel":
        return MlpModel(
            input_dim=self.input_dim,
            branch_count=self.branch_count,
            branch_layers=[[(W.copy(), b.copy()) for W, b in layers]
                           for layers in self.branch_layers],
            head_w=self.head_w.copy(),
            head_b=self.head_b.copy(),
            norm_scale=self.norm_scale,
            tied=self.tied,
        )

    def astype(self, dtype) -> "MlpModel":
        m = self.copy()
        m.branch_layers = [[(W.astype(dtype), b.astype(dtype)) for W, b in layers]
                           for layers in m.branch_layers]
        m.head_w = m.head_w.astype(dtype)
        m.head_b = m.head_b.astype(dtype)
        return m


def init_model(hyper: MlpHyperparams, input_dim: int, branch_count: int,
               rng: np.random.Generator, norm_scale: float = 1.0) -> MlpModel:
    """He-initialized weights, zero biases."""
    dtype = np.dtype(hyper.dtype)
    V = hyper.neurons_per_layer

    def make_stack():
        layers = []
        fan_in = input_dim
        for _ in range(hyper.hidden_layers):
            W = rng.standard_normal((fan_in, V)) * np.sqrt(2.0 / fan_in)
            layers.append((W.astype(dtype), np.zeros(V, dtype=dtype)))
            fan_in = V
        return layers

    n_stacks = 1 if hyper.tied_branches else branch_count
    branch_layers = [make_stack() for _ in range(n_stacks)]
    concat = branch_count * V
    head_w = (rng.standard_normal(concat) / np.sqrt(concat)).astype(dtype)
    head_b = np.zeros(1, dtype=dtype)
    return MlpModel(
        input_dim=input_dim, branch_count=branch_count,
        branch_layers=branch_layers, head_w=head_w, head_b=head_b,
        norm_scale=float(norm_scale), tied=hyper.tied_branches,
    )


# ---------------------------------------------------------------------------
# featurization
# ---------------------------------------------------------------------------


def signals_to_real(y: np.ndarray) -> np.ndarray:
    """(..., N, L) complex blocks -> (..., 2NL) real with (re, im) interleaved
    in row-major block order."""
    y = np.asarray(y)
    parts = np.stack([y.real, y.imag], axis=-1)
    return parts.reshape(*y.shape[:-2], -1)


def featurize(y: np.ndarray, clusters: np.ndarray, k: int,
              scale: float = 1.0) -> np.ndarray:
    """The T branch input vectors for device k, shape (T, 2NL).

    Branch order follows the cluster row (descending beta); each N x L
    block is flattened row-major with real and imaginary parts interleaved,
    then multiplied by the normalization scalar.
    """
    blocks = y[np.asarray(clusters)[k]]
    return signals_to_real(blocks) * scale


def batch_features(y: np.ndarray, clusters: np.ndarray,
                   scale: float = 1.0, dtype=np.float64) -> np.ndarray:
    """(S, K, T, 2NL) features for a slot stack.

    clusters may be a shared (K, T) assignment or per-slot (S, K, T).
    """
    yri = signals_to_real(y)                       # (S, M, 2NL)
    clusters = np.asarray(clusters)
    if clusters.ndim == 2:
        feats = yri[:, clusters]                   # (S, K, T, F)
    else:
        S = y.shape[0]
        feats = yri[np.arange(S)[:, None, None], clusters]
    return (feats * scale).astype(dtype, copy=False)


# ---------------------------------------------------------------------------
# forward / backward
# ---------------------------------------------------------------------------


def _relu(x):
    return np.maximum(x, 0.0)


def _sigmoid(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def _forward_batch(model: MlpModel, X: np.ndarray, keep: bool = False):
    """Probabilities for X of shape (B, T, F); optionally keep activations."""
    B, T, F = X.shape
    acts = []
    if model.tied:
        h = X.reshape(B * T, F)
        stack_acts = [h]
        for W, b in model.branch_layers[0]:
            h = _relu(h @ W + b)
            stack_acts.append(h)
        concat = h.reshape(B, T * h.shape[1])
        if keep:
            acts.append(stack_acts)
    else:
        outs = []
        for t in range(T):
            h = X[:, t]
            stack_acts = [h]
            for W, b in model.branch_layers[t]:
                h = _relu(h @ W + b)
                stack_acts.append(h)
            outs.append(h)
            if keep:
                acts.append(stack_acts)
        concat = np.concatenate(outs, axis=1)
    logits = concat @ model.head_w + model.head_b[0]
    probs = _sigmoid(logits)
    if not np.all(np.isfinite(logits)):
        raise FloatingPointError("non-finite activation in forward pass")
    if keep:
        return probs, logits, concat, acts
    return probs


def forward(model: MlpModel, features: np.ndarray) -> float:
    """Activity probability for one device's (T, 2NL) branch inputs."""
    features = np.asarray(features, dtype=model.head_w.dtype)
    if features.shape != (model.branch_count, model.input_dim):
        raise ValueError(
            f"expected features of shape {(model.branch_count, model.input_dim)}"
        )
    return float(_forward_batch(model, features[None])[0])


def predict_all(model: MlpModel, y: np.ndarray,
                clusters: np.ndarray) -> np.ndarray:
    """Soft activity vector for one slot: forward applied per device."""
    feats = batch_features(y[None], clusters, model.norm_scale,
                           dtype=model.head_w.dtype)[0]  # (K, T, F)
    return _forward_batch(model, feats)


def predict_batch(model: MlpModel, y: np.ndarray, clusters: np.ndarray,
                  chunk: int = 128) -> np.ndarray:
    """(S, K) soft activity matrix for a slot stack."""
    S, K = y.shape[0], np.asarray(clusters).shape[-2]
    out = np.empty((S, K))
    per_slot = np.asarray(clusters).ndim == 3
    for start in range(0, S, chunk):
        stop = min(start + chunk, S)
        cl = clusters[start:stop] if per_slot else clusters
        feats = batch_features(y[start:stop], cl, model.norm_scale,
                               dtype=model.head_w.dtype)
        B = stop - start
        flat = feats.reshape(B * K, *feats.shape[2:])
        out[start:stop] = _forward_batch(model, flat).reshape(B, K)
    return out


def bce_loss(probs: np.ndarray, labels: np.ndarray) -> float:
    """Binary cross-entropy summed over the vector, probabilities clamped."""
    p = np.clip(np.asarray(probs, dtype=float), PROB_CLAMP, 1.0 - PROB_CLAMP)
    a = np.asarray(labels, dtype=float)
    return float(-np.sum(a * np.log(p) + (1.0 - a) * np.log1p(-p)))


def hard_decision(probs: np.ndarray, tau: float) -> np.ndarray:
    """Binarize soft activities with the rule a_hat = 1 iff prob > tau."""
    if tau < 0:
        raise ValueError("threshold must be nonnegative")
    return (np.asarray(probs) > tau).astype(np.uint8)


def _backward_batch(model: MlpModel, X, labels, pos_weight: float = 1.0):
    """Mean-over-batch loss and gradients in parameters() order."""
    B, T, F = X.shape
    probs, logits, concat, acts = _forward_batch(model, X, keep=True)
    a = labels.astype(probs.dtype)
    p = np.clip(probs, PROB_CLAMP, 1.0 - PROB_CLAMP)
    loss = float(-np.mean(pos_weight * a * np.log(p) +
                          (1.0 - a) * np.log1p(-p)) * a.size / B)
    # d(loss)/d(logit), including the optional positive-class weight
    dlogit = (-pos_weight * a * (1.0 - probs) + (1.0 - a) * probs) / B

    d_head_w = concat.T @ dlogit
    d_head_b = np.array([dlogit.sum()], dtype=concat.dtype)
    dconcat = np.outer(dlogit, model.head_w)

    grads = []
    V = model.neurons_per_layer
    if model.tied:
        stack_acts = acts[0]
        dh = dconcat.reshape(B * T, V)
        layer_grads = _backprop_stack(model.branch_layers[0], stack_acts, dh)
        grads.extend(layer_grads)
    else:
        dconcat = dconcat.reshape(B, T, V)
        for t in range(T):
            layer_grads = _backprop_stack(model.branch_layers[t], acts[t],
                                          dconcat[:, t])
            grads.extend(layer_grads)
    grads.append(d_head_w)
    grads.append(d_head_b)
    return loss, grads


def _backprop_stack(layers, stack_acts, dh):
    """Gradients for one ReLU stack; returns [dW0, db0, dW1, db1, ...]."""
    grads = []
    for li in range(len(layers) - 1, -1, -1):
        W, _ = layers[li]
        h_out = stack_acts[li + 1]
        h_in = stack_acts[li]
        dh = dh * (h_out > 0)
        grads.append(dh.sum(axis=0))        # db
        grads.append(h_in.T @ dh)           # dW
        if li > 0:
            dh = dh @ W.T
    grads.reverse()
    return grads


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------


def feature_rms(y: np.ndarray, clusters: np.ndarray, chunk: int = 256) -> float:
    """RMS of the raw feature entries over a slot stack (for norm_scale)."""
    total = 0.0
    count = 0
    for start in range(0, y.shape[0], chunk):
        feats = batch_features(y[start:start + chunk], clusters, 1.0,
                               dtype=np.float64)
        total += float(np.sum(feats * feats))
        count += feats.size
    return np.sqrt(total / count)


class _Adam:
    def __init__(self, params, lr, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.b1, self.b2, self.eps = lr, beta1, beta2, eps
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.t = 0

    def step(self, params, grads):
        self.t += 1
        b1t = 1.0 - self.b1**self.t
        b2t = 1.0 - self.b2**self.t
        for p, g, m, v in zip(params, grads, self.m, self.v):
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            p -= self.lr * (m / b1t) / (np.sqrt(v / b2t) + self.eps)


def train(dataset, hyper: MlpHyperparams,
          rng: np.random.Generator | None = None) -> MlpModel:
    """Mini-batch Adam on the multi-label cross-entropy, with early stopping.

    `dataset` provides signals (S, M, N, L), labels (S, K), a cluster
    assignment and train/val index ranges (see cfadet.dataset.Dataset).
    Keeps the best-validation weights; deterministic for a fixed seed.
    """
    if rng is None:
        rng = np.random.default_rng(hyper.seed)
    train_idx = dataset.split_indices("train")
    val_idx = dataset.split_indices("val")
    if train_idx.size == 0 or val_idx.size == 0:
        raise ValueError("training requires nonempty train and val splits")

    y = dataset.signals
    labels = dataset.labels
    clusters = dataset.clusters
    T = clusters.shape[1]
    N, L = y.shape[2], y.shape[3]
    input_dim = 2 * N * L
    dtype = np.dtype(hyper.dtype)

    scale = 1.0 / feature_rms(y[train_idx], clusters)
    model = init_model(hyper, input_dim, T, rng, norm_scale=scale)

    params = [p for _, p in model.parameters()]
    opt = _Adam(params, hyper.learning_rate)

    def eval_loss(idx):
        total = 0.0
        for start in range(0, idx.size, 512):
            sel = idx[start:start + 512]
            feats = batch_features(y[sel], clusters, scale, dtype=dtype)
            B, K = feats.shape[0], feats.shape[1]
            probs = _forward_batch(model, feats.reshape(B * K, T, input_dim))
            total += bce_loss(probs, labels[sel].ravel())
        return total / idx.size

    best = model.copy()
    best_val = np.inf
    bad_epochs = 0
    train_hist, val_hist = [], []

    for epoch in range(hyper.max_epochs):
        perm = train_idx[rng.permutation(train_idx.size)]
        epoch_loss = 0.0
        for start in range(0, perm.size, hyper.batch_size):
            sel = perm[start:start + hyper.batch_size]
            feats = batch_features(y[sel], clusters, scale, dtype=dtype)
            B, K = feats.shape[0], feats.shape[1]
            X = feats.reshape(B * K, T, input_dim)
            lab = labels[sel].ravel()
            loss, grads = _backward_batch(model, X, lab, hyper.positive_weight)
            if not np.isfinite(loss):
                raise RuntimeError(f"training diverged at epoch {epoch}")
            opt.step(params, grads)
            epoch_loss += loss * sel.size
        train_hist.append(epoch_loss / perm.size)

        val_loss = eval_loss(val_idx)
        val_hist.append(val_loss)
        if not np.isfinite(val_loss):
            raise RuntimeError(f"training diverged at epoch {epoch}")
        if val_loss < best_val:
            best_val = val_loss
            best = model.copy()
            bad_epochs = 0
        else:
            bad_epochs += 1
            if bad_epochs >= hyper.patience:
                break

    best.history = {
        "train_loss": train_hist,
        "val_loss": val_hist,
        "best_val_loss": float(best_val),
        "epochs_run": len(train_hist),
    }
    return best


# ---------------------------------------------------------------------------
# checkpoint format
#
# Little-endian binary: magic "DMLP", u32 version, u32 Z, u32 V, u32 T,
# u32 input_dim, u32 flags (bit 0 = untied branches), f64 norm_scale,
# then every parameter tensor from parameters() in declaration order as
# float32 values. Reading and re-writing a file reproduces it bit-exactly.
# ---------------------------------------------------------------------------

_HEADER = struct.Struct("<4sIIIIIId")


def save_checkpoint(model: MlpModel, path) -> None:
    flags = 0 if model.tied else FLAG_UNTIED
    header = _HEADER.pack(
        CHECKPOINT_MAGIC, CHECKPOINT_VERSION, model.hidden_layers,
        model.neurons_per_layer, model.branch_count, model.input_dim,
        flags, model.norm_scale,
    )
    with open(path, "wb") as fh:
        fh.write(header)
        for _, p in model.parameters():
            fh.write(np.ascontiguousarray(p, dtype="<f4").tobytes())


def load_checkpoint(path) -> MlpModel:
    with open(path, "rb") as fh:
        raw = fh.read(_HEADER.size)
        if len(raw) != _HEADER.size:
            raise ValueError("truncated checkpoint header")
        magic, version, Z, V, T, input_dim, flags, norm = _HEADER.unpack(raw)
        if magic != CHECKPOINT_MAGIC:
            raise ValueError("not a model checkpoint (bad magic)")
        if version != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {version}")
        tied = not flags & FLAG_UNTIED

        def read_tensor(shape):
            n = int(np.prod(shape))
            buf = fh.read(4 * n)
            if len(buf) != 4 * n:
                raise ValueError("truncated checkpoint tensors")
            return np.frombuffer(buf, dtype="<f4").reshape(shape).astype(
                np.float64
            )

        n_stacks = 1 if tied else T
        branch_layers = []
        for _ in range(n_stacks):
            layers = []
            fan_in = input_dim
            for _ in range(Z):
                W = read_tensor((fan_in, V))
                b = read_tensor((V,))
                layers.append((W, b))
                fan_in = V
            branch_layers.append(layers)
        head_w = read_tensor((T * V,))
        head_b = read_tensor((1,))
        if fh.read(1):
            raise ValueError("trailing bytes after checkpoint tensors")
    return MlpModel(
        input_dim=input_dim, branch_count=T, branch_layers=branch_layers,
        head_w=head_w, head_b=head_b, norm_scale=norm, tied=tied,
    )
