"""Dense feed-forward networks with hand-rolled reverse-mode gradients.

Everything the simulator needs from a model lives here: forward pass,
softmax cross-entropy, parameter gradients, Hessian-vector products via
central differences of the gradient, input-Jacobian spectral norm via
power iteration, SGD/Adam steps, and the binary checkpoint format.

Parameters are a single flat float64 vector; per-layer weight/bias
matrices are reshaped views into it, so flatten/unflatten is the
identity. The compiled/numpy kernel split lives in fedfair.backend.
"""

import json
from dataclasses import dataclass

import numpy as np

from fedfair import backend
from fedfair.errors import CheckpointError, NonFiniteError

ACTIVATIONS = ("relu", "tanh")
_ACT_CODE = {"relu": 0, "tanh": 1}

# Finite-difference step scales, relative to max(1, |reference|_inf).
HVP_EPS = 1e-4
JVP_EPS = 1e-6

CHECKPOINT_SUFFIX = ".mlp"


@dataclass
class Batch:
    """A minibatch: inputs [n, dim] float64, labels [n] int64."""

    inputs: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        self.inputs = np.ascontiguousarray(self.inputs, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.inputs.ndim != 2 or self.inputs.shape[0] < 1:
            raise ValueError(f"inputs must be [n>=1, dim], got shape {self.inputs.shape}")
        if self.labels.shape != (self.inputs.shape[0],):
            raise ValueError("labels must be one int per input row")
        if self.labels.min() < 0:
            raise ValueError("labels must be nonnegative")

    def __len__(self):
        return self.inputs.shape[0]


class MLP:
    """Feed-forward classifier; linear output layer before softmax.

    sizes = [dim_in, hidden..., n_classes]. The flat vector packs each
    layer as weight (row-major [out, in]) followed by bias [out].
    """

    def __init__(self, sizes, activation="relu", flat=None, seed_lineage=""):
        sizes = [int(s) for s in sizes]
        if len(sizes) < 2 or any(s < 1 for s in sizes):
            raise ValueError(f"sizes must be >= 2 positive entries, got {sizes}")
        if activation not in ACTIVATIONS:
            raise ValueError(f"activation must be one of {ACTIVATIONS}, got {activation!r}")
        self.sizes = tuple(sizes)
        self.activation = activation
        self.seed_lineage = seed_lineage
        d = self.num_params
        if flat is None:
            flat = np.zeros(d)
        flat = np.ascontiguousarray(flat, dtype=np.float64)
        if flat.shape != (d,):
            raise ValueError(f"flat vector must have length {d}, got {flat.shape}")
        self.flat = flat

    @property
    def num_params(self) -> int:
        return sum((self.sizes[i] + 1) * self.sizes[i + 1] for i in range(len(self.sizes) - 1))

    @property
    def dim_in(self) -> int:
        return self.sizes[0]

    @property
    def n_classes(self) -> int:
        return self.sizes[-1]

    def layer(self, i):
        """(weight view [out, in], bias view [out]) for layer i."""
        off = 0
        for layer in range(len(self.sizes) - 1):
            nin, nout = self.sizes[layer], self.sizes[layer + 1]
            if layer == i:
                W = self.flat[off : off + nout * nin].reshape(nout, nin)
                b = self.flat[off + nout * nin : off + nout * nin + nout]
                return W, b
            off += nout * nin + nout
        raise IndexError(i)

    @property
    def n_layers(self) -> int:
        return len(self.sizes) - 1

    def copy(self) -> "MLP":
        return MLP(self.sizes, self.activation, self.flat.copy(), self.seed_lineage)

    def with_flat(self, flat) -> "MLP":
        return MLP(self.sizes, self.activation, flat, self.seed_lineage)

    @classmethod
    def init(cls, sizes, activation="relu", rng=None, seed_lineage="") -> "MLP":
        """He init for relu, 1/fan_in for tanh; zero biases."""
        rng = rng if rng is not None else np.random.default_rng(0)
        model = cls(sizes, activation, seed_lineage=seed_lineage)
        gain = 2.0 if activation == "relu" else 1.0
        for i in range(model.n_layers):
            W, b = model.layer(i)
            W[...] = rng.normal(0.0, np.sqrt(gain / W.shape[1]), size=W.shape)
            b[...] = 0.0
        return model

    def wire_bytes(self) -> bytes:
        """Parameters as the little-endian float32 wire/checkpoint payload."""
        return self.flat.astype("<f4").tobytes()

    def quantize_wire(self) -> "MLP":
        """Round parameters in place to the float32 wire grid.

        Applied to every model that crosses the client/server boundary so
        that in-memory models and their checkpoints carry identical values.
        """
        self.flat[...] = np.frombuffer(self.wire_bytes(), dtype="<f4").astype(np.float64)
        return self


def save_model(model: MLP, path) -> None:
    header = {
        "sizes": list(model.sizes),
        "activation": model.activation,
        "param_count": model.num_params,
        "seed_lineage": model.seed_lineage,
    }
    with open(path, "wb") as fh:
        fh.write(json.dumps(header, sort_keys=True).encode("utf-8"))
        fh.write(b"\n")
        fh.write(model.wire_bytes())


def load_model(path) -> MLP:
    try:
        with open(path, "rb") as fh:
            raw = fh.read()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    nl = raw.find(b"\n")
    if nl < 0:
        raise CheckpointError(f"checkpoint {path} has no header line")
    try:
        header = json.loads(raw[:nl].decode("utf-8"))
        sizes = header["sizes"]
        activation = header["activation"]
        count = header["param_count"]
        lineage = header.get("seed_lineage", "")
    except (ValueError, KeyError, UnicodeDecodeError) as exc:
        raise CheckpointError(f"checkpoint {path} has a corrupt header: {exc}") from exc
    payload = raw[nl + 1 :]
    if len(payload) != 4 * count:
        raise CheckpointError(
            f"checkpoint {path}: payload holds {len(payload)} bytes, expected {4 * count}"
        )
    flat = np.frombuffer(payload, dtype="<f4").astype(np.float64)
    try:
        return MLP(sizes, activation, flat, lineage)
    except (ValueError, TypeError) as exc:
        raise CheckpointError(f"checkpoint {path}: inconsistent header: {exc}") from exc


def forward(model: MLP, batch: Batch) -> np.ndarray:
    """Logits [n, C]."""
    if batch.inputs.shape[1] != model.dim_in:
        raise ValueError(
            f"batch width {batch.inputs.shape[1]} != model input width {model.dim_in}"
        )
    return backend.forward(model.flat, model.sizes, _ACT_CODE[model.activation], batch.inputs)[-1]


def _forward_acts(model: MLP, inputs: np.ndarray):
    if inputs.shape[1] != model.dim_in:
        raise ValueError(f"input width {inputs.shape[1]} != model input width {model.dim_in}")
    return backend.forward(model.flat, model.sizes, _ACT_CODE[model.activation], inputs)


def _log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def ce_per_example(logits: np.ndarray, labels) -> np.ndarray:
    """Softmax cross-entropy of each row."""
    labels = np.asarray(labels, dtype=np.int64)
    if labels.min() < 0 or labels.max() >= logits.shape[1]:
        raise ValueError(f"labels out of range [0, {logits.shape[1]})")
    return -_log_softmax(logits)[np.arange(logits.shape[0]), labels]


def loss_ce(logits: np.ndarray, labels) -> float:
    """Mean softmax cross-entropy over the batch; >= 0."""
    return float(ce_per_example(logits, labels).mean())


def _ce_dlogits(logits: np.ndarray, labels: np.ndarray) -> np.ndarray:
    # d(mean CE)/dlogits = (softmax - onehot) / n
    n = logits.shape[0]
    p = np.exp(_log_softmax(logits))
    p[np.arange(n), labels] -= 1.0
    return p / n


def loss_and_grad(model: MLP, batch: Batch):
    """(mean CE loss, flat gradient) in one forward/backward pass."""
    acts = _forward_acts(model, batch.inputs)
    logits = acts[-1]
    if batch.labels.max() >= model.n_classes:
        raise ValueError(f"labels out of range [0, {model.n_classes})")
    loss = loss_ce(logits, batch.labels)
    dflat, _ = backend.backward(
        model.flat, model.sizes, _ACT_CODE[model.activation], acts,
        _ce_dlogits(logits, batch.labels),
    )
    if not np.all(np.isfinite(dflat)):
        raise NonFiniteError("gradient contains NaN/Inf")
    return loss, dflat


def grad(model: MLP, batch: Batch) -> np.ndarray:
    """Flat gradient of the mean cross-entropy loss."""
    return loss_and_grad(model, batch)[1]


def fd_hvp(grad_fn, theta: np.ndarray, v: np.ndarray, eps: float) -> np.ndarray:
    """Hessian-vector product by central differences of a gradient function.

    (grad(theta + eps*v_hat) - grad(theta - eps*v_hat)) * |v| / (2 eps),
    with v_hat = v/|v|. Exposed separately so quadratic surrogates can be
    pushed through the exact code path the model uses.
    """
    norm = float(np.linalg.norm(v))
    if norm == 0.0:
        return np.zeros_like(v)
    v_hat = v / norm
    g_plus = grad_fn(theta + eps * v_hat)
    g_minus = grad_fn(theta - eps * v_hat)
    out = (g_plus - g_minus) * (norm / (2.0 * eps))
    if not np.all(np.isfinite(out)):
        raise NonFiniteError("Hessian-vector product contains NaN/Inf")
    return out


def hvp(model: MLP, batch: Batch, v: np.ndarray) -> np.ndarray:
    """H @ v for the loss Hessian in parameter space."""
    v = np.asarray(v, dtype=np.float64)
    if v.shape != model.flat.shape:
        raise ValueError(f"v must have length {model.num_params}")
    eps = HVP_EPS * max(1.0, float(np.abs(model.flat).max(initial=0.0)))

    def grad_at(theta):
        return grad(model.with_flat(theta), batch)

    return fd_hvp(grad_at, model.flat, v, eps)


def _jvp_input(model: MLP, inputs: np.ndarray, V: np.ndarray, base_logits: np.ndarray):
    """Row-wise J @ v by forward differences of the logits."""
    h = JVP_EPS * max(1.0, float(np.abs(inputs).max(initial=0.0)))
    shifted = _forward_acts(model, inputs + h * V)[-1]
    return (shifted - base_logits) / h


def _vjp_input(model: MLP, acts, U: np.ndarray) -> np.ndarray:
    """Row-wise J^T @ u by a reverse pass to the inputs."""
    _, dX = backend.backward(
        model.flat, model.sizes, _ACT_CODE[model.activation], acts, U,
        want_param_grad=False, want_input_grad=True,
    )
    return dX


def _normalize_rows(V: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(V, axis=1, keepdims=True)
    norms[norms == 0.0] = 1.0
    return V / norms


def jacobian_input_spectral_norm(model: MLP, batch: Batch, iters: int, rng=None,
                           return_vectors: bool = False):
    """Largest singular value of the input->logits Jacobian, batch mean.

    Power iteration per batch row, alternating J@v (forward difference)
    and J^T@u (reverse pass). With return_vectors=True also returns the
    final unit input directions, used as frozen vectors by the training
    penalty.
    """
    if iters < 1:
        raise ValueError("iters must be >= 1")
    rng = rng if rng is not None else np.random.default_rng(0)
    inputs = batch.inputs
    acts = _forward_acts(model, inputs)
    logits = acts[-1]
    V = _normalize_rows(rng.standard_normal(inputs.shape))
    U = _jvp_input(model, inputs, V, logits)
    for _ in range(iters - 1):
        V = _normalize_rows(_vjp_input(model, acts, U))
        U = _jvp_input(model, inputs, V, logits)
    sigma = np.linalg.norm(U, axis=1)
    estimate = float(sigma.mean())
    if return_vectors:
        return estimate, V
    return estimate


def jacobian_penalty_value_and_grad(model: MLP, inputs: np.ndarray, V_star: np.ndarray):
    """Value and parameter gradient of mean_i |J_i v*_i|.

    The power-iteration vectors V_star are frozen: the penalty is the
    forward-difference surrogate mean_i |f(x_i + h v*_i) - f(x_i)| / h,
    a plain function of two forward passes, so one reverse pass per
    forward gives its exact gradient.
    """
    n = inputs.shape[0]
    h = JVP_EPS * max(1.0, float(np.abs(inputs).max(initial=0.0)))
    acts0 = _forward_acts(model, inputs)
    acts1 = _forward_acts(model, inputs + h * V_star)
    U = (acts1[-1] - acts0[-1]) / h
    sigma = np.linalg.norm(U, axis=1)
    value = float(sigma.mean())
    safe = np.where(sigma > 0.0, sigma, 1.0)
    cot = U / (n * h * safe[:, None])
    cot[sigma == 0.0] = 0.0
    act = _ACT_CODE[model.activation]
    d1, _ = backend.backward(model.flat, model.sizes, act, acts1, cot)
    d0, _ = backend.backward(model.flat, model.sizes, act, acts0, -cot)
    g = d1 + d0
    if not np.all(np.isfinite(g)):
        raise NonFiniteError("Jacobian penalty gradient contains NaN/Inf")
    return value, g


def _check_step(flat: np.ndarray, what: str) -> None:
    if not np.all(np.isfinite(flat)):
        raise NonFiniteError(f"{what} produced non-finite parameters")


def sgd_step(model: MLP, g: np.ndarray, lr: float) -> MLP:
    if lr <= 0:
        raise ValueError("lr must be > 0")
    model.flat -= lr * g
    _check_step(model.flat, "sgd step")
    return model


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0

    @classmethod
    def zeros(cls, d: int) -> "AdamState":
        return cls(np.zeros(d), np.zeros(d))


def adam_step(model: MLP, g: np.ndarray, state: AdamState, lr: float,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
    """Bias-corrected Adam update; mutates model and state."""
    if lr <= 0:
        raise ValueError("lr must be > 0")
    state.t += 1
    state.m = beta1 * state.m + (1.0 - beta1) * g
    state.v = beta2 * state.v + (1.0 - beta2) * g * g
    m_hat = state.m / (1.0 - beta1 ** state.t)
    v_hat = state.v / (1.0 - beta2 ** state.t)
    model.flat -= lr * m_hat / (np.sqrt(v_hat) + eps)
    _check_step(model.flat, "adam step")
    return model, state


def accuracy(model: MLP, batch: Batch) -> float:
    preds = forward(model, batch).argmax(axis=1)
    return float((preds == batch.labels).mean())
