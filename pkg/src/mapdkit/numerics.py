"""Dense MLP forward/backward, Adam, softmax and Gaussian reparameterization.

Everything here is plain float64 numpy. Networks are tanh MLPs with an
identity output layer; gradients are written out by hand for that shape.

The ``mlp_forward``/``mlp_backward`` primitives broadcast over leading axes,
so the same code drives a single network (weights ``(in, out)``) and a stack
of per-agent networks (weights ``(n_agents, in, out)``).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

BETA1 = 0.9
BETA2 = 0.999
ADAM_EPS = 1e-8


def layer_shapes(sizes: list[int]) -> list[tuple[tuple[int, int], tuple[int]]]:
    return [((sizes[i], sizes[i + 1]), (sizes[i + 1],)) for i in range(len(sizes) - 1)]


def count_params(sizes: list[int]) -> int:
    return sum(a * b + b for a, b in zip(sizes[:-1], sizes[1:]))


def mlp_forward(weights, biases, x):
    """Run a tanh MLP and return every layer's activation.

    ``acts[0]`` is the input and ``acts[-1]`` the (linear) output. Weights have
    shape ``(*lead, in, out)``, biases ``(*lead, out)`` and ``x`` has shape
    ``(*lead, batch, in)``.
    """
    acts = [x]
    h = x
    last = len(weights) - 1
    for l, (w, b) in enumerate(zip(weights, biases)):
        h = h @ w + b[..., None, :]
        if l < last:
            h = np.tanh(h)
        acts.append(h)
    return acts


def mlp_backward(weights, acts, grad_out):
    """Backpropagate ``grad_out`` (d loss / d output) through a tanh MLP.

    Returns ``(dweights, dbiases, dinput)``; parameter gradients are summed
    over the batch axis.
    """
    dws = [None] * len(weights)
    dbs = [None] * len(weights)
    delta = grad_out
    for l in range(len(weights) - 1, -1, -1):
        a_in = acts[l]
        dws[l] = np.swapaxes(a_in, -1, -2) @ delta
        dbs[l] = delta.sum(axis=-2)
        delta = delta @ np.swapaxes(weights[l], -1, -2)
        if l > 0:
            delta = delta * (1.0 - a_in * a_in)
    return dws, dbs, delta


def flatten_layers(ws, bs) -> np.ndarray:
    """Pack per-layer arrays into one vector along the last axis (W0, b0, W1, b1, ...)."""
    lead = ws[0].shape[:-2]
    parts = []
    for w, b in zip(ws, bs):
        parts.append(w.reshape(lead + (-1,)))
        parts.append(b.reshape(lead + (-1,)))
    return np.concatenate(parts, axis=-1)


def unflatten_layers(flat: np.ndarray, sizes: list[int]):
    lead = flat.shape[:-1]
    if flat.shape[-1] != count_params(sizes):
        raise ValueError(f"expected {count_params(sizes)} parameters, got {flat.shape[-1]}")
    ws, bs = [], []
    o = 0
    for (wshape, bshape) in layer_shapes(sizes):
        n = wshape[0] * wshape[1]
        ws.append(flat[..., o:o + n].reshape(lead + wshape))
        o += n
        bs.append(flat[..., o:o + bshape[0]].reshape(lead + bshape))
        o += bshape[0]
    return ws, bs


@dataclass
class Mlp:
    """A single tanh MLP with an identity output layer."""

    weights: list[np.ndarray]
    biases: list[np.ndarray]

    @classmethod
    def init(cls, sizes, rng: np.random.Generator, out_scale: float = 1.0) -> "Mlp":
        if len(sizes) < 2 or any(s < 1 for s in sizes):
            raise ValueError(f"invalid layer sizes {sizes}")
        ws, bs = [], []
        for i, ((n_in, n_out), _) in enumerate(layer_shapes(list(sizes))):
            scale = 1.0 / np.sqrt(n_in)
            if i == len(sizes) - 2:
                scale *= out_scale
            ws.append(rng.normal(0.0, scale, size=(n_in, n_out)))
            bs.append(np.zeros(n_out))
        return cls(ws, bs)

    @classmethod
    def zeros(cls, sizes) -> "Mlp":
        shapes = layer_shapes(list(sizes))
        return cls([np.zeros(w) for w, _ in shapes], [np.zeros(b) for _, b in shapes])

    @property
    def sizes(self) -> list[int]:
        return [self.weights[0].shape[0]] + [w.shape[1] for w in self.weights]

    @property
    def param_count(self) -> int:
        return count_params(self.sizes)

    def get_flat(self) -> np.ndarray:
        return flatten_layers(self.weights, self.biases)

    def set_flat(self, flat: np.ndarray) -> None:
        ws, bs = unflatten_layers(np.asarray(flat, dtype=np.float64), self.sizes)
        self.weights = [w.copy() for w in ws]
        self.biases = [b.copy() for b in bs]

    def copy(self) -> "Mlp":
        return Mlp([w.copy() for w in self.weights], [b.copy() for b in self.biases])


def _as_batch(net: Mlp, x) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    if single:
        x = x[None, :]
    if x.shape[-1] != net.sizes[0]:
        raise ValueError(f"input has {x.shape[-1]} features, network expects {net.sizes[0]}")
    return x, single


def forward(net: Mlp, x) -> np.ndarray:
    """Evaluate ``net`` on a vector or a ``(batch, in)`` array."""
    xb, single = _as_batch(net, x)
    out = mlp_forward(net.weights, net.biases, xb)[-1]
    return out[0] if single else out


def backward(net: Mlp, x, grad_out) -> np.ndarray:
    """Flat parameter gradient of ``sum(grad_out * forward(net, x))``.

    For batched input the gradient is summed over the batch.
    """
    xb, single = _as_batch(net, x)
    g = np.asarray(grad_out, dtype=np.float64)
    if single:
        g = g[None, :]
    if g.shape != (xb.shape[0], net.sizes[-1]):
        raise ValueError(f"output gradient shape {g.shape} does not match network output")
    acts = mlp_forward(net.weights, net.biases, xb)
    dws, dbs, _ = mlp_backward(net.weights, acts, g)
    return flatten_layers(dws, dbs)


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    # Scalar, or one counter per leading row when stepping several vectors at once.
    t: np.ndarray | int = 0
    beta1: float = BETA1
    beta2: float = BETA2
    eps: float = ADAM_EPS

    @classmethod
    def zeros_like(cls, params: np.ndarray, per_row: bool = False) -> "AdamState":
        t = np.zeros(params.shape[0], dtype=np.int64) if per_row else 0
        return cls(np.zeros_like(params), np.zeros_like(params), t)

    def copy(self) -> "AdamState":
        t = self.t.copy() if isinstance(self.t, np.ndarray) else self.t
        return AdamState(self.m.copy(), self.v.copy(), t, self.beta1, self.beta2, self.eps)


def adam_step(params: np.ndarray, grads: np.ndarray, state: AdamState, lr: float) -> np.ndarray:
    """Return the Adam-updated parameters and advance ``state`` in place.

    Raises FloatingPointError (leaving ``state`` untouched) on non-finite
    gradients.
    """
    if params.shape != grads.shape or params.shape != state.m.shape:
        raise ValueError(f"shape mismatch: params {params.shape}, grads {grads.shape}, state {state.m.shape}")
    if not np.all(np.isfinite(grads)):
        raise FloatingPointError("non-finite gradient; Adam step skipped")
    t = np.asarray(state.t) + 1
    bc1 = 1.0 - state.beta1 ** t
    bc2 = 1.0 - state.beta2 ** t
    if bc1.ndim:
        extra = (1,) * (params.ndim - bc1.ndim)
        bc1 = bc1.reshape(bc1.shape + extra)
        bc2 = bc2.reshape(bc2.shape + extra)
    state.m = state.beta1 * state.m + (1.0 - state.beta1) * grads
    state.v = state.beta2 * state.v + (1.0 - state.beta2) * grads * grads
    state.t = t if isinstance(state.t, np.ndarray) else int(t)
    m_hat = state.m / bc1
    v_hat = state.v / bc2
    return params - lr * m_hat / (np.sqrt(v_hat) + state.eps)


def softmax(logits, temperature: float = 1.0) -> np.ndarray:
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    z = np.asarray(logits, dtype=np.float64) / temperature
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def log_softmax(logits) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


@dataclass
class LatentGaussian:
    """Diagonal Gaussian; std is stored as its log so it stays positive."""

    mean: np.ndarray
    log_std: np.ndarray = field(default=None)

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=np.float64)
        if self.log_std is None:
            self.log_std = np.zeros_like(self.mean)
        self.log_std = np.asarray(self.log_std, dtype=np.float64)
        if self.mean.shape != self.log_std.shape:
            raise ValueError("mean and log_std must have the same shape")

    @classmethod
    def from_std(cls, mean, std) -> "LatentGaussian":
        std = np.asarray(std, dtype=np.float64)
        if np.any(std <= 0):
            raise ValueError("std must be positive")
        return cls(mean, np.log(std))

    @property
    def std(self) -> np.ndarray:
        return np.exp(self.log_std)

    @property
    def dim(self) -> int:
        return self.mean.shape[-1]

    def sample(self, noise) -> np.ndarray:
        return reparam_sample(self.mean, self.std, noise)


def reparam_sample(mean, std, noise) -> np.ndarray:
    """Draw ``z = mean + std * noise`` (differentiable in mean and std)."""
    mean = np.asarray(mean, dtype=np.float64)
    std = np.asarray(std, dtype=np.float64)
    noise = np.asarray(noise, dtype=np.float64)
    if noise.shape[-1] != mean.shape[-1]:
        raise ValueError(f"noise dimension {noise.shape[-1]} != latent dimension {mean.shape[-1]}")
    if np.any(std < 0):
        raise ValueError("negative standard deviation")
    return mean + std * noise
