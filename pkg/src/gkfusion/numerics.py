"""Dense vector arithmetic, a small feed-forward network with analytic
gradients, the Adam optimizer, and a finite-difference gradient checker.

Everything here works on 64-bit numpy arrays. Operations are pure given
their inputs; network parameters are only mutated by the optimizer.
"""

from __future__ import annotations

import hashlib

import numpy as np

from .errors import DimensionError, InvalidArgument, StateError, ZeroNormError

ACTIVATIONS = ("relu", "tanh", "identity")


def derive_seed(seed: int, label: str) -> int:
    """Derive a stable per-component seed from one master seed."""
    digest = hashlib.blake2b(f"{seed}:{label}".encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(digest, "little")


def as_vec(values, dim: int | None = None) -> np.ndarray:
    """Validate and return a finite 1-D float64 vector."""
    v = np.asarray(values, dtype=np.float64)
    if v.ndim != 1:
        raise DimensionError(f"expected a 1-D vector, got shape {v.shape}")
    if dim is not None and v.shape[0] != dim:
        raise DimensionError(f"expected dim {dim}, got {v.shape[0]}")
    if not np.all(np.isfinite(v)):
        raise InvalidArgument("vector contains non-finite values")
    return v


def cosine(a, b) -> float:
    """Cosine similarity of two non-zero vectors, clipped into [-1, 1]."""
    va = as_vec(a)
    vb = as_vec(b)
    if va.shape[0] != vb.shape[0]:
        raise DimensionError(f"dim mismatch: {va.shape[0]} vs {vb.shape[0]}")
    na = float(np.linalg.norm(va))
    nb = float(np.linalg.norm(vb))
    if na == 0.0 or nb == 0.0:
        raise ZeroNormError("cosine undefined for zero-norm vector")
    return float(np.clip(np.dot(va, vb) / (na * nb), -1.0, 1.0))


def _apply_activation(name: str, z: np.ndarray) -> np.ndarray:
    if name == "relu":
        return np.maximum(z, 0.0)
    if name == "tanh":
        return np.tanh(z)
    return z


def _activation_grad(name: str, z: np.ndarray, a: np.ndarray) -> np.ndarray:
    if name == "relu":
        return (z > 0.0).astype(np.float64)
    if name == "tanh":
        return 1.0 - a * a
    return np.ones_like(z)


class FFNN:
    """Fully-connected network: x @ W + b per layer, fixed activation menu.

    Weights are stored as (in, out) matrices so batches are row-major:
    ``forward`` accepts a single vector or an (n, in_dim) matrix.
    """

    def __init__(self, dims: list[int], activations: list[str], seed: int = 0):
        if len(dims) < 2:
            raise InvalidArgument("need at least an input and an output dim")
        if len(activations) != len(dims) - 1:
            raise InvalidArgument("one activation per layer required")
        for act in activations:
            if act not in ACTIVATIONS:
                raise InvalidArgument(f"unknown activation {act!r}")
        if any(d < 1 for d in dims):
            raise InvalidArgument("layer dims must be positive")
        self.dims = list(dims)
        self.activations = list(activations)
        rng = np.random.default_rng(seed)
        self.weights: list[np.ndarray] = []
        self.biases: list[np.ndarray] = []
        for fan_in, fan_out in zip(dims[:-1], dims[1:]):
            bound = np.sqrt(6.0 / (fan_in + fan_out))
            self.weights.append(rng.uniform(-bound, bound, size=(fan_in, fan_out)))
            self.biases.append(np.zeros(fan_out))

    @property
    def in_dim(self) -> int:
        return self.dims[0]

    @property
    def out_dim(self) -> int:
        return self.dims[-1]

    def parameters(self) -> list[np.ndarray]:
        """Flat parameter list, weights and biases interleaved per layer."""
        params = []
        for w, b in zip(self.weights, self.biases):
            params.append(w)
            params.append(b)
        return params

    def set_parameters(self, params: list[np.ndarray]) -> None:
        expected = self.parameters()
        if len(params) != len(expected):
            raise DimensionError("parameter count mismatch")
        for i, (p, e) in enumerate(zip(params, expected)):
            if p.shape != e.shape:
                raise DimensionError(f"parameter {i} shape {p.shape} != {e.shape}")
        n_layers = len(self.weights)
        for layer in range(n_layers):
            self.weights[layer] = np.asarray(params[2 * layer], dtype=np.float64)
            self.biases[layer] = np.asarray(params[2 * layer + 1], dtype=np.float64)

    def _check_input(self, x: np.ndarray) -> tuple[np.ndarray, bool]:
        arr = np.asarray(x, dtype=np.float64)
        single = arr.ndim == 1
        if single:
            arr = arr[None, :]
        if arr.ndim != 2 or arr.shape[1] != self.in_dim:
            raise DimensionError(f"input shape {np.shape(x)} incompatible with in_dim {self.in_dim}")
        return arr, single

    def forward(self, x) -> np.ndarray:
        y, _ = self.forward_cached(x)
        return y

    def forward_cached(self, x) -> tuple[np.ndarray, "FFNNCache"]:
        """Forward pass that keeps pre/post-activations for backward."""
        arr, single = self._check_input(x)
        pre: list[np.ndarray] = []
        post: list[np.ndarray] = [arr]
        h = arr
        for w, b, act in zip(self.weights, self.biases, self.activations):
            z = h @ w + b
            a = _apply_activation(act, z)
            pre.append(z)
            post.append(a)
            h = a
        cache = FFNNCache(net=self, pre=pre, post=post, single=single)
        return (h[0] if single else h), cache

    def backward(self, cache: "FFNNCache", grad_out) -> tuple[list[np.ndarray], np.ndarray]:
        """Backprop an upstream gradient through a cached forward pass.

        Returns (parameter gradients in ``parameters()`` order, input
        gradient). Batch caches sum parameter gradients over rows.
        """
        if cache.net is not self or cache.consumed_by_mutation():
            raise StateError("cache does not match this network's current parameters")
        g = np.asarray(grad_out, dtype=np.float64)
        if cache.single:
            g = g[None, :]
        if g.ndim != 2 or g.shape[1] != self.out_dim or g.shape[0] != cache.post[-1].shape[0]:
            raise DimensionError("upstream gradient shape mismatch")
        w_grads: list[np.ndarray] = [None] * len(self.weights)  # type: ignore[list-item]
        b_grads: list[np.ndarray] = [None] * len(self.biases)  # type: ignore[list-item]
        for layer in range(len(self.weights) - 1, -1, -1):
            dz = g * _activation_grad(self.activations[layer], cache.pre[layer], cache.post[layer + 1])
            w_grads[layer] = cache.post[layer].T @ dz
            b_grads[layer] = dz.sum(axis=0)
            g = dz @ self.weights[layer].T
        grads = []
        for wg, bg in zip(w_grads, b_grads):
            grads.append(wg)
            grads.append(bg)
        dx = g[0] if cache.single else g
        return grads, dx


class FFNNCache:
    """Activations saved by ``forward_cached``; invalidated by param updates."""

    def __init__(self, net: FFNN, pre: list[np.ndarray], post: list[np.ndarray], single: bool):
        self.net = net
        self.pre = pre
        self.post = post
        self.single = single
        self._param_ids = tuple(id(p) for p in net.parameters())

    def consumed_by_mutation(self) -> bool:
        return tuple(id(p) for p in self.net.parameters()) != self._param_ids


class Adam:
    """Standard bias-corrected Adam over a list of parameter arrays."""

    def __init__(self, lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        if lr <= 0:
            raise InvalidArgument("learning rate must be positive")
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step_count = 0
        self._m: list[np.ndarray] | None = None
        self._v: list[np.ndarray] | None = None

    def step(self, params: list[np.ndarray], grads: list[np.ndarray]) -> list[np.ndarray]:
        """One update; returns new parameter arrays (inputs untouched)."""
        if len(params) != len(grads):
            raise DimensionError("params/grads length mismatch")
        for p, g in zip(params, grads):
            if p.shape != np.shape(g):
                raise DimensionError(f"grad shape {np.shape(g)} != param shape {p.shape}")
        if self._m is None:
            self._m = [np.zeros_like(p) for p in params]
            self._v = [np.zeros_like(p) for p in params]
        self.step_count += 1
        t = self.step_count
        out = []
        for i, (p, g) in enumerate(zip(params, grads)):
            g = np.asarray(g, dtype=np.float64)
            self._m[i] = self.beta1 * self._m[i] + (1 - self.beta1) * g
            self._v[i] = self.beta2 * self._v[i] + (1 - self.beta2) * (g * g)
            m_hat = self._m[i] / (1 - self.beta1**t)
            v_hat = self._v[i] / (1 - self.beta2**t)
            out.append(p - self.lr * m_hat / (np.sqrt(v_hat) + self.eps))
        return out


def grad_check(net: FFNN, loss_and_grad, h: float = 1e-5) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``loss_and_grad(net)`` must return ``(loss, grads)`` with grads in
    ``net.parameters()`` order. The network is restored before returning.
    """
    if h <= 0:
        raise InvalidArgument("step size h must be positive")
    _, analytic = loss_and_grad(net)
    params = net.parameters()
    if len(analytic) != len(params):
        raise DimensionError("analytic gradient count mismatch")
    worst = 0.0
    for p, g in zip(params, analytic):
        flat_p = p.reshape(-1)
        flat_g = np.asarray(g, dtype=np.float64).reshape(-1)
        for idx in range(flat_p.size):
            orig = flat_p[idx]
            flat_p[idx] = orig + h
            plus, _ = loss_and_grad(net)
            flat_p[idx] = orig - h
            minus, _ = loss_and_grad(net)
            flat_p[idx] = orig
            numeric = (plus - minus) / (2 * h)
            err = abs(flat_g[idx] - numeric) / max(1e-8, abs(numeric))
            worst = max(worst, err)
    return worst


def softmax_cross_entropy(logits: np.ndarray, labels: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean cross-entropy over rows plus the gradient w.r.t. logits."""
    z = logits - logits.max(axis=1, keepdims=True)
    ez = np.exp(z)
    probs = ez / ez.sum(axis=1, keepdims=True)
    n = logits.shape[0]
    picked = probs[np.arange(n), labels]
    loss = float(-np.mean(np.log(np.maximum(picked, 1e-300))))
    grad = probs
    grad[np.arange(n), labels] -= 1.0
    return loss, grad / n
