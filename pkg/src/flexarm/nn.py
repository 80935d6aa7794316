"""Small fully connected networks with hand-written backprop, Adam, and a squashed Gaussian head.

Everything is float64 and batch-first. Parameters of one network live in a single flat
array so optimizers, Polyak averaging and checkpoints treat a network as one vector.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import FlexArmError, ValidationError

LOG_STD_MIN = -20.0
LOG_STD_MAX = 2.0
_HALF_LOG_2PI = 0.5 * math.log(2.0 * math.pi)
_LOG2 = math.log(2.0)


class Mlp:
    """``tanh`` hidden layers followed by a linear output layer."""

    def __init__(self, sizes, rng: np.random.Generator | None = None, params: np.ndarray | None = None):
        sizes = tuple(int(s) for s in sizes)
        if len(sizes) < 2 or any(s < 1 for s in sizes):
            raise ValidationError(f"layer sizes must be >= 1 with at least two entries, got {sizes}")
        self.sizes = sizes
        self.activation = "tanh"
        self._slices = []
        off = 0
        for a, b in zip(sizes[:-1], sizes[1:]):
            self._slices.append((off, off + a * b, off + a * b + b))
            off += a * b + b
        self.n_params = off
        if params is not None:
            params = np.array(params, dtype=float)
            if params.shape != (off,):
                raise ValidationError(f"expected {off} parameters, got shape {params.shape}")
            self.params = params
        else:
            self.params = np.zeros(off)
            if rng is not None:
                self.init(rng)
        self._cache = None

    def init(self, rng: np.random.Generator) -> None:
        """Uniform fan-in initialization, ``U(-1/sqrt(fan_in), 1/sqrt(fan_in))`` for weights and biases."""
        for (a, b), (w0, w1, b1) in zip(zip(self.sizes[:-1], self.sizes[1:]), self._slices):
            bound = 1.0 / math.sqrt(a)
            self.params[w0:w1] = rng.uniform(-bound, bound, w1 - w0)
            self.params[w1:b1] = rng.uniform(-bound, bound, b1 - w1)

    def layers(self):
        """``(W, b)`` views with ``W`` shaped ``(fan_in, fan_out)``."""
        out = []
        for (a, b), (w0, w1, b1) in zip(zip(self.sizes[:-1], self.sizes[1:]), self._slices):
            out.append((self.params[w0:w1].reshape(a, b), self.params[w1:b1]))
        return out

    def copy(self) -> "Mlp":
        return Mlp(self.sizes, params=self.params.copy())

    def forward(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        single = x.ndim == 1
        h = x[None, :] if single else x
        if h.shape[1] != self.sizes[0]:
            raise ValidationError(f"input width {h.shape[1]} does not match network input {self.sizes[0]}")
        acts = [h]
        layers = self.layers()
        for i, (W, b) in enumerate(layers):
            h = h @ W + b
            if i < len(layers) - 1:
                h = np.tanh(h)
            acts.append(h)
        self._cache = acts
        return h[0] if single else h

    __call__ = forward

    def backward(self, output_grad) -> tuple[np.ndarray, np.ndarray]:
        """Gradients of ``sum(output * output_grad)`` w.r.t. parameters and input.

        Uses the activations cached by the latest ``forward``.
        """
        if self._cache is None:
            raise FlexArmError("backward called before forward")
        acts = self._cache
        g = np.asarray(output_grad, dtype=float)
        single = g.ndim == 1
        if single:
            g = g[None, :]
        if g.shape != acts[-1].shape:
            raise ValidationError(f"output_grad shape {g.shape} does not match output {acts[-1].shape}")
        grads = np.zeros(self.n_params)
        layers = self.layers()
        for i in range(len(layers) - 1, -1, -1):
            W, _ = layers[i]
            w0, w1, b1 = self._slices[i]
            if i < len(layers) - 1:
                g = g * (1.0 - acts[i + 1] ** 2)
            grads[w0:w1] = (acts[i].T @ g).ravel()
            grads[w1:b1] = g.sum(axis=0)
            g = g @ W.T
        return grads, (g[0] if single else g)


def forward(net: Mlp, x) -> np.ndarray:
    return net.forward(x)


def backward(net: Mlp, x, output_grad) -> np.ndarray:
    """Parameter gradients for ``output_grad`` at input ``x`` (re-runs the forward pass)."""
    net.forward(x)
    return net.backward(output_grad)[0]


@dataclass
class OptState:
    """Adam moments for one parameter vector."""

    m: np.ndarray
    v: np.ndarray
    t: int = 0
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros(cls, n: int, lr: float = 1e-4) -> "OptState":
        if not lr > 0:
            raise ValidationError(f"learning rate must be positive, got {lr}")
        return cls(np.zeros(n), np.zeros(n), 0, float(lr))


def adam_step(opt: OptState, params: np.ndarray, grads: np.ndarray) -> np.ndarray:
    """Bias-corrected Adam update applied to ``params`` in place (also returned)."""
    if params.shape != grads.shape or params.shape != opt.m.shape:
        raise ValidationError("parameter, gradient and moment shapes differ")
    opt.t += 1
    opt.m *= opt.beta1
    opt.m += (1.0 - opt.beta1) * grads
    opt.v *= opt.beta2
    opt.v += (1.0 - opt.beta2) * grads * grads
    mhat = opt.m / (1.0 - opt.beta1**opt.t)
    vhat = opt.v / (1.0 - opt.beta2**opt.t)
    params -= opt.lr * mhat / (np.sqrt(vhat) + opt.eps)
    return params


def polyak_update(target: Mlp, source: Mlp, tau: float) -> None:
    target.params *= 1.0 - tau
    target.params += tau * source.params


# --------------------------------------------------------------------------- policy head


def softplus(x):
    x = np.asarray(x, dtype=float)
    return np.logaddexp(0.0, x)


@dataclass
class PolicySample:
    action: np.ndarray  # squashed, in [-1, 1]
    log_prob: np.ndarray  # shape (batch,)
    mean: np.ndarray
    log_std: np.ndarray
    pre_tanh: np.ndarray
    noise: np.ndarray
    clamp_mask: np.ndarray = field(repr=False)


class GaussianPolicy:
    """Network emitting mean and log-std of a Gaussian, squashed through ``tanh``."""

    def __init__(self, obs_dim: int, act_dim: int, hidden=(64, 64), rng=None, net: Mlp | None = None):
        self.obs_dim = int(obs_dim)
        self.act_dim = int(act_dim)
        self.net = net if net is not None else Mlp((obs_dim, *hidden, 2 * act_dim), rng)

    def dist(self, obs):
        out = self.net.forward(np.atleast_2d(obs))
        mean = out[:, : self.act_dim]
        raw = out[:, self.act_dim :]
        log_std = np.clip(raw, LOG_STD_MIN, LOG_STD_MAX)
        mask = (raw >= LOG_STD_MIN) & (raw <= LOG_STD_MAX)
        return mean, log_std, mask

    def sample(self, obs, noise) -> PolicySample:
        """Reparameterized sample ``tanh(mean + std * noise)`` with its log-density."""
        mean, log_std, mask = self.dist(obs)
        noise = np.asarray(noise, dtype=float).reshape(mean.shape)
        u = mean + np.exp(log_std) * noise
        a = np.tanh(u)
        # log(1 - tanh(u)^2) written without cancellation
        log_jac = 2.0 * (_LOG2 - u - softplus(-2.0 * u))
        logp = np.sum(-0.5 * noise**2 - log_std - _HALF_LOG_2PI - log_jac, axis=1)
        return PolicySample(a, logp, mean, log_std, u, noise, mask)

    def deterministic(self, obs) -> np.ndarray:
        mean, _, _ = self.dist(obs)
        return np.tanh(mean)

    def backward(self, s: PolicySample, grad_action: np.ndarray, grad_logp: np.ndarray) -> np.ndarray:
        """Parameter gradient of ``sum(grad_action * a) + sum(grad_logp * log_prob)`` for sample ``s``.

        Must follow the ``sample`` call that produced ``s`` (the network cache is reused).
        """
        gl = np.asarray(grad_logp, dtype=float)[:, None]
        one_minus_a2 = 1.0 - s.action**2
        std = np.exp(s.log_std)
        # d log_prob / d u = 2 a, through d(-log(1 - a^2))/du
        du = grad_action * one_minus_a2 + gl * 2.0 * s.action
        d_mean = du
        d_log_std = du * std * s.noise - gl
        d_log_std = np.where(s.clamp_mask, d_log_std, 0.0)
        return self.net.backward(np.concatenate([d_mean, d_log_std], axis=1))[0]


# --------------------------------------------------------------------------- checkpoint container

MAGIC = b"FLXCKPT1"


def save_arrays(path, arrays: dict[str, np.ndarray], meta: dict) -> None:
    """Write ``MAGIC | u64 header length | JSON header | float64 little-endian payload``.

    The header lists each array's name, shape and element offset into the row-major payload.
    The file is written to a temporary name and renamed so a crash never leaves a torn checkpoint.
    """
    path = Path(path)
    entries = []
    off = 0
    blobs = []
    for name, arr in arrays.items():
        a = np.ascontiguousarray(arr, dtype="<f8")
        entries.append({"name": name, "shape": list(a.shape), "offset": off})
        off += a.size
        blobs.append(a.tobytes(order="C"))
    header = json.dumps({"format": "flexarm-checkpoint", "version": 1, "arrays": entries, "meta": meta},
                        sort_keys=True).encode()
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        for b in blobs:
            fh.write(b)
    tmp.replace(path)


def load_arrays(path) -> tuple[dict[str, np.ndarray], dict]:
    with open(path, "rb") as fh:
        if fh.read(len(MAGIC)) != MAGIC:
            raise ValidationError(f"{path} is not a flexarm checkpoint")
        (n,) = struct.unpack("<Q", fh.read(8))
        header = json.loads(fh.read(n))
        payload = np.frombuffer(fh.read(), dtype="<f8")
    arrays = {}
    for e in header["arrays"]:
        size = int(np.prod(e["shape"], dtype=np.int64))
        arrays[e["name"]] = payload[e["offset"] : e["offset"] + size].reshape(e["shape"]).astype(float)
    return arrays, header["meta"]
