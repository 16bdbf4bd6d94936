"""MLP score network over (x, t) with manual reverse-mode gradients.

The network output ``s_hat`` is divided by a rescale factor ``w_t`` when a
rescaling method is set, so the network learns an O(1) quantity:

    iso   -> w_t = sigma_t
    niso  -> w_t = sqrt(sigma_t^2 + c_niso^2)
    tango -> w_t = max(sigma_t, c_tango)
    none  -> w_t = 1
"""
from __future__ import annotations

import io
import json
import struct

import numpy as np
from scipy.special import expit

from .errors import DimensionError, NumericOverflowError

RESCALE_METHODS = ("none", "iso", "niso", "tango")
CKPT_MAGIC = b"MDMCKPT\0"
CKPT_VERSION = 1


def rescale_factor(method, sigma, c=0.0):
    sigma = np.asarray(sigma, dtype=float)
    if method == "none":
        return np.ones_like(sigma)
    if method == "iso":
        return sigma
    if method == "niso":
        return np.sqrt(sigma ** 2 + c ** 2)
    if method == "tango":
        return np.maximum(sigma, c)
    raise ValueError(f"unknown rescale method {method!r}")


def silu(z):
    return z * expit(z)


def silu_grad(z):
    s = expit(z)
    return s * (1 + z * (1 - s))


class ScoreModel:
    """Feed-forward SiLU network ``[x, tau] -> hidden^depth -> n``.

    ``tau`` is ``t / T`` by default or ``log sigma_t`` with
    ``time_input="log_sigma"``.
    """

    def __init__(self, ambient_dim, width=64, depth=3, rescale_method="none", c=0.0,
                 time_input="t", rng=None, zero_last=False):
        if rescale_method not in RESCALE_METHODS:
            raise ValueError(f"rescale_method must be one of {RESCALE_METHODS}")
        if time_input not in ("t", "log_sigma"):
            raise ValueError("time_input must be 't' or 'log_sigma'")
        self.ambient_dim = int(ambient_dim)
        self.width = int(width)
        self.depth = int(depth)
        self.rescale_method = rescale_method
        self.c = float(c)
        self.time_input = time_input
        self.method = None  # training method tag, set by the trainer
        rng = np.random.default_rng(0) if rng is None else rng
        sizes = [self.ambient_dim + 1] + [self.width] * self.depth + [self.ambient_dim]
        self.params = []
        for i, (fan_in, fan_out) in enumerate(zip(sizes[:-1], sizes[1:])):
            bound = 1.0 / np.sqrt(fan_in)
            last = i == len(sizes) - 2
            if last and zero_last:
                w = np.zeros((fan_in, fan_out))
                b = np.zeros(fan_out)
            else:
                w = rng.uniform(-bound, bound, size=(fan_in, fan_out))
                b = rng.uniform(-bound, bound, size=fan_out)
            self.params += [w, b]
        self.ema = None

    # -- plumbing ---------------------------------------------------------
    @property
    def shapes(self):
        return [p.shape for p in self.params]

    @property
    def n_params(self):
        return sum(p.size for p in self.params)

    def copy(self):
        other = object.__new__(ScoreModel)
        other.__dict__.update(self.__dict__)
        other.params = [p.copy() for p in self.params]
        other.ema = None if self.ema is None else [p.copy() for p in self.ema]
        return other

    def _inputs(self, x, t, schedule):
        x = np.atleast_2d(np.asarray(x, dtype=float))
        if x.shape[1] != self.ambient_dim:
            raise DimensionError(f"expected {self.ambient_dim} coordinates, got {x.shape[1]}")
        t = np.broadcast_to(np.asarray(t, dtype=float), (len(x),))
        if self.time_input == "t":
            tau = t / schedule.T
        else:
            tau = np.log(schedule.sigma_at(t))
        return np.concatenate([x, tau[:, None]], axis=1), schedule.sigma_at(t)

    def scale(self, sigma):
        return rescale_factor(self.rescale_method, sigma, self.c)

    # -- forward / backward ----------------------------------------------
    def _forward(self, params, inp):
        acts = [inp]
        pre = []
        h = inp
        n_layers = len(params) // 2
        for i in range(n_layers):
            z = h @ params[2 * i] + params[2 * i + 1]
            if i < n_layers - 1:
                pre.append(z)
                h = silu(z)
                acts.append(h)
            else:
                h = z
        if not np.all(np.isfinite(h)):
            raise NumericOverflowError("non-finite network output")
        return h, (acts, pre)

    def _backward(self, params, cache, grad_out):
        acts, pre = cache
        n_layers = len(params) // 2
        grads = [None] * len(params)
        g = grad_out
        for i in reversed(range(n_layers)):
            grads[2 * i] = acts[i].T @ g
            grads[2 * i + 1] = g.sum(axis=0)
            if i > 0:
                g = (g @ params[2 * i].T) * silu_grad(pre[i - 1])
        return grads

    def forward(self, x, t, schedule, use_ema=False):
        """Return ``(score, tape)``; ``tape`` feeds :meth:`backward`."""
        params = self.ema if (use_ema and self.ema is not None) else self.params
        inp, sigma = self._inputs(x, t, schedule)
        out, cache = self._forward(params, inp)
        w = self.scale(sigma)
        return out / w[:, None], (params, cache, w)

    def backward(self, tape, grad_score):
        """Parameter gradient of ``sum(grad_score * score)``."""
        params, cache, w = tape
        return self._backward(params, cache, np.asarray(grad_score) / w[:, None])

    def score(self, x, t, schedule, use_ema=False):
        x = np.asarray(x, dtype=float)
        out, _ = self.forward(x, t, schedule, use_ema=use_ema)
        return out[0] if x.ndim == 1 else out

    def jvp(self, x, t, schedule, v, use_ema=False):
        """Directional derivative (d s / d x) v by forward-mode propagation."""
        params = self.ema if (use_ema and self.ema is not None) else self.params
        inp, sigma = self._inputs(x, t, schedule)
        v = np.atleast_2d(np.asarray(v, dtype=float))
        dh = np.concatenate([v, np.zeros((len(v), 1))], axis=1)
        h = inp
        n_layers = len(params) // 2
        for i in range(n_layers):
            z = h @ params[2 * i] + params[2 * i + 1]
            dz = dh @ params[2 * i]
            if i < n_layers - 1:
                h, dh = silu(z), silu_grad(z) * dz
            else:
                dh = dz
        return dh / self.scale(sigma)[:, None]

    def as_score_fn(self, schedule, use_ema=True):
        def fn(x, t):
            return self.score(x, t, schedule, use_ema=use_ema)
        fn.method = self.method
        return fn

    # -- checkpoint -------------------------------------------------------
    def header(self):
        return {
            "ambient_dim": self.ambient_dim, "width": self.width, "depth": self.depth,
            "rescale_method": self.rescale_method, "c": self.c,
            "time_input": self.time_input, "method": self.method,
            "shapes": [list(s) for s in self.shapes], "has_ema": self.ema is not None,
        }

    def to_bytes(self):
        """Serialize.

        Layout (little endian)::

            8 bytes   magic b"MDMCKPT\\0"
            uint32    format version
            uint32    header length H
            H bytes   UTF-8 JSON header (architecture, method, shapes, has_ema)
            float64[] live parameters W0, b0, W1, b1, ... each row-major
            float64[] EMA parameters in the same order (only if has_ema)
        """
        head = json.dumps(self.header(), sort_keys=True).encode()
        buf = io.BytesIO()
        buf.write(CKPT_MAGIC)
        buf.write(struct.pack("<II", CKPT_VERSION, len(head)))
        buf.write(head)
        for group in (self.params, self.ema or []):
            for p in group:
                buf.write(np.ascontiguousarray(p, dtype="<f8").tobytes())
        return buf.getvalue()

    @classmethod
    def from_bytes(cls, data):
        if data[:8] != CKPT_MAGIC:
            raise ValueError("not a score-model checkpoint")
        version, hlen = struct.unpack("<II", data[8:16])
        if version != CKPT_VERSION:
            raise ValueError(f"unsupported checkpoint version {version}")
        head = json.loads(data[16:16 + hlen].decode())
        model = cls(head["ambient_dim"], head["width"], head["depth"],
                    head["rescale_method"], head["c"], head["time_input"])
        model.method = head["method"]
        offset = 16 + hlen

        def read_group():
            nonlocal offset
            out = []
            for shape in head["shapes"]:
                count = int(np.prod(shape))
                arr = np.frombuffer(data, dtype="<f8", count=count, offset=offset)
                out.append(arr.reshape(shape).astype(float))
                offset += 8 * count
            return out

        model.params = read_group()
        model.ema = read_group() if head["has_ema"] else None
        if offset != len(data):
            raise ValueError("trailing bytes in checkpoint")
        return model

    def save(self, path):
        with open(path, "wb") as fh:
            fh.write(self.to_bytes())

    @classmethod
    def load(cls, path):
        with open(path, "rb") as fh:
            return cls.from_bytes(fh.read())


def score_grad(model, x, t, target, weight, schedule):
    """Gradient of sum_i w_i |s(x_i, t_i) - target_i|^2 / B; returns (loss, grads)."""
    s, tape = model.forward(x, t, schedule)
    target = np.atleast_2d(target)
    if target.shape != s.shape:
        raise DimensionError(f"target shape {target.shape} != score shape {s.shape}")
    weight = np.broadcast_to(np.asarray(weight, float), (len(s),))
    diff = s - target
    b = len(s)
    loss = float(np.sum(weight * np.sum(diff ** 2, axis=1)) / b)
    return loss, model.backward(tape, 2.0 * weight[:, None] * diff / b)


class Adam:
    def __init__(self, params, lr=5e-4, betas=(0.9, 0.999), eps=1e-8):
        self.lr = float(lr)
        self.b1, self.b2 = betas
        self.eps = eps
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.t = 0

    def step(self, params, grads):
        self.t += 1
        c1 = 1 - self.b1 ** self.t
        c2 = 1 - self.b2 ** self.t
        for p, g, m, v in zip(params, grads, self.m, self.v):
            m *= self.b1
            m += (1 - self.b1) * g
            v *= self.b2
            v += (1 - self.b2) * g * g
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def clip_grad_norm(grads, max_norm):
    """Rescale ``grads`` in place when their global 2-norm exceeds ``max_norm``."""
    total = float(np.sqrt(sum(np.sum(g * g) for g in grads)))
    if max_norm is not None and total > max_norm:
        factor = max_norm / (total + 1e-6)
        for g in grads:
            g *= factor
    return total


class EMA:
    def __init__(self, model, decay=0.999):
        self.decay = float(decay)
        model.ema = [p.copy() for p in model.params]

    def update(self, model):
        for s, p in zip(model.ema, model.params):
            s *= self.decay
            s += (1 - self.decay) * p


def train_step(model, optimizer, batch, loss_and_grad, clip=None, ema=None):
    """One clipped Adam step on ``loss_and_grad(model, batch)``; returns the loss."""
    loss, grads = loss_and_grad(model, batch)
    if not np.isfinite(loss):
        raise NumericOverflowError(f"non-finite training loss {loss}")
    norm = clip_grad_norm(grads, clip)
    if not np.isfinite(norm):
        raise NumericOverflowError(f"non-finite gradient norm {norm}")
    optimizer.step(model.params, grads)
    if ema is not None:
        ema.update(model)
    return loss
