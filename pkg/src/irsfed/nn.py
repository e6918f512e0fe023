"""Regression CNN with hand-written forward and backward passes.

Architecture (channels-last tensors, batch first)::

    input (L+1, M_bar, 3)
    [conv kxk same-padding -> normalization -> ReLU] x n_conv_layers
    flatten -> fully connected (fc_units) -> dropout mask -> linear output

All learnable weights live in one flat float64 vector ``theta``; the layout
maps names to slices of it. Normalization layers standardize each channel
with statistics that are fixed by :meth:`CNN.calibrate` and then frozen, so
the loss of a batch is exactly the mean of per-sample losses. The output
layer works in units of ``output_scale`` (RMS of the labels at calibration);
:meth:`CNN.predict` maps back to channel units.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from irsfed import storage, streams
from irsfed.errors import NumericFailure

NORM_EPS = 1e-5


@dataclass(frozen=True)
class NetworkSpec:
    input_shape: tuple[int, int, int]  # (L+1, M_bar, channels)
    output_dim: int
    n_conv_layers: int = 3
    n_filters: int = 128
    kernel: tuple[int, int] = (3, 3)
    fc_units: int = 1024
    keep_prob: float = 0.5

    def __post_init__(self):
        object.__setattr__(self, "input_shape", tuple(int(d) for d in self.input_shape))
        object.__setattr__(self, "kernel", tuple(int(d) for d in self.kernel))
        if len(self.input_shape) != 3 or min(self.input_shape) < 1:
            raise ValueError(f"bad input_shape {self.input_shape}")
        if self.output_dim < 1 or self.output_dim % 2:
            raise ValueError(f"output_dim must be positive and even, got {self.output_dim}")
        if self.n_conv_layers < 0 or self.n_filters < 1 or self.fc_units < 1:
            raise ValueError("layer counts must be positive")
        if len(self.kernel) != 2 or any(k < 1 or k % 2 == 0 for k in self.kernel):
            raise ValueError(f"kernel must be two odd sizes, got {self.kernel}")
        if not 0.0 <= self.keep_prob <= 1.0:
            raise ValueError(f"keep_prob must lie in [0, 1], got {self.keep_prob}")

    @classmethod
    def for_system(cls, M: int, L: int, M_bar: int, **overrides) -> "NetworkSpec":
        return cls(input_shape=(L + 1, M_bar, 3), output_dim=2 * M * (L + 1), **overrides)

    def layer_shapes(self) -> list[tuple[str, tuple[int, ...]]]:
        rows, cols, channels = self.input_shape
        kh, kw = self.kernel
        shapes = []
        c_in = channels
        for i in range(self.n_conv_layers):
            shapes += [
                (f"conv{i}.w", (kh * kw * c_in, self.n_filters)),
                (f"conv{i}.b", (self.n_filters,)),
                (f"norm{i}.gamma", (self.n_filters,)),
                (f"norm{i}.beta", (self.n_filters,)),
            ]
            c_in = self.n_filters
        shapes += [
            ("fc.w", (rows * cols * c_in, self.fc_units)),
            ("fc.b", (self.fc_units,)),
            ("out.w", (self.fc_units, self.output_dim)),
            ("out.b", (self.output_dim,)),
        ]
        return shapes


def param_layout(spec: NetworkSpec) -> dict[str, tuple[slice, tuple[int, ...]]]:
    layout = {}
    offset = 0
    for name, shape in spec.layer_shapes():
        size = int(np.prod(shape))
        layout[name] = (slice(offset, offset + size), shape)
        offset += size
    return layout


def storage_count(spec: NetworkSpec) -> int:
    """True length of ``theta``."""
    return sum(int(np.prod(shape)) for _, shape in spec.layer_shapes())


def parameter_count(spec: NetworkSpec) -> int:
    """Parameter count used for transmission accounting.

    ``N_CL * C * N_SF * Wx * Wy + keep_prob * N_SF * Wx * Wy * N_FCL`` with C
    the number of input channels. This is an accounting convention and is
    smaller than :func:`storage_count`.
    """
    kx, ky = spec.kernel
    channels = spec.input_shape[2]
    conv = spec.n_conv_layers * channels * spec.n_filters * kx * ky
    fc = spec.keep_prob * spec.n_filters * kx * ky * spec.fc_units
    return int(round(conv + fc))


@dataclass(frozen=True)
class DropoutMask:
    values: np.ndarray  # (fc_units,) of 0/1
    round_index: int | None
    seed: int


def draw_dropout_mask(spec: NetworkSpec, round_seed: int, round_index: int | None = None) -> DropoutMask:
    rng = streams.substream(round_seed, streams.ROUND_MASK)
    values = (rng.random(spec.fc_units) < spec.keep_prob).astype(np.uint8)
    return DropoutMask(values=values, round_index=round_index, seed=int(round_seed))


def loss_mse(pred: np.ndarray, label: np.ndarray) -> np.ndarray | float:
    """Squared Euclidean distance along the last axis."""
    pred = np.asarray(pred, dtype=float)
    label = np.asarray(label, dtype=float)
    if pred.shape != label.shape:
        raise ValueError(f"prediction {pred.shape} and label {label.shape} differ")
    d = pred - label
    out = np.einsum("...i,...i->...", d, d)
    return float(out) if out.ndim == 0 else out


def sgd_step(theta, velocity, grad, learning_rate: float, momentum: float):
    """Heavy-ball update: ``v' = mu v + g``, ``theta' = theta - lr v'``."""
    theta = np.asarray(theta, dtype=float)
    velocity = np.asarray(velocity, dtype=float)
    grad = np.asarray(grad, dtype=float)
    if not theta.shape == velocity.shape == grad.shape:
        raise ValueError("theta, velocity and gradient must have equal shapes")
    for name, arr in (("theta", theta), ("velocity", velocity), ("gradient", grad)):
        if not np.all(np.isfinite(arr)):
            raise NumericFailure(f"non-finite {name} in sgd_step")
    new_velocity = momentum * velocity + grad
    return theta - learning_rate * new_velocity, new_velocity


def _im2col(a: np.ndarray, kh: int, kw: int) -> np.ndarray:
    B, H, W, C = a.shape
    padded = np.pad(a, ((0, 0), (kh // 2, kh // 2), (kw // 2, kw // 2), (0, 0)))
    win = sliding_window_view(padded, (kh, kw), axis=(1, 2))  # (B, H, W, C, kh, kw)
    return win.transpose(0, 1, 2, 4, 5, 3).reshape(B, H, W, kh * kw * C)


def _col2im(dcols: np.ndarray, C: int, kh: int, kw: int) -> np.ndarray:
    B, H, W, _ = dcols.shape
    d = dcols.reshape(B, H, W, kh, kw, C)
    dpad = np.zeros((B, H + kh - 1, W + kw - 1, C))
    for i in range(kh):
        for j in range(kw):
            dpad[:, i : i + H, j : j + W, :] += d[:, :, :, i, j, :]
    return dpad[:, kh // 2 : kh // 2 + H, kw // 2 : kw // 2 + W, :]


class CNN:
    """Network bound to a spec and its frozen normalization statistics."""

    def __init__(self, spec: NetworkSpec, chunk_size: int = 128):
        self.spec = spec
        self.layout = param_layout(spec)
        self.size = storage_count(spec)
        self.chunk_size = chunk_size
        F = spec.n_filters
        self.norm_shift = np.zeros((spec.n_conv_layers, F))
        self.norm_scale = np.ones((spec.n_conv_layers, F))
        self.output_scale = 1.0

    # -- parameters ---------------------------------------------------------

    def views(self, theta: np.ndarray) -> dict[str, np.ndarray]:
        if theta.shape != (self.size,):
            raise ValueError(f"theta has shape {theta.shape}, expected ({self.size},)")
        return {name: theta[sl].reshape(shape) for name, (sl, shape) in self.layout.items()}

    def init_params(self, rng: np.random.Generator) -> np.ndarray:
        """He-uniform hidden weights, zero output layer and biases, unit normalization gains."""
        theta = np.zeros(self.size)
        p = self.views(theta)
        for name, arr in p.items():
            if name == "out.w":
                continue  # zero output layer: start from the zero estimate
            if name.endswith(".w"):
                limit = math.sqrt(6.0 / arr.shape[0])
                arr[...] = rng.uniform(-limit, limit, arr.shape)
            elif name.endswith(".gamma"):
                arr[...] = 1.0
        return theta

    def masked_coordinates(self, mask: DropoutMask) -> np.ndarray:
        """Boolean selector over theta of the FC weights and biases a mask switches off."""
        sel = np.zeros(self.size, dtype=bool)
        dropped = mask.values == 0
        sl_w, shape_w = self.layout["fc.w"]
        sel[sl_w] = np.broadcast_to(dropped, shape_w).ravel()
        sel[self.layout["fc.b"][0]] = dropped
        return sel

    def buffers(self) -> np.ndarray:
        """Normalization statistics and output scale as one flat vector."""
        return np.concatenate([self.norm_shift.ravel(), self.norm_scale.ravel(), [self.output_scale]])

    def set_buffers(self, flat: np.ndarray) -> None:
        flat = np.asarray(flat, dtype=float)
        n = self.norm_shift.size
        if flat.shape != (2 * n + 1,):
            raise ValueError(f"buffer vector has {flat.size} entries, expected {2 * n + 1}")
        self.norm_shift = flat[:n].reshape(self.norm_shift.shape).copy()
        self.norm_scale = flat[n : 2 * n].reshape(self.norm_scale.shape).copy()
        self.output_scale = float(flat[-1])

    # -- passes -------------------------------------------------------------

    def _check_input(self, x: np.ndarray) -> tuple[np.ndarray, bool]:
        x = np.asarray(x, dtype=float)
        single = x.ndim == 3
        if single:
            x = x[np.newaxis]
        if x.shape[1:] != self.spec.input_shape:
            raise ValueError(f"input shape {x.shape[1:]} != {self.spec.input_shape}")
        return x, single

    def _mask_gain(self, mask: DropoutMask | None) -> np.ndarray | None:
        if mask is None:
            return None
        values = np.asarray(mask.values, dtype=float)
        if values.shape != (self.spec.fc_units,):
            raise ValueError(f"mask length {values.size} != fc_units {self.spec.fc_units}")
        if self.spec.keep_prob == 0:
            return np.zeros_like(values)
        return values / self.spec.keep_prob

    def _forward(self, p, x, gain, keep_cache):
        kh, kw = self.spec.kernel
        cache = []
        a = x
        for i in range(self.spec.n_conv_layers):
            cols = _im2col(a, kh, kw)
            z = cols @ p[f"conv{i}.w"] + p[f"conv{i}.b"]
            zn = (z - self.norm_shift[i]) * self.norm_scale[i]
            n = zn * p[f"norm{i}.gamma"] + p[f"norm{i}.beta"]
            if keep_cache:
                cache.append((cols, zn, n, a.shape[-1]))
            a = np.maximum(n, 0.0)
        flat = a.reshape(a.shape[0], -1)
        u = flat @ p["fc.w"] + p["fc.b"]
        if gain is not None:
            u = u * gain
        out = u @ p["out.w"] + p["out.b"]
        return out, (cache, a.shape, flat, u)

    def forward(self, theta: np.ndarray, x: np.ndarray, mask: DropoutMask | None = None) -> np.ndarray:
        """Network output in normalized units; batch or single sample."""
        p = self.views(theta)
        x, single = self._check_input(x)
        gain = self._mask_gain(mask)
        outs = [self._forward(p, x[s : s + self.chunk_size], gain, False)[0] for s in range(0, len(x), self.chunk_size)]
        out = np.concatenate(outs) if outs else np.zeros((0, self.spec.output_dim))
        return out[0] if single else out

    def predict(self, theta: np.ndarray, x: np.ndarray) -> np.ndarray:
        """Channel-unit estimate (label layout), no dropout."""
        return self.forward(theta, x) * self.output_scale

    def _backward_chunk(self, p, x, y, gain, grad):
        """Accumulate the gradient of sum_b ||f(x_b) - y_b||^2 into ``grad``; return the loss sum."""
        out, (cache, a_shape, flat, u) = self._forward(p, x, gain, True)
        resid = out - y
        loss = float(np.einsum("bi,bi->", resid, resid))
        dout = 2.0 * resid
        grad["out.w"] += u.T @ dout
        grad["out.b"] += dout.sum(axis=0)
        du = dout @ p["out.w"].T
        if gain is not None:
            du = du * gain
        grad["fc.w"] += flat.T @ du
        grad["fc.b"] += du.sum(axis=0)
        da = (du @ p["fc.w"].T).reshape(a_shape)
        kh, kw = self.spec.kernel
        for i in reversed(range(self.spec.n_conv_layers)):
            cols, zn, n, c_in = cache[i]
            dn = da * (n > 0)
            grad[f"norm{i}.gamma"] += np.einsum("bhwf,bhwf->f", dn, zn)
            grad[f"norm{i}.beta"] += dn.sum(axis=(0, 1, 2))
            dz = dn * (p[f"norm{i}.gamma"] * self.norm_scale[i])
            F = dz.shape[-1]
            grad[f"conv{i}.w"] += cols.reshape(-1, cols.shape[-1]).T @ dz.reshape(-1, F)
            grad[f"conv{i}.b"] += dz.sum(axis=(0, 1, 2))
            if i > 0:
                da = _col2im(dz @ p[f"conv{i}.w"].T, c_in, kh, kw)
        return loss

    def loss_and_grad(self, theta, x, y, mask: DropoutMask | None = None) -> tuple[float, np.ndarray]:
        """Mean per-sample squared error and its exact gradient w.r.t. theta."""
        p = self.views(theta)
        x, single = self._check_input(x)
        y = np.asarray(y, dtype=float)
        if single:
            y = y[np.newaxis]
        if y.shape != (len(x), self.spec.output_dim):
            raise ValueError(f"labels {y.shape} do not match batch of {len(x)} x {self.spec.output_dim}")
        if len(x) == 0:
            raise ValueError("empty batch")
        gain = self._mask_gain(mask)
        flat_grad = np.zeros(self.size)
        grad = self.views(flat_grad)
        total = 0.0
        for s in range(0, len(x), self.chunk_size):
            total += self._backward_chunk(p, x[s : s + self.chunk_size], y[s : s + self.chunk_size], gain, grad)
        flat_grad /= len(x)
        return total / len(x), flat_grad

    def backward(self, theta, x, label, mask: DropoutMask | None = None) -> np.ndarray:
        return self.loss_and_grad(theta, x, label, mask)[1]

    # -- calibration --------------------------------------------------------

    def calibrate(self, theta: np.ndarray, inputs: list[np.ndarray], labels: list[np.ndarray]) -> None:
        """Fix normalization statistics and output scale from per-party data.

        Each entry of ``inputs``/``labels`` belongs to one party (a user, or
        the pooled set). Parties report per-channel first and second moments
        and the moments are averaged with equal weight, layer by layer.
        """
        if not inputs or len(inputs) != len(labels):
            raise ValueError("need matching, non-empty input and label groups")
        p = self.views(theta)
        kh, kw = self.spec.kernel
        acts = [self._check_input(x)[0] for x in inputs]
        for i in range(self.spec.n_conv_layers):
            zs = [_im2col(a, kh, kw) @ p[f"conv{i}.w"] + p[f"conv{i}.b"] for a in acts]
            mean = np.mean([z.mean(axis=(0, 1, 2)) for z in zs], axis=0)
            second = np.mean([(z * z).mean(axis=(0, 1, 2)) for z in zs], axis=0)
            var = np.maximum(second - mean * mean, 0.0)
            self.norm_shift[i] = mean
            self.norm_scale[i] = 1.0 / np.sqrt(var + NORM_EPS)
            acts = [
                np.maximum((z - self.norm_shift[i]) * self.norm_scale[i] * p[f"norm{i}.gamma"] + p[f"norm{i}.beta"], 0.0)
                for z in zs
            ]
        power = np.mean([np.mean(np.asarray(y, dtype=float) ** 2) for y in labels])
        self.output_scale = float(math.sqrt(power)) if power > 0 else 1.0


CHECKPOINT_FORMAT = "irsfed-checkpoint"
CHECKPOINT_VERSION = 1


def save_checkpoint(path, net: CNN, theta: np.ndarray, velocity: np.ndarray, extra: dict | None = None) -> None:
    """Header, then float32 payload ``theta | velocity | buffers``.

    ``buffers`` is :meth:`CNN.buffers`: normalization shifts, scales, output scale.
    """
    s = net.spec
    header = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "input_shape": "x".join(str(d) for d in s.input_shape),
        "output_dim": s.output_dim,
        "n_conv_layers": s.n_conv_layers,
        "n_filters": s.n_filters,
        "kernel": "x".join(str(k) for k in s.kernel),
        "fc_units": s.fc_units,
        "keep_prob": repr(s.keep_prob),
        "storage_count": net.size,
        "parameter_count": parameter_count(s),
        "n_buffers": net.buffers().size,
    }
    header.update(extra or {})
    storage.write_container(path, header, np.concatenate([theta, velocity, net.buffers()]))


def load_checkpoint(path) -> tuple[CNN, np.ndarray, np.ndarray, dict[str, str]]:
    header, payload = storage.read_container(path)
    if header.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path}: not a checkpoint (format={header.get('format')!r})")
    if int(header["version"]) != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {header['version']}")
    spec = NetworkSpec(
        input_shape=tuple(int(d) for d in header["input_shape"].split("x")),
        output_dim=int(header["output_dim"]),
        n_conv_layers=int(header["n_conv_layers"]),
        n_filters=int(header["n_filters"]),
        kernel=tuple(int(k) for k in header["kernel"].split("x")),
        fc_units=int(header["fc_units"]),
        keep_prob=float(header["keep_prob"]),
    )
    net = CNN(spec)
    n, nb = net.size, int(header["n_buffers"])
    if int(header["storage_count"]) != n or payload.size != 2 * n + nb:
        raise ValueError(f"{path}: payload size {payload.size} does not match the stored network")
    payload = payload.astype(float)
    net.set_buffers(payload[2 * n :])
    return net, payload[:n].copy(), payload[n : 2 * n].copy(), header
