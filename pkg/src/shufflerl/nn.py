"""Minimal neural-network stack with explicit forward and backward passes.

The network is a fixed chain (two strided convolutions with 2D batch
normalization and ReLU, flatten, one linear projection), so every layer
carries its own hand-written backward instead of a general autodiff graph.
All arrays are float64; any NaN or Inf produced by a layer raises
immediately, naming the layer.

Conventions that silently diverge between implementations, pinned here:
valid (no-padding) cross-correlation with ``out = floor((in - k)/stride) + 1``;
batch-norm normalizes with the biased batch variance but feeds the unbiased
variance into the running estimate ``running = (1 - m)*running + m*batch``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from shufflerl.errors import NonFiniteError, ShuffleRlError


def _check_finite(name: str, *arrays: np.ndarray) -> None:
    for arr in arrays:
        if not np.all(np.isfinite(arr)):
            raise NonFiniteError(name)


def conv_output_size(size: int, kernel: int, stride: int) -> int:
    if kernel > size:
        raise ShuffleRlError(f"kernel {kernel} larger than input {size}")
    if stride < 1:
        raise ShuffleRlError(f"stride must be >= 1, got {stride}")
    return (size - kernel) // stride + 1


def _window_index_map(c: int, h: int, w: int, kh: int, kw: int, sh: int, sw: int) -> np.ndarray:
    """Flat gather indices turning (c, h, w) into (c*kh*kw, oh*ow) patches."""
    oh = conv_output_size(h, kh, sh)
    ow = conv_output_size(w, kw, sw)
    ci = np.arange(c).reshape(c, 1, 1, 1, 1)
    u = np.arange(kh).reshape(1, kh, 1, 1, 1)
    v = np.arange(kw).reshape(1, 1, kw, 1, 1)
    p = np.arange(oh).reshape(1, 1, 1, oh, 1)
    q = np.arange(ow).reshape(1, 1, 1, 1, ow)
    flat = ci * (h * w) + (p * sh + u) * w + (q * sw + v)
    return flat.reshape(c * kh * kw, oh * ow)


class Conv2d:
    """Valid cross-correlation over (batch, channels, height, width)."""

    def __init__(self, name: str, weight: np.ndarray, bias: np.ndarray, stride: tuple[int, int]):
        self.name = name
        self.weight = weight  # (out_ch, in_ch, kh, kw)
        self.bias = bias  # (out_ch,)
        self.stride = stride
        self._index_cache: dict[tuple, np.ndarray] = {}

    def params(self):
        return [(f"{self.name}.weight", self.weight), (f"{self.name}.bias", self.bias)]

    def buffers(self):
        return []

    def _indices(self, c: int, h: int, w: int) -> np.ndarray:
        key = (c, h, w)
        if key not in self._index_cache:
            kh, kw = self.weight.shape[2:]
            self._index_cache[key] = _window_index_map(c, h, w, kh, kw, *self.stride)
        return self._index_cache[key]

    def forward(self, x: np.ndarray):
        out_ch, in_ch, kh, kw = self.weight.shape
        if x.ndim != 4 or x.shape[1] != in_ch:
            raise ShuffleRlError(f"{self.name}: expected (B, {in_ch}, H, W), got {x.shape}")
        b, c, h, w = x.shape
        oh = conv_output_size(h, kh, self.stride[0])
        ow = conv_output_size(w, kw, self.stride[1])
        idx = self._indices(c, h, w)
        cols = x.reshape(b, c * h * w)[:, idx]  # (b, c*kh*kw, oh*ow)
        w_mat = self.weight.reshape(out_ch, -1)
        out = np.einsum("ok,bkn->bon", w_mat, cols) + self.bias[None, :, None]
        out = out.reshape(b, out_ch, oh, ow)
        _check_finite(self.name, out)
        return out, (x.shape, cols, idx)

    def backward(self, cache, dout: np.ndarray):
        x_shape, cols, idx = cache
        b = x_shape[0]
        out_ch = self.weight.shape[0]
        dout_mat = dout.reshape(b, out_ch, -1)
        w_mat = self.weight.reshape(out_ch, -1)
        dweight = np.einsum("bkn,bon->ok", cols, dout_mat).reshape(self.weight.shape)
        dbias = dout_mat.sum(axis=(0, 2))
        dcols = np.einsum("ok,bon->bkn", w_mat, dout_mat)
        dx_flat = np.zeros((b, int(np.prod(x_shape[1:]))))
        np.add.at(dx_flat, (np.arange(b)[:, None, None], idx[None, :, :]), dcols)
        dx = dx_flat.reshape(x_shape)
        _check_finite(f"{self.name}.backward", dx, dweight, dbias)
        return dx, {f"{self.name}.weight": dweight, f"{self.name}.bias": dbias}


class BatchNorm2d:
    """Per-channel normalization over (batch, height, width)."""

    def __init__(
        self,
        name: str,
        gamma: np.ndarray,
        beta: np.ndarray,
        momentum: float = 0.1,
        eps: float = 1e-5,
    ):
        self.name = name
        self.gamma = gamma
        self.beta = beta
        self.momentum = momentum
        self.eps = eps
        channels = gamma.shape[0]
        self.running_mean = np.zeros(channels)
        self.running_var = np.ones(channels)
        self.training = True

    def params(self):
        return [(f"{self.name}.gamma", self.gamma), (f"{self.name}.beta", self.beta)]

    def buffers(self):
        return [
            (f"{self.name}.running_mean", self.running_mean),
            (f"{self.name}.running_var", self.running_var),
        ]

    def forward(self, x: np.ndarray):
        if x.ndim != 4 or x.shape[1] != self.gamma.shape[0]:
            raise ShuffleRlError(f"{self.name}: expected (B, {self.gamma.shape[0]}, H, W), got {x.shape}")
        shape = (1, -1, 1, 1)
        if self.training:
            b, _, h, w = x.shape
            n = b * h * w
            if n < 2:
                raise ShuffleRlError(f"{self.name}: train mode needs >= 2 elements per channel, got {n}")
            mean = x.mean(axis=(0, 2, 3))
            var = x.var(axis=(0, 2, 3))  # biased, used for normalization
            inv_std = 1.0 / np.sqrt(var + self.eps)
            xhat = (x - mean.reshape(shape)) * inv_std.reshape(shape)
            self.running_mean[:] = (1 - self.momentum) * self.running_mean + self.momentum * mean
            self.running_var[:] = (
                (1 - self.momentum) * self.running_var + self.momentum * var * n / (n - 1)
            )
            cache = (xhat, inv_std, n)
        else:
            inv_std = 1.0 / np.sqrt(self.running_var + self.eps)
            xhat = (x - self.running_mean.reshape(shape)) * inv_std.reshape(shape)
            cache = None  # backward is defined for train mode only
        out = self.gamma.reshape(shape) * xhat + self.beta.reshape(shape)
        _check_finite(self.name, out)
        return out, cache

    def backward(self, cache, dout: np.ndarray):
        if cache is None:
            raise ShuffleRlError(f"{self.name}: backward requires a train-mode forward cache")
        xhat, inv_std, n = cache
        shape = (1, -1, 1, 1)
        dgamma = (dout * xhat).sum(axis=(0, 2, 3))
        dbeta = dout.sum(axis=(0, 2, 3))
        dxhat = dout * self.gamma.reshape(shape)
        sum_dxhat = dxhat.sum(axis=(0, 2, 3))
        sum_dxhat_xhat = (dxhat * xhat).sum(axis=(0, 2, 3))
        dx = (inv_std.reshape(shape) / n) * (
            n * dxhat - sum_dxhat.reshape(shape) - xhat * sum_dxhat_xhat.reshape(shape)
        )
        _check_finite(f"{self.name}.backward", dx, dgamma, dbeta)
        return dx, {f"{self.name}.gamma": dgamma, f"{self.name}.beta": dbeta}


class ReLU:
    def __init__(self, name: str):
        self.name = name

    def params(self):
        return []

    def buffers(self):
        return []

    def forward(self, x: np.ndarray):
        mask = x > 0
        return x * mask, mask

    def backward(self, cache, dout: np.ndarray):
        return dout * cache, {}


class Flatten:
    def __init__(self, name: str):
        self.name = name

    def params(self):
        return []

    def buffers(self):
        return []

    def forward(self, x: np.ndarray):
        return x.reshape(x.shape[0], -1), x.shape

    def backward(self, cache, dout: np.ndarray):
        return dout.reshape(cache), {}


class Linear:
    """Affine map ``y = x @ W.T + b`` with W shaped (out, in)."""

    def __init__(self, name: str, weight: np.ndarray, bias: np.ndarray):
        self.name = name
        self.weight = weight
        self.bias = bias

    def params(self):
        return [(f"{self.name}.weight", self.weight), (f"{self.name}.bias", self.bias)]

    def buffers(self):
        return []

    def forward(self, x: np.ndarray):
        if x.ndim != 2 or x.shape[1] != self.weight.shape[1]:
            raise ShuffleRlError(f"{self.name}: expected (B, {self.weight.shape[1]}), got {x.shape}")
        out = x @ self.weight.T + self.bias
        _check_finite(self.name, out)
        return out, x

    def backward(self, cache, dout: np.ndarray):
        x = cache
        dx = dout @ self.weight
        dweight = dout.T @ x
        dbias = dout.sum(axis=0)
        _check_finite(f"{self.name}.backward", dx, dweight, dbias)
        return dx, {f"{self.name}.weight": dweight, f"{self.name}.bias": dbias}


class Sequential:
    def __init__(self, layers: list):
        self.layers = layers

    def params(self):
        out = []
        for layer in self.layers:
            out.extend(layer.params())
        return out

    def buffers(self):
        out = []
        for layer in self.layers:
            out.extend(layer.buffers())
        return out

    def forward(self, x: np.ndarray):
        caches = []
        for layer in self.layers:
            x, cache = layer.forward(x)
            caches.append(cache)
        return x, caches

    def backward(self, caches, dout: np.ndarray):
        grads: dict[str, np.ndarray] = {}
        for layer, cache in zip(reversed(self.layers), reversed(caches)):
            dout, layer_grads = layer.backward(cache, dout)
            grads.update(layer_grads)
        return dout, grads

    def set_training(self, training: bool):
        for layer in self.layers:
            if isinstance(layer, BatchNorm2d):
                layer.training = training


@dataclass(frozen=True)
class ArchSpec:
    """Concrete network architecture; every field is config-overridable."""

    kind: str = "cnn"  # "cnn" | "mlp"
    conv_channels: tuple[int, ...] = (16, 32)
    conv_kernels: tuple[tuple[int, int], ...] = ((8, 8), (4, 4))
    conv_strides: tuple[tuple[int, int], ...] = ((4, 4), (2, 2))
    embed_dim: int = 256
    mlp_hidden: tuple[int, ...] = (256, 256)
    log_std_init: float = field(default_factory=lambda: math.log(0.5))
    log_std_bounds: tuple[float, float] = (-5.0, 2.0)
    # Policy/value output layers start near zero (reference-implementation
    # practice): a randomly initialized value head otherwise dwarfs the
    # 1e-6-scaled rewards and poisons early advantages, and a hot policy
    # head can dive into the all-sell region it cannot explore out of.
    head_gain: float = 0.01

    def __post_init__(self):
        if self.kind not in ("cnn", "mlp"):
            raise ShuffleRlError(f"unknown extractor kind {self.kind!r}")
        if not len(self.conv_channels) == len(self.conv_kernels) == len(self.conv_strides):
            raise ShuffleRlError("conv_channels, conv_kernels, conv_strides must have equal length")

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "conv_channels": list(self.conv_channels),
            "conv_kernels": [list(k) for k in self.conv_kernels],
            "conv_strides": [list(s) for s in self.conv_strides],
            "embed_dim": self.embed_dim,
            "mlp_hidden": list(self.mlp_hidden),
            "log_std_init": self.log_std_init,
            "log_std_bounds": list(self.log_std_bounds),
            "head_gain": self.head_gain,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "ArchSpec":
        return cls(
            kind=data["kind"],
            conv_channels=tuple(data["conv_channels"]),
            conv_kernels=tuple(tuple(k) for k in data["conv_kernels"]),
            conv_strides=tuple(tuple(s) for s in data["conv_strides"]),
            embed_dim=data["embed_dim"],
            mlp_hidden=tuple(data["mlp_hidden"]),
            log_std_init=data["log_std_init"],
            log_std_bounds=tuple(data["log_std_bounds"]),
            head_gain=data.get("head_gain", 0.01),
        )


def _kaiming(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int) -> np.ndarray:
    return rng.standard_normal(shape) * math.sqrt(2.0 / fan_in)


def cnn_feature_shapes(
    arch: ArchSpec, obs_shape: tuple[int, int]
) -> list[tuple[int, int, int]]:
    """(channels, height, width) after each conv layer, for shape audits."""
    h, w = obs_shape
    shapes = []
    for ch, (kh, kw), (sh, sw) in zip(arch.conv_channels, arch.conv_kernels, arch.conv_strides):
        h = conv_output_size(h, kh, sh)
        w = conv_output_size(w, kw, sw)
        shapes.append((ch, h, w))
    return shapes


def build_extractor(arch: ArchSpec, obs_shape: tuple[int, ...], rng: np.random.Generator) -> Sequential:
    """Feature extractor mapping an observation batch to embeddings.

    The CNN variant expects 2-D observations (window rows by feature
    columns) and views them as one input channel; the MLP variant flattens
    whatever it is given.
    """
    if arch.kind == "cnn":
        if len(obs_shape) != 2:
            raise ShuffleRlError(f"cnn extractor needs (H, W) observations, got shape {obs_shape}")
        layers: list = []
        in_ch = 1
        shapes = cnn_feature_shapes(arch, obs_shape)
        for li, (ch, (kh, kw), stride) in enumerate(
            zip(arch.conv_channels, arch.conv_kernels, arch.conv_strides), start=1
        ):
            weight = _kaiming(rng, (ch, in_ch, kh, kw), fan_in=in_ch * kh * kw)
            layers.append(Conv2d(f"conv{li}", weight, np.zeros(ch), stride))
            layers.append(BatchNorm2d(f"bn{li}", np.ones(ch), np.zeros(ch)))
            layers.append(ReLU(f"relu{li}"))
            in_ch = ch
        flat = int(np.prod(shapes[-1]))
        layers.append(Flatten("flatten"))
        layers.append(
            Linear("embed", _kaiming(rng, (arch.embed_dim, flat), fan_in=flat), np.zeros(arch.embed_dim))
        )
        layers.append(ReLU("relu_embed"))
        return Sequential(layers)

    in_features = int(np.prod(obs_shape))
    layers = [Flatten("flatten")]
    for li, hidden in enumerate(arch.mlp_hidden, start=1):
        layers.append(
            Linear(f"fc{li}", _kaiming(rng, (hidden, in_features), fan_in=in_features), np.zeros(hidden))
        )
        layers.append(ReLU(f"relu{li}"))
        in_features = hidden
    return Sequential(layers)


def extractor_out_dim(arch: ArchSpec, obs_shape: tuple[int, ...]) -> int:
    if arch.kind == "cnn":
        return arch.embed_dim
    return arch.mlp_hidden[-1] if arch.mlp_hidden else int(np.prod(obs_shape))


class ActorCritic:
    """Shared extractor trunk with a Gaussian policy head and a value head.

    The action log-stds are a state-independent learned vector, clamped to
    the configured bounds on every use.
    """

    def __init__(self, arch: ArchSpec, obs_shape: tuple[int, ...], action_dim: int, seed: int):
        self.arch = arch
        self.obs_shape = tuple(int(s) for s in obs_shape)
        self.action_dim = int(action_dim)
        self.seed = int(seed)
        rng = np.random.default_rng(seed)
        self.extractor = build_extractor(arch, self.obs_shape, rng)
        embed = extractor_out_dim(arch, self.obs_shape)
        gain = arch.head_gain
        self.policy_head = Linear(
            "policy", gain * _kaiming(rng, (action_dim, embed), fan_in=embed), np.zeros(action_dim)
        )
        self.value_head = Linear("value", gain * _kaiming(rng, (1, embed), fan_in=embed), np.zeros(1))
        self.log_std = np.full(action_dim, arch.log_std_init)
        self.training = True

    def set_training(self, training: bool):
        self.training = training
        self.extractor.set_training(training)

    def named_parameters(self) -> list[tuple[str, np.ndarray]]:
        return [
            *self.extractor.params(),
            *self.policy_head.params(),
            *self.value_head.params(),
            ("log_std", self.log_std),
        ]

    def named_buffers(self) -> list[tuple[str, np.ndarray]]:
        return self.extractor.buffers()

    def effective_log_std(self) -> np.ndarray:
        low, high = self.arch.log_std_bounds
        return np.clip(self.log_std, low, high)

    def _as_batch(self, obs: np.ndarray) -> np.ndarray:
        obs = np.asarray(obs, dtype=np.float64)
        if obs.shape[1:] != self.obs_shape:
            raise ShuffleRlError(f"expected observations of shape {self.obs_shape}, got {obs.shape[1:]}")
        if self.arch.kind == "cnn":
            return obs[:, None, :, :]  # add the single input channel
        return obs

    def forward(self, obs: np.ndarray):
        """Batched forward; returns (means, values, cache)."""
        x = self._as_batch(obs)
        embed, caches = self.extractor.forward(x)
        mu, policy_cache = self.policy_head.forward(embed)
        value, value_cache = self.value_head.forward(embed)
        return mu, value[:, 0], (caches, policy_cache, value_cache)

    def backward(self, cache, dmu: np.ndarray, dvalue: np.ndarray) -> dict[str, np.ndarray]:
        """Gradients of a scalar loss given d(loss)/d(mu) and d(loss)/d(value).

        The log_std gradient is handled by the caller (the distribution
        math lives with the policy objective; clamping is applied there).
        """
        caches, policy_cache, value_cache = cache
        dembed_p, policy_grads = self.policy_head.backward(policy_cache, dmu)
        dembed_v, value_grads = self.value_head.backward(value_cache, dvalue[:, None])
        _, extractor_grads = self.extractor.backward(caches, dembed_p + dembed_v)
        return {**extractor_grads, **policy_grads, **value_grads}

    def log_std_grad_mask(self) -> np.ndarray:
        """1 where the raw log_std is inside the clamp bounds, else 0."""
        low, high = self.arch.log_std_bounds
        return ((self.log_std > low) & (self.log_std < high)).astype(np.float64)


@dataclass
class GradCheckResult:
    max_rel_error: float
    worst_param: str
    worst_index: tuple

    def __str__(self):
        return f"max relative error {self.max_rel_error:.3e} at {self.worst_param}{list(self.worst_index)}"


def grad_check(
    compute_loss,
    params: list[tuple[str, np.ndarray]],
    h: float = 1e-4,
    max_entries_per_param: int | None = None,
    seed: int = 0,
    denominator_floor: float = 1e-6,
) -> GradCheckResult:
    """Compare analytic gradients against central finite differences.

    ``compute_loss()`` must return ``(scalar_loss, grads_by_name)`` and be a
    deterministic function of the current parameter values. Parameters are
    perturbed in place and restored. For large tensors a fixed-seed subset
    of entries is checked.

    The relative error divides by ``max(|analytic|, |fd|, floor)``; the
    floor keeps mathematically-zero gradients (whose central differences
    are pure roundoff, about eps * |loss| / h) from registering as
    disagreement.
    """
    rng = np.random.default_rng(seed)
    _, grads = compute_loss()
    worst = GradCheckResult(0.0, "<none>", ())
    for name, param in params:
        grad = grads[name]
        flat_indices = np.arange(param.size)
        if max_entries_per_param is not None and param.size > max_entries_per_param:
            flat_indices = rng.choice(param.size, size=max_entries_per_param, replace=False)
        for flat in flat_indices:
            idx = np.unravel_index(flat, param.shape)
            original = param[idx]
            param[idx] = original + h
            loss_plus, _ = compute_loss()
            param[idx] = original - h
            loss_minus, _ = compute_loss()
            param[idx] = original
            fd = (loss_plus - loss_minus) / (2 * h)
            analytic = grad[idx]
            rel = abs(analytic - fd) / max(abs(analytic), abs(fd), denominator_floor)
            if rel > worst.max_rel_error:
                worst = GradCheckResult(rel, name, idx)
    return worst
