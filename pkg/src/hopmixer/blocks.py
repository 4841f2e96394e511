"""Discrete mixing layers on a token grid.

A token grid has shape ``(n_tokens, n_channels)``, optionally with leading
batch axes. The parallel update reads one normalized copy of the grid and
adds the token-mixing and channel-mixing outputs to the skip path::

    n  = LN(x)
    x' = x + step * (W2 g_s(W1 n) + g_c(n W3) W4 - decay * x)

with ``step = 1`` and ``decay = 0`` by default. The serial (vanilla) block
applies the token path, renormalizes, then applies the channel path.

Weight modes:

* ``free`` -- W1..W4 independent.
* ``symmetric`` -- only W1 and W3 are stored; ``W2 = W1.T`` and ``W4 = W3.T``
  are derived on every access, so the tie cannot drift.
* ``asymmetric`` -- ``W2 = W1.T + W2t`` and ``W4 = W3.T + W4t``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

import numpy as np

from . import lagrangians as lg
from .errors import ConfigurationError, DimensionError, SingularityError
from .numerics import read_f64, write_f64

DEFAULT_EPS = 1e-6
EXPANSION = (0.5, 4.0)


class Mode(str, Enum):
    FREE = "free"
    SYMMETRIC = "symmetric"
    ASYMMETRIC = "asymmetric"


class Norm(str, Enum):
    JOINT = "joint"
    CHANNEL = "channel"


def _norm_axes(norm: Norm):
    return (-2, -1) if Norm(norm) is Norm.JOINT else (-1,)


def _normalize(x, norm, eps):
    axes = _norm_axes(norm)
    c = x - x.mean(axis=axes, keepdims=True)
    r = np.sqrt(np.sum(c * c, axis=axes, keepdims=True) + eps)
    if np.any(r == 0.0):
        raise SingularityError("layer norm of a constant grid is undefined at eps = 0")
    return c / r, r


def symmetric_layernorm(x, eps: float = DEFAULT_EPS) -> np.ndarray:
    """Center by the grand mean and divide by the joint norm over tokens and channels."""
    return _normalize(np.asarray(x, dtype=np.float64), Norm.JOINT, eps)[0]


def channel_layernorm(x, eps: float = DEFAULT_EPS) -> np.ndarray:
    """Per-token normalization along the channel axis only."""
    return _normalize(np.asarray(x, dtype=np.float64), Norm.CHANNEL, eps)[0]


@dataclass(eq=False)
class MixerBlock:
    """One mixing layer.

    Shapes: ``W1 (d_token, n_tokens)``, ``W2 (n_tokens, d_token)``,
    ``W3 (n_channels, d_channel)``, ``W4 (d_channel, n_channels)``.
    Biases, when present, live in ``bias`` under ``b1`` (d_token,),
    ``b2`` (n_tokens,), ``b3`` (d_channel,) and ``b4`` (n_channels,).
    """

    W1: np.ndarray
    W3: np.ndarray
    W2_free: np.ndarray | None = None
    W4_free: np.ndarray | None = None
    W2_tilde: np.ndarray | None = None
    W4_tilde: np.ndarray | None = None
    mode: Mode = Mode.SYMMETRIC
    n_iter: int = 1
    activation_s: lg.Lagrangian = field(default_factory=lg.GELUPrimitive)
    activation_c: lg.Lagrangian = field(default_factory=lg.GELUPrimitive)
    norm: Norm = Norm.JOINT
    eps: float = DEFAULT_EPS
    bias: dict | None = None
    step: float = 1.0
    decay: float = 0.0
    serial: bool = False

    def __post_init__(self):
        self.mode = Mode(self.mode)
        self.norm = Norm(self.norm)
        self.W1 = np.array(self.W1, dtype=np.float64)
        self.W3 = np.array(self.W3, dtype=np.float64)
        if self.n_iter < 1:
            raise ValueError("n_iter must be at least 1")
        for lag in (self.activation_s, self.activation_c):
            if not getattr(lag, "elementwise", False):
                raise ConfigurationError("hidden activations must come from an elementwise Lagrangian")
        d_t, n_t = self.W1.shape
        n_c, d_c = self.W3.shape
        if self.mode is Mode.FREE:
            if self.W2_free is None or self.W4_free is None:
                raise ConfigurationError("free mode needs W2 and W4")
            self.W2_free = _checked(self.W2_free, (n_t, d_t), "W2")
            self.W4_free = _checked(self.W4_free, (d_c, n_c), "W4")
        elif self.W2_free is not None or self.W4_free is not None:
            raise ConfigurationError(f"{self.mode.value} mode derives W2/W4; do not pass them")
        if self.mode is Mode.ASYMMETRIC:
            self.W2_tilde = _checked(
                np.zeros((n_t, d_t)) if self.W2_tilde is None else self.W2_tilde, (n_t, d_t), "W2t"
            )
            self.W4_tilde = _checked(
                np.zeros((d_c, n_c)) if self.W4_tilde is None else self.W4_tilde, (d_c, n_c), "W4t"
            )
        elif self.W2_tilde is not None or self.W4_tilde is not None:
            raise ConfigurationError("symmetry-breaking terms are only used in asymmetric mode")
        if self.bias is not None:
            want = {"b1": (d_t,), "b2": (n_t,), "b3": (d_c,), "b4": (n_c,)}
            if set(self.bias) != set(want):
                raise ConfigurationError(f"bias needs exactly the keys {sorted(want)}")
            self.bias = {k: _checked(v, want[k], k) for k, v in self.bias.items()}

    # -- shapes -------------------------------------------------------
    @property
    def n_tokens(self) -> int:
        return self.W1.shape[1]

    @property
    def n_channels(self) -> int:
        return self.W3.shape[0]

    @property
    def d_token(self) -> int:
        return self.W1.shape[0]

    @property
    def d_channel(self) -> int:
        return self.W3.shape[1]

    # -- effective write matrices --------------------------------------
    @property
    def W2(self) -> np.ndarray:
        if self.mode is Mode.FREE:
            return self.W2_free
        if self.mode is Mode.SYMMETRIC:
            # contiguous copy so products take the same BLAS path as the asymmetric sum
            return np.ascontiguousarray(self.W1.T)
        return self.W1.T + self.W2_tilde

    @property
    def W4(self) -> np.ndarray:
        if self.mode is Mode.FREE:
            return self.W4_free
        if self.mode is Mode.SYMMETRIC:
            return np.ascontiguousarray(self.W3.T)
        return self.W3.T + self.W4_tilde

    def params(self) -> dict[str, np.ndarray]:
        """Stored (trainable) arrays by checkpoint name. Arrays are live references."""
        p = {"W1": self.W1, "W3": self.W3}
        if self.mode is Mode.FREE:
            p["W2"] = self.W2_free
            p["W4"] = self.W4_free
        elif self.mode is Mode.ASYMMETRIC:
            p["W2t"] = self.W2_tilde
            p["W4t"] = self.W4_tilde
        if self.bias is not None:
            p.update(self.bias)
        return p

    def copy(self) -> "MixerBlock":
        return MixerBlock(
            W1=self.W1.copy(),
            W3=self.W3.copy(),
            W2_free=None if self.W2_free is None else self.W2_free.copy(),
            W4_free=None if self.W4_free is None else self.W4_free.copy(),
            W2_tilde=None if self.W2_tilde is None else self.W2_tilde.copy(),
            W4_tilde=None if self.W4_tilde is None else self.W4_tilde.copy(),
            mode=self.mode,
            n_iter=self.n_iter,
            activation_s=self.activation_s,
            activation_c=self.activation_c,
            norm=self.norm,
            eps=self.eps,
            bias=None if self.bias is None else {k: v.copy() for k, v in self.bias.items()},
            step=self.step,
            decay=self.decay,
            serial=self.serial,
        )

    @classmethod
    def init(
        cls,
        rng: np.random.Generator,
        n_tokens: int,
        n_channels: int,
        mode: Mode | str = Mode.SYMMETRIC,
        d_token: int | None = None,
        d_channel: int | None = None,
        h_r: float = 1.0,
        scale: float = 1.0,
        bias: bool = False,
        **kwargs,
    ) -> "MixerBlock":
        """Random block. Hidden widths default to ``(0.5, 4.0) * n_channels * h_r``.

        Every weight entry is drawn from ``N(0, scale^2)``; symmetry-breaking
        terms start at zero.
        """
        mode = Mode(mode)
        if d_token is None:
            d_token = max(1, int(int(EXPANSION[0] * n_channels) * h_r))
        if d_channel is None:
            d_channel = max(1, int(int(EXPANSION[1] * n_channels) * h_r))
        W1 = scale * rng.standard_normal((d_token, n_tokens))
        W3 = scale * rng.standard_normal((n_channels, d_channel))
        extra = {}
        if mode is Mode.FREE:
            extra["W2_free"] = scale * rng.standard_normal((n_tokens, d_token))
            extra["W4_free"] = scale * rng.standard_normal((d_channel, n_channels))
        b = None
        if bias:
            b = {
                "b1": np.zeros(d_token),
                "b2": np.zeros(n_tokens),
                "b3": np.zeros(d_channel),
                "b4": np.zeros(n_channels),
            }
        return cls(W1=W1, W3=W3, mode=mode, bias=b, **extra, **kwargs)


def _checked(a, shape, name):
    a = np.array(a, dtype=np.float64)
    if a.shape != tuple(shape):
        raise DimensionError(f"{name} must have shape {tuple(shape)}, got {a.shape}")
    return a


def _check_grid(x, block: MixerBlock) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim < 2 or x.shape[-2:] != (block.n_tokens, block.n_channels):
        raise DimensionError(
            f"grid shape {x.shape} does not end in (n_tokens, n_channels) = {(block.n_tokens, block.n_channels)}"
        )
    return x


def _bias(block, key, shape_tail):
    if block.bias is None:
        return 0.0
    return block.bias[key].reshape(shape_tail)


def _token_path(n, block, cache):
    a_s = block.W1 @ n + _bias(block, "b1", (-1, 1))
    h_s = block.activation_s.activation(a_s)
    out = block.W2 @ h_s + _bias(block, "b2", (-1, 1))
    if cache is not None:
        cache.update(a_s=a_s, h_s=h_s)
    return out


def _channel_path(n, block, cache):
    a_c = n @ block.W3 + _bias(block, "b3", (-1,))
    h_c = block.activation_c.activation(a_c)
    out = h_c @ block.W4 + _bias(block, "b4", (-1,))
    if cache is not None:
        cache.update(a_c=a_c, h_c=h_c)
    return out


def parallel_step(x, block: MixerBlock, cache: dict | None = None) -> np.ndarray:
    """One parallel update. Fills ``cache`` with intermediates when given."""
    n, r = _normalize(x, block.norm, block.eps)
    if cache is not None:
        cache.update(x=x, n=n, r=r)
    mixed = _token_path(n, block, cache) + _channel_path(n, block, cache)
    return x + block.step * (mixed - block.decay * x)


def serial_step(x, block: MixerBlock, cache: dict | None = None) -> np.ndarray:
    """One vanilla update: token mixing, then channel mixing on the renormalized result."""
    n1, r1 = _normalize(x, block.norm, block.eps)
    tok = {} if cache is not None else None
    x1 = x + block.step * _token_path(n1, block, tok)
    n2, r2 = _normalize(x1, block.norm, block.eps)
    ch = {} if cache is not None else None
    x2 = x1 + block.step * _channel_path(n2, block, ch)
    if cache is not None:
        cache.update(x=x, n1=n1, r1=r1, x1=x1, n2=n2, r2=r2, **tok, **ch)
    return x2


def parallel_block(x, block: MixerBlock) -> np.ndarray:
    """Apply the parallel update ``block.n_iter`` times."""
    x = _check_grid(x, block)
    for _ in range(block.n_iter):
        x = parallel_step(x, block)
    return x


def vanilla_block(x, block: MixerBlock) -> np.ndarray:
    """Apply the serial token-then-channel update ``block.n_iter`` times."""
    x = _check_grid(x, block)
    for _ in range(block.n_iter):
        x = serial_step(x, block)
    return x


def apply_block(x, block: MixerBlock) -> np.ndarray:
    return vanilla_block(x, block) if block.serial else parallel_block(x, block)


def iterate_block(x, block: MixerBlock, k: int) -> list[np.ndarray]:
    """States after 1..k successive applications of the block."""
    if k < 1:
        raise ValueError("k must be at least 1")
    out = []
    for _ in range(k):
        x = apply_block(x, block)
        out.append(x)
    return out


def block_energy(x, block: MixerBlock) -> np.ndarray | float:
    """Pseudo energy of the grid with the hidden layers at their adiabatic values.

    ``E = <x, n> - sqrt(|x - mean|^2 + eps) - L_s(W1 n) - L_c(n W3)
          - 1/2 <n, W2t g_s(W1 n)> - 1/2 <n, g_c(n W3) W4t>``

    where ``n`` is the joint layer norm and ``W2t = W2 - W1.T``,
    ``W4t = W4 - W3.T`` (zero for symmetric blocks). For batched input one
    energy per grid is returned.
    """
    x = _check_grid(x, block)
    if block.norm is not Norm.JOINT:
        raise ConfigurationError("the pseudo energy is defined for the joint layer norm only")
    if block.bias is not None:
        raise ConfigurationError("the pseudo energy has no bias terms; use a bias-free block")
    n, r = _normalize(x, Norm.JOINT, block.eps)
    axes = (-2, -1)
    e = np.sum(x * n, axis=axes) - r[..., 0, 0]
    xs = block.W1 @ n
    xc = n @ block.W3
    e = e - np.sum(block.activation_s.primitive(xs), axis=axes)
    e = e - np.sum(block.activation_c.primitive(xc), axis=axes)
    if block.mode is not Mode.SYMMETRIC:
        w2t = block.W2 - block.W1.T
        w4t = block.W4 - block.W3.T
        e = e - 0.5 * np.sum(n * (w2t @ block.activation_s.activation(xs)), axis=axes)
        e = e - 0.5 * np.sum(n * (block.activation_c.activation(xc) @ w4t), axis=axes)
    return float(e) if np.ndim(e) == 0 else e


# -- checkpoints ------------------------------------------------------------

def block_manifest(block: MixerBlock) -> dict:
    return {
        "mode": block.mode.value,
        "dims": {
            "n_tokens": block.n_tokens,
            "n_channels": block.n_channels,
            "d_token": block.d_token,
            "d_channel": block.d_channel,
        },
        "n_iter": block.n_iter,
        "eps": block.eps,
        "norm": block.norm.value,
        "serial": block.serial,
        "step": block.step,
        "decay": block.decay,
        "activation_s": lg.name_of(block.activation_s),
        "activation_c": lg.name_of(block.activation_c),
        "params": {name: list(arr.shape) for name, arr in block.params().items()},
    }


def save_block(block: MixerBlock, directory) -> dict:
    """Write ``manifest.json`` plus one ``<name>.bin`` float64 blob per stored matrix."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    manifest = block_manifest(block)
    for name, arr in block.params().items():
        write_f64(directory / f"{name}.bin", arr)
    (directory / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest


def load_block(directory) -> MixerBlock:
    directory = Path(directory)
    m = json.loads((directory / "manifest.json").read_text())
    arrays = {name: read_f64(directory / f"{name}.bin", shape) for name, shape in m["params"].items()}
    bias = None
    if "b1" in arrays:
        bias = {k: arrays.pop(k) for k in ("b1", "b2", "b3", "b4")}
    return MixerBlock(
        W1=arrays["W1"],
        W3=arrays["W3"],
        W2_free=arrays.get("W2"),
        W4_free=arrays.get("W4"),
        W2_tilde=arrays.get("W2t"),
        W4_tilde=arrays.get("W4t"),
        mode=m["mode"],
        n_iter=m["n_iter"],
        activation_s=lg.from_name(m["activation_s"]),
        activation_c=lg.from_name(m["activation_c"]),
        norm=m["norm"],
        eps=m["eps"],
        bias=bias,
        step=m["step"],
        decay=m["decay"],
        serial=m["serial"],
    )
