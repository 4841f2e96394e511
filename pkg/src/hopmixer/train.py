"""Reverse-mode gradients, Adam, and the desk-scale training loop.

Gradients are written out by hand for the fixed layer topology (embedding,
mixing blocks, mean pooling, linear head). The only non-trivial local
derivative is the layer norm: for ``n = c / r`` with ``c = x - mean(x)`` and
``r = sqrt(|c|^2 + eps)`` (sums over the normalized axes) the
vector-Jacobian product is::

    dc = (dn - n * <dn, n>) / r
    dx = dc - mean(dc)

i.e. the incoming gradient is projected off the normalized vector and off
the constant direction, then scaled by ``1 / r``.

Tied weights are handled at the end of each block: the effective write
gradients ``dW2``, ``dW4`` are folded back onto the stored parameters
(``W1 += dW2.T`` for symmetric and asymmetric blocks, plus ``W2t = dW2`` for
asymmetric ones).
"""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import blocks as bl
from .blocks import Mode, MixerBlock
from .errors import ConfigurationError, DimensionError, DivergenceError, NumericError
from .numerics import make_rng, read_f64, write_f64

MODES = ("vanilla", "para", "sym", "asym")


# ---------------------------------------------------------------------------
# network
# ---------------------------------------------------------------------------

@dataclass(eq=False)
class MixerNet:
    """Stack of mixing blocks with an optional per-token embedding and pooled linear head.

    Without a head the network maps grids to grids (used for denoising);
    with one it maps ``(batch, tokens, d_in)`` inputs to class logits.
    """

    blocks: list[MixerBlock]
    embed: np.ndarray | None = None
    head: np.ndarray | None = None
    head_b: np.ndarray | None = None

    def __post_init__(self):
        if not self.blocks:
            raise ConfigurationError("a network needs at least one block")
        shape = (self.blocks[0].n_tokens, self.blocks[0].n_channels)
        for i, b in enumerate(self.blocks):
            if (b.n_tokens, b.n_channels) != shape:
                raise DimensionError(f"block {i} has grid {(b.n_tokens, b.n_channels)}, expected {shape}")
        if self.embed is not None and self.embed.shape[1] != shape[1]:
            raise DimensionError("embedding output width must equal n_channels")
        if (self.head is None) != (self.head_b is None):
            raise ConfigurationError("head and head_b go together")
        if self.head is not None and self.head.shape[0] != shape[1]:
            raise DimensionError("head input width must equal n_channels")

    @property
    def n_classes(self) -> int | None:
        return None if self.head is None else self.head.shape[1]

    def params(self) -> dict[str, np.ndarray]:
        p = {}
        if self.embed is not None:
            p["embed"] = self.embed
        for i, b in enumerate(self.blocks):
            for name, arr in b.params().items():
                p[f"blocks.{i}.{name}"] = arr
        if self.head is not None:
            p["head"] = self.head
            p["head_b"] = self.head_b
        return p

    def copy(self) -> "MixerNet":
        return MixerNet(
            blocks=[b.copy() for b in self.blocks],
            embed=None if self.embed is None else self.embed.copy(),
            head=None if self.head is None else self.head.copy(),
            head_b=None if self.head_b is None else self.head_b.copy(),
        )

    def forward(self, X, caches: list | None = None) -> np.ndarray:
        x = np.asarray(X, dtype=np.float64)
        if self.embed is not None:
            x = x @ self.embed
        for i, b in enumerate(self.blocks):
            step = bl.serial_step if b.serial else bl.parallel_step
            for _ in range(b.n_iter):
                c = {} if caches is not None else None
                x = step(x, b, c)
                if caches is not None:
                    caches.append((i, c))
            if not np.all(np.isfinite(x)):
                raise NumericError(f"non-finite activations after block {i}")
        if self.head is None:
            return x
        pooled = x.mean(axis=-2)
        if caches is not None:
            caches.append(("head", {"x": x, "pooled": pooled}))
        return pooled @ self.head + self.head_b

    def predict(self, X) -> np.ndarray:
        return np.argmax(self.forward(X), axis=-1)

    @classmethod
    def init(
        cls,
        rng: np.random.Generator,
        n_tokens: int,
        n_channels: int,
        d_in: int | None = None,
        n_classes: int | None = None,
        n_layers: int = 2,
        mode: str = "para",
        scale: float = 1.0,
        **block_kwargs,
    ) -> "MixerNet":
        """Random network. ``mode`` is one of vanilla, para, sym, asym."""
        if mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        bmode = {"vanilla": Mode.FREE, "para": Mode.FREE, "sym": Mode.SYMMETRIC, "asym": Mode.ASYMMETRIC}[mode]
        block_kwargs.setdefault("bias", mode == "vanilla")
        blocks = [
            MixerBlock.init(rng, n_tokens, n_channels, mode=bmode, scale=scale, serial=mode == "vanilla", **block_kwargs)
            for _ in range(n_layers)
        ]
        embed = None if d_in is None else rng.standard_normal((d_in, n_channels)) / np.sqrt(d_in)
        head = head_b = None
        if n_classes is not None:
            head = rng.standard_normal((n_channels, n_classes)) / np.sqrt(n_channels)
            head_b = np.zeros(n_classes)
        return cls(blocks=blocks, embed=embed, head=head, head_b=head_b)


# ---------------------------------------------------------------------------
# losses and gradients
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class MSE:
    name = "mse"


@dataclass(frozen=True)
class CrossEntropyFrobenius:
    """Mean cross-entropy plus ``lam`` times the summed squared norms of all W2t, W4t."""

    lam: float = 0.0
    name = "ce"

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError("lam must be non-negative")


def frobenius_penalty(net: MixerNet) -> float:
    total = 0.0
    for i, b in enumerate(net.blocks):
        if b.mode is not Mode.ASYMMETRIC:
            raise ConfigurationError(f"block {i} is {b.mode.value}; the penalty needs asymmetric blocks")
        total += float(np.sum(b.W2_tilde**2) + np.sum(b.W4_tilde**2))
    return total


def wtilde_norm(net: MixerNet) -> float:
    """Penalty value for asymmetric nets, 0 otherwise."""
    if all(b.mode is Mode.ASYMMETRIC for b in net.blocks):
        return frobenius_penalty(net)
    return 0.0


def _softmax(z):
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _norm_backward(dn, n, r, norm):
    axes = bl._norm_axes(norm)
    dc = (dn - n * np.sum(dn * n, axis=axes, keepdims=True)) / r
    return dc - dc.mean(axis=axes, keepdims=True)


def _b3(arr):
    """View with all leading batch axes merged into one."""
    return arr.reshape((-1,) + arr.shape[-2:])


def _sum_to(arr, axis):
    """Sum a batched array down to a vector along ``axis`` (-1 or -2)."""
    keep = arr.ndim + axis
    return arr.sum(axis=tuple(a for a in range(arr.ndim) if a != keep))


def _token_backward(dm, n, c, block, g):
    g["W2"] += np.einsum("btc,bsc->ts", _b3(dm), _b3(c["h_s"]))
    g["b2"] += _sum_to(dm, -2)
    da = (block.W2.T @ dm) * block.activation_s.derivative(c["a_s"])
    g["W1"] += np.einsum("bsc,btc->st", _b3(da), _b3(n))
    g["b1"] += _sum_to(da, -2)
    return block.W1.T @ da


def _channel_backward(dm, n, c, block, g):
    g["W4"] += np.einsum("btd,btc->dc", _b3(c["h_c"]), _b3(dm))
    g["b4"] += _sum_to(dm, -1)
    da = (dm @ block.W4.T) * block.activation_c.derivative(c["a_c"])
    g["W3"] += np.einsum("btc,btd->cd", _b3(n), _b3(da))
    g["b3"] += _sum_to(da, -1)
    return da @ block.W3.T


def _parallel_step_backward(dout, block, c, g):
    dm = block.step * dout
    dn = _token_backward(dm, c["n"], c, block, g) + _channel_backward(dm, c["n"], c, block, g)
    return (1.0 - block.step * block.decay) * dout + _norm_backward(dn, c["n"], c["r"], block.norm)


def _serial_step_backward(dout, block, c, g):
    dn2 = _channel_backward(block.step * dout, c["n2"], c, block, g)
    dx1 = dout + _norm_backward(dn2, c["n2"], c["r2"], block.norm)
    dn1 = _token_backward(block.step * dx1, c["n1"], c, block, g)
    return dx1 + _norm_backward(dn1, c["n1"], c["r1"], block.norm)


def _fold_block_grads(block: MixerBlock, g: dict) -> dict:
    """Map effective-matrix gradients onto the block's stored parameters."""
    out = {"W1": g["W1"].copy(), "W3": g["W3"].copy()}
    if block.mode is Mode.FREE:
        out["W2"], out["W4"] = g["W2"], g["W4"]
    else:
        out["W1"] += g["W2"].T
        out["W3"] += g["W4"].T
        if block.mode is Mode.ASYMMETRIC:
            out["W2t"], out["W4t"] = g["W2"], g["W4"]
    if block.bias is not None:
        for k in ("b1", "b2", "b3", "b4"):
            out[k] = g[k]
    return out


def loss_and_output_grad(net: MixerNet, out, Y, loss):
    """Data-term loss value and its gradient w.r.t. the network output."""
    if isinstance(loss, MSE):
        Y = np.asarray(Y, dtype=np.float64)
        if Y.shape != out.shape:
            raise DimensionError(f"targets {Y.shape} do not match outputs {out.shape}")
        diff = out - Y
        return float(np.mean(diff * diff)), 2.0 * diff / diff.size
    y = np.asarray(Y).astype(np.int64)
    p = _softmax(out)
    B = out.shape[0]
    value = float(-np.mean(np.log(np.maximum(p[np.arange(B), y], 1e-300))))
    d = p.copy()
    d[np.arange(B), y] -= 1.0
    return value, d / B


def backward(net: MixerNet, X, Y, loss) -> tuple[float, dict[str, np.ndarray]]:
    """Loss value and exact gradients for every entry of ``net.params()``."""
    caches: list = []
    out = net.forward(X, caches)
    value, dout = loss_and_output_grad(net, out, Y, loss)
    if not np.isfinite(value):
        raise NumericError(f"non-finite loss (last block {len(net.blocks) - 1})")
    grads: dict[str, np.ndarray] = {}

    if net.head is not None:
        _, hc = caches.pop()
        grads["head"] = hc["pooled"].reshape(-1, hc["pooled"].shape[-1]).T @ dout.reshape(-1, dout.shape[-1])
        grads["head_b"] = dout.reshape(-1, dout.shape[-1]).sum(axis=0)
        dpooled = dout @ net.head.T
        T = hc["x"].shape[-2]
        dx = np.broadcast_to(dpooled[..., None, :] / T, hc["x"].shape).copy()
    else:
        dx = dout

    raw = [None] * len(net.blocks)
    for i, c in reversed(caches):
        b = net.blocks[i]
        if raw[i] is None:
            raw[i] = {
                "W1": np.zeros_like(b.W1), "W2": np.zeros((b.n_tokens, b.d_token)),
                "W3": np.zeros_like(b.W3), "W4": np.zeros((b.d_channel, b.n_channels)),
                "b1": np.zeros(b.d_token), "b2": np.zeros(b.n_tokens),
                "b3": np.zeros(b.d_channel), "b4": np.zeros(b.n_channels),
            }
        step_bwd = _serial_step_backward if b.serial else _parallel_step_backward
        dx = step_bwd(dx, b, c, raw[i])
    for i, b in enumerate(net.blocks):
        for name, gval in _fold_block_grads(b, raw[i]).items():
            grads[f"blocks.{i}.{name}"] = gval

    if net.embed is not None:
        grads["embed"] = np.einsum("btd,btc->dc", _b3(np.asarray(X, dtype=np.float64)), _b3(dx))

    if isinstance(loss, CrossEntropyFrobenius) and loss.lam > 0:
        value += loss.lam * frobenius_penalty(net)
        for i, b in enumerate(net.blocks):
            grads[f"blocks.{i}.W2t"] = grads[f"blocks.{i}.W2t"] + 2.0 * loss.lam * b.W2_tilde
            grads[f"blocks.{i}.W4t"] = grads[f"blocks.{i}.W4t"] + 2.0 * loss.lam * b.W4_tilde
    return value, grads


def total_loss(net: MixerNet, X, Y, loss) -> float:
    out = net.forward(X)
    value, _ = loss_and_output_grad(net, out, Y, loss)
    if isinstance(loss, CrossEntropyFrobenius) and loss.lam > 0:
        value += loss.lam * frobenius_penalty(net)
    return value


# ---------------------------------------------------------------------------
# optimizer and loop
# ---------------------------------------------------------------------------

class Adam:
    """Adam with bias correction; updates parameter arrays in place."""

    def __init__(self, lr=1e-4, beta1=0.9, beta2=0.999, eps=1e-8):
        if not lr >= 0:
            raise ValueError("lr must be non-negative")
        if not (0 <= beta1 < 1 and 0 <= beta2 < 1):
            raise ValueError("betas must lie in [0, 1)")
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.t = 0

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
        self.t += 1
        bc1 = 1.0 - self.beta1**self.t
        bc2 = 1.0 - self.beta2**self.t
        for k, p in params.items():
            g = grads[k]
            if k not in self.m:
                self.m[k] = np.zeros_like(p)
                self.v[k] = np.zeros_like(p)
            self.m[k] = self.beta1 * self.m[k] + (1.0 - self.beta1) * g
            self.v[k] = self.beta2 * self.v[k] + (1.0 - self.beta2) * g * g
            p -= self.lr * (self.m[k] / bc1) / (np.sqrt(self.v[k] / bc2) + self.eps)


@dataclass
class TrainConfig:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    batch_size: int = 64
    epochs: int = 10
    loss: str = "mse"  # "mse" or "ce"
    lam: float = 0.0
    noise_sigma: float = 0.0  # fresh Gaussian noise added to inputs of every training batch
    seed: int = 0

    def __post_init__(self):
        if not self.lr >= 0:
            raise ValueError("lr must be non-negative")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError("betas must lie in [0, 1)")
        if self.loss not in ("mse", "ce"):
            raise ValueError("loss must be 'mse' or 'ce'")
        if self.batch_size < 1 or self.epochs < 0:
            raise ValueError("batch_size must be positive and epochs non-negative")

    def loss_fn(self):
        return MSE() if self.loss == "mse" else CrossEntropyFrobenius(self.lam)


@dataclass
class EpochRecord:
    epoch: int
    loss: float
    metric: float


def evaluate(net: MixerNet, X, Y) -> float:
    """Top-1 accuracy for classifiers, mean squared error for grid-to-grid nets."""
    if net.head is not None:
        return float(np.mean(net.predict(X) == np.asarray(Y).astype(np.int64)))
    diff = net.forward(X) - np.asarray(Y, dtype=np.float64)
    return float(np.mean(diff * diff))


def train(net: MixerNet, X, Y, cfg: TrainConfig) -> tuple[MixerNet, list[EpochRecord]]:
    """Mini-batch Adam on a copy of ``net``.

    The curve starts with epoch 0 (the untrained network) and has one record
    per completed epoch. Losses are full-dataset values; when
    ``noise_sigma > 0`` they are measured on one fixed noisy copy of the
    inputs so that epochs are comparable.
    """
    net = net.copy()
    rng = make_rng(cfg.seed)
    X = np.asarray(X, dtype=np.float64)
    Y = np.asarray(Y)
    loss = cfg.loss_fn()
    X_eval = X if cfg.noise_sigma == 0 else X + cfg.noise_sigma * rng.standard_normal(X.shape)

    def record(epoch):
        try:
            value = total_loss(net, X_eval, Y, loss)
        except NumericError as exc:
            raise DivergenceError(f"divergence at epoch {epoch}: {exc}", step=epoch) from exc
        if not np.isfinite(value):
            raise DivergenceError(f"loss became non-finite at epoch {epoch}", step=epoch)
        return EpochRecord(epoch, value, evaluate(net, X_eval, Y))

    curve = [record(0)]
    opt = Adam(cfg.lr, cfg.beta1, cfg.beta2, cfg.adam_eps)
    params = net.params()
    n = X.shape[0]
    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(n)
        for start in range(0, n, cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            xb = X[idx]
            if cfg.noise_sigma:
                xb = xb + cfg.noise_sigma * rng.standard_normal(xb.shape)
            try:
                _, grads = backward(net, xb, Y[idx], loss)
            except NumericError as exc:
                raise DivergenceError(f"divergence at epoch {epoch}: {exc}", step=epoch) from exc
            opt.step(params, grads)
        curve.append(record(epoch))
    return net, curve


def write_curve(curve: list[EpochRecord], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "loss", "metric"])
        for r in curve:
            w.writerow([r.epoch, repr(float(r.loss)), repr(float(r.metric))])


# ---------------------------------------------------------------------------
# datasets
# ---------------------------------------------------------------------------

def make_glyphs(rng, n_patterns: int = 10, size: int = 8, density: float = 0.4) -> np.ndarray:
    """Random binary ``size x size`` prototypes, each with at least one on and one off pixel."""
    out = np.empty((n_patterns, size, size))
    for k in range(n_patterns):
        while True:
            g = (rng.random((size, size)) < density).astype(np.float64)
            if 0 < g.sum() < g.size:
                break
        out[k] = g
    return out


def glyph_denoising_data(
    rng, n_train: int = 1000, n_test: int = 200, n_patterns: int = 10, size: int = 8, sigma: float = 0.3
) -> dict[str, np.ndarray]:
    """Clean training glyphs plus a fixed noisy held-out split.

    Training inputs are clean; noise is added per batch by :func:`train`.
    """
    protos = make_glyphs(rng, n_patterns, size)
    tr = protos[rng.integers(0, n_patterns, n_train)]
    te_clean = protos[rng.integers(0, n_patterns, n_test)]
    te_noisy = te_clean + sigma * rng.standard_normal(te_clean.shape)
    return {"prototypes": protos, "X_train": tr, "Y_train": tr.copy(), "X_test": te_noisy, "Y_test": te_clean}


def token_classification_data(
    rng,
    n_train: int = 1000,
    n_test: int = 500,
    n_tokens: int = 4,
    d_in: int = 8,
    n_classes: int = 2,
    noise: float = 0.5,
) -> dict[str, np.ndarray]:
    """Classes that differ only in which token carries which feature vector.

    A shared set of ``n_tokens`` prototype vectors is dealt to token positions
    by a class-specific permutation, so every class has the same multiset of
    token features and a per-token map followed by pooling cannot separate
    them; mixing across tokens is required.
    """
    protos = rng.standard_normal((n_tokens, d_in))
    perms = []
    seen = set()
    while len(perms) < n_classes:
        p = tuple(rng.permutation(n_tokens))
        if p not in seen:
            seen.add(p)
            perms.append(p)
    templates = np.stack([protos[list(p)] for p in perms])

    def draw(m):
        y = np.arange(m) % n_classes
        rng.shuffle(y)
        X = templates[y] + noise * rng.standard_normal((m, n_tokens, d_in))
        return X, y.astype(np.float64)

    X_train, y_train = draw(n_train)
    X_test, y_test = draw(n_test)
    return {"X_train": X_train, "Y_train": y_train, "X_test": X_test, "Y_test": y_test}


def save_dataset(directory, tensors: dict[str, np.ndarray], meta: dict | None = None) -> None:
    """One raw float64 file per tensor plus ``manifest.json`` with shapes."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    manifest = {"tensors": {}, "meta": meta or {}}
    for name, arr in tensors.items():
        write_f64(directory / f"{name}.bin", arr)
        manifest["tensors"][name] = list(np.shape(arr))
    (directory / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def load_dataset(directory) -> tuple[dict[str, np.ndarray], dict]:
    directory = Path(directory)
    manifest = json.loads((directory / "manifest.json").read_text())
    tensors = {name: read_f64(directory / f"{name}.bin", shape) for name, shape in manifest["tensors"].items()}
    return tensors, manifest.get("meta", {})


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def save_net(net: MixerNet, directory, extra: dict | None = None) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    manifest = {"n_blocks": len(net.blocks), "tensors": {}, "extra": extra or {}}
    for name in ("embed", "head", "head_b"):
        arr = getattr(net, name)
        if arr is not None:
            write_f64(directory / f"{name}.bin", arr)
            manifest["tensors"][name] = list(arr.shape)
    for i, b in enumerate(net.blocks):
        bl.save_block(b, directory / f"block_{i}")
    (directory / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def load_net(directory) -> MixerNet:
    directory = Path(directory)
    m = json.loads((directory / "manifest.json").read_text())
    t = {name: read_f64(directory / f"{name}.bin", shape) for name, shape in m["tensors"].items()}
    blocks = [bl.load_block(directory / f"block_{i}") for i in range(m["n_blocks"])]
    return MixerNet(blocks=blocks, embed=t.get("embed"), head=t.get("head"), head_b=t.get("head_b"))


def config_dict(cfg: TrainConfig) -> dict:
    return asdict(cfg)
