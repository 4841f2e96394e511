"""Continuous-time hierarchical Hopfield dynamics and their energies.

Two systems are provided:

* :class:`TwoLayerNet` -- visible vector ``v`` and hidden vector ``h`` coupled
  through one matrix ``xi`` (hidden x visible) and its transpose.
* :class:`HierarchicalNet` -- a visible grid ``x_v`` (tokens x channels) sitting
  between a token-hidden layer ``x_s`` (d_token x channels) and a
  channel-hidden layer ``x_c`` (tokens x d_channel). The visible-to-hidden
  couplings act along one grid axis each, which is the truncation that turns
  the discrete update into a mixing layer.

Hidden-to-visible couplings equal the transposes of the visible-to-hidden
ones unless symmetry-breaking terms ``asym_vs`` / ``asym_vc`` are set.

:func:`integrate` runs explicit Euler or classic RK4 on any of the systems
(including the adiabatically reduced :class:`VisibleFlow`) and records the
energy after every step.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, NamedTuple

import numpy as np

from . import lagrangians as lg
from .blocks import Mode, MixerBlock, Norm, block_energy
from .errors import ConfigurationError, DimensionError, DivergenceError

CONVERGENCE_TOL = 1e-7
CONVERGENCE_PATIENCE = 10


def _shape_check(arr, shape, name):
    arr = np.asarray(arr, dtype=np.float64)
    if arr.shape != tuple(shape):
        raise DimensionError(f"{name} must have shape {tuple(shape)}, got {arr.shape}")
    return arr


def _xg_minus_l(lag: lg.Lagrangian, x) -> float:
    return float(np.sum(x * lag.activation(x))) - lag.value(x)


# ---------------------------------------------------------------------------
# two-layer network
# ---------------------------------------------------------------------------

@dataclass(eq=False)
class TwoLayerNet:
    xi: np.ndarray
    L_v: lg.Lagrangian = field(default_factory=lg.CenteredNorm)
    L_h: lg.Lagrangian = field(default_factory=lg.ReLUSquared)
    tau_v: float = 1.0
    tau_h: float = 1.0
    decay: float = 1.0

    def __post_init__(self):
        self.xi = np.array(self.xi, dtype=np.float64)
        if self.xi.ndim != 2:
            raise DimensionError("xi must be a matrix (N_h, N_v)")
        if self.tau_v <= 0 or self.tau_h <= 0:
            raise ValueError("time constants must be positive")

    @property
    def n_v(self) -> int:
        return self.xi.shape[1]

    @property
    def n_h(self) -> int:
        return self.xi.shape[0]

    @classmethod
    def random(cls, rng, n_v: int, n_h: int, scale: float = 1.0, **kwargs) -> "TwoLayerNet":
        return cls(xi=scale * rng.standard_normal((n_h, n_v)) / np.sqrt(n_v), **kwargs)

    def pack(self, state) -> np.ndarray:
        v, h = state
        return np.concatenate([_shape_check(v, (self.n_v,), "v"), _shape_check(h, (self.n_h,), "h")])

    def unpack(self, vec):
        return vec[: self.n_v].copy(), vec[self.n_v :].copy()

    def velocity(self, vec) -> np.ndarray:
        v, h = vec[: self.n_v], vec[self.n_v :]
        dv = (self.xi.T @ self.L_h.activation(h) - self.decay * v) / self.tau_v
        dh = (self.xi @ self.L_v.activation(v) - h) / self.tau_h
        return np.concatenate([dv, dh])

    def energy_vec(self, vec) -> float:
        return energy_two_layer(self, vec[: self.n_v], vec[self.n_v :])


def energy_two_layer(net: TwoLayerNet, v, h) -> float:
    """``v.g - L_v + h.f - L_h - f xi g``."""
    v = _shape_check(v, (net.n_v,), "v")
    h = _shape_check(h, (net.n_h,), "h")
    g = net.L_v.activation(v)
    f = net.L_h.activation(h)
    return _xg_minus_l(net.L_v, v) + _xg_minus_l(net.L_h, h) - float(f @ net.xi @ g)


# ---------------------------------------------------------------------------
# three-layer network
# ---------------------------------------------------------------------------

class HierState(NamedTuple):
    xs: np.ndarray  # (d_token, n_channels)
    xv: np.ndarray  # (n_tokens, n_channels)
    xc: np.ndarray  # (n_tokens, d_channel)


@dataclass(eq=False)
class HierarchicalNet:
    """Three-layer network with the visible grid in the middle.

    ``xi_sv`` is ``(N_s, N_vs)`` and acts along the token axis;
    ``xi_cv`` is ``(N_c, N_vc)`` and acts along the channel axis.
    ``asym_vs`` ``(N_vs, N_s)`` and ``asym_vc`` ``(N_vc, N_c)`` are the optional
    symmetry-breaking parts of the hidden-to-visible couplings.
    """

    xi_sv: np.ndarray
    xi_cv: np.ndarray
    asym_vs: np.ndarray | None = None
    asym_vc: np.ndarray | None = None
    L_s: lg.Lagrangian = field(default_factory=lg.ReLUSquared)
    L_v: lg.Lagrangian = field(default_factory=lg.CenteredNorm)
    L_c: lg.Lagrangian = field(default_factory=lg.ReLUSquared)
    tau_s: float = 1.0
    tau_v: float = 1.0
    tau_c: float = 1.0
    decay: float = 1.0

    def __post_init__(self):
        self.xi_sv = np.array(self.xi_sv, dtype=np.float64)
        self.xi_cv = np.array(self.xi_cv, dtype=np.float64)
        if self.xi_sv.ndim != 2 or self.xi_cv.ndim != 2:
            raise DimensionError("xi_sv and xi_cv must be matrices")
        if self.asym_vs is not None:
            self.asym_vs = _shape_check(self.asym_vs, (self.N_vs, self.N_s), "asym_vs").copy()
        if self.asym_vc is not None:
            self.asym_vc = _shape_check(self.asym_vc, (self.N_vc, self.N_c), "asym_vc").copy()
        if min(self.tau_s, self.tau_v, self.tau_c) <= 0:
            raise ValueError("time constants must be positive")

    N_s = property(lambda self: self.xi_sv.shape[0])
    N_vs = property(lambda self: self.xi_sv.shape[1])
    N_c = property(lambda self: self.xi_cv.shape[0])
    N_vc = property(lambda self: self.xi_cv.shape[1])

    @property
    def dims(self) -> dict:
        return {"N_s": self.N_s, "N_vs": self.N_vs, "N_vc": self.N_vc, "N_c": self.N_c}

    @property
    def xi_vs(self) -> np.ndarray:
        w = self.xi_sv.T
        return w if self.asym_vs is None else w + self.asym_vs

    @property
    def xi_vc(self) -> np.ndarray:
        w = self.xi_cv.T
        return w if self.asym_vc is None else w + self.asym_vc

    @property
    def symmetric(self) -> bool:
        return self.asym_vs is None and self.asym_vc is None

    @classmethod
    def random(
        cls,
        rng,
        n_tokens: int,
        n_channels: int,
        d_token: int,
        d_channel: int,
        scale: float = 1.0,
        asym_scale: float | None = None,
        **kwargs,
    ) -> "HierarchicalNet":
        """Gaussian couplings with standard deviation ``scale``.

        ``asym_scale`` draws symmetry-breaking terms with standard deviation
        ``asym_scale`` times the RMS of the symmetric couplings.
        """
        xi_sv = scale * rng.standard_normal((d_token, n_tokens))
        xi_cv = scale * rng.standard_normal((d_channel, n_channels))
        if asym_scale is not None:
            kwargs["asym_vs"] = asym_scale * _rms(xi_sv) * rng.standard_normal((n_tokens, d_token))
            kwargs["asym_vc"] = asym_scale * _rms(xi_cv) * rng.standard_normal((n_channels, d_channel))
        return cls(xi_sv=xi_sv, xi_cv=xi_cv, **kwargs)

    @classmethod
    def from_block(cls, block: MixerBlock, **kwargs) -> "HierarchicalNet":
        """Network whose adiabatic reduction is the given parallel block."""
        if block.norm is not Norm.JOINT or block.bias is not None or block.serial:
            raise ConfigurationError("only bias-free parallel blocks with the joint norm map onto the network")
        asym = {}
        if block.mode is not Mode.SYMMETRIC:
            asym = {"asym_vs": block.W2 - block.W1.T, "asym_vc": (block.W4 - block.W3.T).T}
        kwargs.setdefault("L_v", lg.CenteredNorm(block.eps))
        return cls(
            xi_sv=block.W1.copy(),
            xi_cv=block.W3.T.copy(),
            L_s=block.activation_s,
            L_c=block.activation_c,
            **asym,
            **kwargs,
        )

    def to_block(self, **kwargs) -> MixerBlock:
        """Parallel block with the same couplings (``step=1``, ``decay=0`` unless overridden)."""
        if not isinstance(self.L_v, lg.CenteredNorm):
            raise ConfigurationError("mixer blocks need the centered-norm visible Lagrangian")
        if self.symmetric:
            extra = {"mode": Mode.SYMMETRIC}
        else:
            extra = {
                "mode": Mode.ASYMMETRIC,
                "W2_tilde": np.zeros((self.N_vs, self.N_s)) if self.asym_vs is None else self.asym_vs,
                "W4_tilde": (np.zeros((self.N_vc, self.N_c)) if self.asym_vc is None else self.asym_vc).T,
            }
        return MixerBlock(
            W1=self.xi_sv.copy(),
            W3=self.xi_cv.T.copy(),
            activation_s=self.L_s,
            activation_c=self.L_c,
            eps=self.L_v.eps,
            **extra,
            **kwargs,
        )

    # -- state plumbing ----------------------------------------------------
    def zero_state(self) -> HierState:
        return HierState(
            np.zeros((self.N_s, self.N_vc)), np.zeros((self.N_vs, self.N_vc)), np.zeros((self.N_vs, self.N_c))
        )

    def pack(self, state: HierState) -> np.ndarray:
        xs, xv, xc = state
        return np.concatenate(
            [
                _shape_check(xs, (self.N_s, self.N_vc), "xs").ravel(),
                _shape_check(xv, (self.N_vs, self.N_vc), "xv").ravel(),
                _shape_check(xc, (self.N_vs, self.N_c), "xc").ravel(),
            ]
        )

    def unpack(self, vec) -> HierState:
        a = self.N_s * self.N_vc
        b = a + self.N_vs * self.N_vc
        return HierState(
            vec[:a].reshape(self.N_s, self.N_vc).copy(),
            vec[a:b].reshape(self.N_vs, self.N_vc).copy(),
            vec[b:].reshape(self.N_vs, self.N_c).copy(),
        )

    def velocity(self, vec) -> np.ndarray:
        xs, xv, xc = self.unpack(vec)
        gv = self.L_v.activation(xv)
        dxs = (self.xi_sv @ gv - xs) / self.tau_s
        dxc = (gv @ self.xi_cv.T - xc) / self.tau_c
        drive = self.xi_vs @ self.L_s.activation(xs) + self.L_c.activation(xc) @ self.xi_vc.T
        dxv = (drive - self.decay * xv) / self.tau_v
        return np.concatenate([dxs.ravel(), dxv.ravel(), dxc.ravel()])

    def energy_vec(self, vec) -> float:
        return energy_three_layer(self, self.unpack(vec))


def _rms(a) -> float:
    return float(np.sqrt(np.mean(np.square(a))))


def energy_three_layer(net: HierarchicalNet, state: HierState) -> float:
    """Energy with interaction terms split symmetrically between both directions.

    Reduces to the canonical hierarchical energy when no symmetry-breaking
    terms are present.
    """
    xs, xv, xc = (np.asarray(a, dtype=np.float64) for a in state)
    net.pack(HierState(xs, xv, xc))  # shape validation
    gs, gv, gc = net.L_s.activation(xs), net.L_v.activation(xv), net.L_c.activation(xc)
    e = _xg_minus_l(net.L_s, xs) + _xg_minus_l(net.L_v, xv) + _xg_minus_l(net.L_c, xc)
    # s <-> v
    e -= 0.5 * (np.sum(gv * (net.xi_vs @ gs)) + np.sum(gs * (net.xi_sv @ gv)))
    # c <-> v
    e -= 0.5 * (np.sum(gc * (gv @ net.xi_cv.T)) + np.sum(gv * (gc @ net.xi_vc.T)))
    return float(e)


def energy_metaformer(net: HierarchicalNet, state: HierState) -> float:
    """Closed-form energy for ReLU hidden layers and a centered-norm visible layer."""
    if not (
        isinstance(net.L_s, lg.ReLUSquared)
        and isinstance(net.L_c, lg.ReLUSquared)
        and isinstance(net.L_v, lg.CenteredNorm)
    ):
        raise ConfigurationError("energy_metaformer needs ReLU hidden layers and a centered-norm visible layer")
    xs, xv, xc = (np.asarray(a, dtype=np.float64) for a in state)
    net.pack(HierState(xs, xv, xc))
    n = net.L_v.activation(xv)
    c = xv - xv.mean()
    e = float(np.sum(xv * n)) - float(np.sqrt(np.sum(c * c) + net.L_v.eps))
    for x in (xs, xc):
        r = np.maximum(x, 0.0)
        e += float(np.sum(x * r) - 0.5 * np.sum(r * r))
    e -= float(np.sum(n * (net.xi_vs @ np.maximum(xs, 0.0))))
    e -= float(np.sum(np.maximum(xc, 0.0) * (n @ net.xi_cv.T)))
    return e


def adiabatic_fixed_point(net: HierarchicalNet, xv) -> tuple[np.ndarray, np.ndarray]:
    """Hidden states that the fast layers relax to when ``x_v`` is frozen."""
    xv = _shape_check(xv, (net.N_vs, net.N_vc), "xv")
    n = net.L_v.activation(xv)
    return net.xi_sv @ n, n @ net.xi_cv.T


@dataclass(eq=False)
class VisibleFlow:
    """Visible-only dynamics with both hidden layers slaved to their fixed points.

    ``tau_v dx/dt = xi_vs g_s(xi_sv n) + g_c(n xi_cv^T) xi_vc^T - decay * x``,
    ``n = LN(x)``. Its energy is the block pseudo energy.
    """

    net: HierarchicalNet

    def __post_init__(self):
        self._block = self.net.to_block()

    @property
    def block(self) -> MixerBlock:
        return self._block

    def pack(self, xv) -> np.ndarray:
        return _shape_check(xv, (self.net.N_vs, self.net.N_vc), "xv").ravel().copy()

    def unpack(self, vec) -> np.ndarray:
        return vec.reshape(self.net.N_vs, self.net.N_vc).copy()

    def velocity(self, vec) -> np.ndarray:
        net = self.net
        xv = vec.reshape(net.N_vs, net.N_vc)
        xs, xc = adiabatic_fixed_point(net, xv)
        drive = net.xi_vs @ net.L_s.activation(xs) + net.L_c.activation(xc) @ net.xi_vc.T
        return ((drive - net.decay * xv) / net.tau_v).ravel()

    def energy_vec(self, vec) -> float:
        return block_energy(vec.reshape(self.net.N_vs, self.net.N_vc), self._block)


# ---------------------------------------------------------------------------
# integration
# ---------------------------------------------------------------------------

@dataclass
class EnergyTrace:
    times: np.ndarray
    energies: np.ndarray
    converged: bool
    final_state: Any
    converged_step: int | None = None

    def __post_init__(self):
        if len(self.times) != len(self.energies):
            raise ValueError("times and energies must have equal length")

    @property
    def increments(self) -> np.ndarray:
        return np.diff(self.energies)

    @property
    def max_energy_increase(self) -> float:
        """Largest single-step energy increase (0 when the energy never rises)."""
        if len(self.energies) < 2:
            return 0.0
        return float(max(0.0, np.max(np.diff(self.energies))))

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["t", "energy"])
            for t, e in zip(self.times, self.energies):
                w.writerow([repr(float(t)), repr(float(e))])

    def write(self, directory, meta: dict) -> None:
        """``trace.csv`` plus a ``meta.json`` sidecar."""
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        self.write_csv(directory / "trace.csv")
        meta = dict(meta)
        meta.setdefault("converged", bool(self.converged))
        meta.setdefault("max_energy_increase", self.max_energy_increase)
        (directory / "meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")


def _rk4(f, y, dt):
    k1 = f(y)
    k2 = f(y + 0.5 * dt * k1)
    k3 = f(y + 0.5 * dt * k2)
    k4 = f(y + dt * k3)
    return y + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def _euler(f, y, dt):
    return y + dt * f(y)


METHODS = {"euler": _euler, "rk4": _rk4}


def integrate(
    system,
    initial,
    dt: float = 1e-2,
    steps: int = 1000,
    method: str = "rk4",
    tol: float = CONVERGENCE_TOL,
    patience: int = CONVERGENCE_PATIENCE,
    stop_when_converged: bool = False,
    record_energy: bool = True,
) -> EnergyTrace:
    """Integrate ``system`` from ``initial`` for ``steps`` steps of size ``dt``.

    ``system`` provides ``pack``, ``unpack``, ``velocity`` and ``energy_vec``.
    Convergence is declared once the infinity norm of the per-step state
    change stays below ``tol`` for ``patience`` consecutive steps.
    """
    if not dt > 0 or not np.isfinite(dt * steps):
        raise ValueError("dt must be positive and dt * steps finite")
    if steps < 1:
        raise ValueError("steps must be positive")
    try:
        stepper = METHODS[method.lower()]
    except KeyError:
        raise ValueError(f"unknown method {method!r}; choose from {sorted(METHODS)}") from None

    y = system.pack(initial).astype(np.float64)
    energy = system.energy_vec if record_energy else (lambda _: np.nan)
    times = [0.0]
    energies = [energy(y)]
    quiet = 0
    converged_step = None
    for k in range(1, steps + 1):
        y_new = stepper(system.velocity, y, dt)
        if not np.all(np.isfinite(y_new)):
            raise DivergenceError(f"state became non-finite at step {k}", step=k)
        delta = float(np.max(np.abs(y_new - y)))
        y = y_new
        times.append(k * dt)
        energies.append(energy(y))
        quiet = quiet + 1 if delta < tol else 0
        if quiet >= patience and converged_step is None:
            converged_step = k
            if stop_when_converged:
                break
    return EnergyTrace(
        times=np.asarray(times),
        energies=np.asarray(energies),
        converged=converged_step is not None,
        final_state=system.unpack(y),
        converged_step=converged_step,
    )


def denoise(
    net: HierarchicalNet,
    noisy,
    dt: float = 0.1,
    steps: int = 10,
    method: str = "euler",
    adiabatic: bool = True,
) -> np.ndarray:
    """Relax a corrupted visible grid and return the final visible state.

    With ``adiabatic=True`` the reduced visible flow is integrated; otherwise
    the full three-layer system runs with the hidden layers starting at their
    adiabatic values.
    """
    noisy = _shape_check(noisy, (net.N_vs, net.N_vc), "noisy")
    if adiabatic:
        trace = integrate(VisibleFlow(net), noisy, dt=dt, steps=steps, method=method, record_energy=False)
        return trace.final_state
    xs, xc = adiabatic_fixed_point(net, noisy)
    trace = integrate(net, HierState(xs, noisy, xc), dt=dt, steps=steps, method=method, record_energy=False)
    return trace.final_state.xv
