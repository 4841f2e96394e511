import json

import numpy as np
import pytest

from hopmixer import lagrangians as lg
from hopmixer.blocks import Mode, MixerBlock, parallel_step
from hopmixer.dynamics import (
    EnergyTrace,
    HierarchicalNet,
    HierState,
    TwoLayerNet,
    VisibleFlow,
    adiabatic_fixed_point,
    denoise,
    energy_metaformer,
    energy_three_layer,
    energy_two_layer,
    integrate,
)
from hopmixer.errors import ConfigurationError, DimensionError, DivergenceError
from hopmixer.numerics import make_rng


def _random_state(net, rng, scale=1.0):
    z = net.zero_state()
    return HierState(*(scale * rng.standard_normal(a.shape) for a in z))


def _three_layer_oracle(net, state):
    """Term-by-term canonical energy with explicit index loops over the couplings."""
    xs, xv, xc = state
    gs, gv, gc = net.L_s.activation(xs), net.L_v.activation(xv), net.L_c.activation(xc)
    e = 0.0
    for x, g, lag in ((xs, gs, net.L_s), (xv, gv, net.L_v), (xc, gc, net.L_c)):
        e += float(np.sum(x * g)) - lag.value(x)
    for a in range(net.N_s):
        for i in range(net.N_vs):
            for J in range(net.N_vc):
                e -= gs[a, J] * net.xi_sv[a, i] * gv[i, J]
    for b in range(net.N_c):
        for i in range(net.N_vs):
            for J in range(net.N_vc):
                e -= gc[i, b] * net.xi_cv[b, J] * gv[i, J]
    return e


# -- two-layer ----------------------------------------------------------------

def test_two_layer_zero():
    net = TwoLayerNet(np.zeros((3, 2)), L_v=lg.ReLUSquared(), L_h=lg.ReLUSquared())
    assert energy_two_layer(net, np.zeros(2), np.zeros(3)) == 0.0


def test_two_layer_relu_identity(rng):
    net = TwoLayerNet(np.zeros((3, 4)), L_v=lg.ReLUSquared(), L_h=lg.ReLUSquared())
    v, h = rng.standard_normal(4), rng.standard_normal(3)
    want = 0.5 * np.sum(np.maximum(v, 0) ** 2) + 0.5 * np.sum(np.maximum(h, 0) ** 2)
    assert energy_two_layer(net, v, h) == pytest.approx(want, abs=1e-14)


def test_two_layer_term_sum(rng):
    net = TwoLayerNet.random(rng, 5, 7)
    v, h = rng.standard_normal(5), rng.standard_normal(7)
    g, f = net.L_v.activation(v), net.L_h.activation(h)
    want = v @ g - net.L_v.value(v) + h @ f - net.L_h.value(h)
    for mu in range(7):
        for i in range(5):
            want -= f[mu] * net.xi[mu, i] * g[i]
    assert abs(energy_two_layer(net, v, h) - want) < 1e-10


def test_two_layer_shape_errors(rng):
    net = TwoLayerNet.random(rng, 3, 4)
    with pytest.raises(DimensionError):
        energy_two_layer(net, np.zeros(4), np.zeros(4))
    with pytest.raises(DimensionError):
        TwoLayerNet(np.zeros(3))
    with pytest.raises(ValueError):
        TwoLayerNet(np.zeros((2, 2)), tau_v=0)


# -- three-layer --------------------------------------------------------------

@pytest.mark.parametrize("eps", [1e-6, 1e-3])
def test_three_layer_zero(eps):
    # the regularizer leaves -sqrt(eps) from the visible Lagrangian at the origin
    net = HierarchicalNet(np.zeros((3, 2)), np.zeros((4, 5)), L_v=lg.CenteredNorm(eps))
    assert energy_three_layer(net, net.zero_state()) == pytest.approx(-np.sqrt(eps), abs=1e-15)
    assert energy_metaformer(net, net.zero_state()) == pytest.approx(-np.sqrt(eps), abs=1e-15)


def test_three_layer_matches_oracle(rng):
    for L in (lg.ReLUSquared(), lg.GELUPrimitive()):
        net = HierarchicalNet.random(rng, 3, 4, 5, 6, L_s=L, L_c=L)
        st = _random_state(net, rng)
        assert abs(energy_three_layer(net, st) - _three_layer_oracle(net, st)) < 1e-10


def test_zero_asym_same_as_absent(rng):
    net = HierarchicalNet.random(rng, 3, 4, 5, 6)
    z = HierarchicalNet(net.xi_sv, net.xi_cv, np.zeros((3, 5)), np.zeros((4, 6)))
    st = _random_state(net, rng)
    assert abs(energy_three_layer(net, st) - energy_three_layer(z, st)) < 1e-12
    assert net.symmetric and not z.symmetric


def test_metaformer_agrees(rng):
    net = HierarchicalNet.random(rng, 3, 4, 5, 6)
    for _ in range(50):
        st = _random_state(net, rng, 2.0)
        assert abs(energy_metaformer(net, st) - energy_three_layer(net, st)) < 1e-10


def test_metaformer_rejects_gelu(rng):
    net = HierarchicalNet.random(rng, 2, 2, 2, 2, L_s=lg.GELUPrimitive())
    with pytest.raises(ConfigurationError):
        energy_metaformer(net, net.zero_state())


def test_visible_term_cancels_at_zero_eps(rng):
    lag = lg.CenteredNorm(eps=0)
    for _ in range(10):
        x = rng.standard_normal((3, 4))
        assert abs(np.sum(x * lag.activation(x)) - lag.value(x)) < 1e-12


def test_asym_shape_checked(rng):
    with pytest.raises(DimensionError):
        HierarchicalNet(np.zeros((3, 2)), np.zeros((4, 5)), asym_vs=np.zeros((3, 2)))


def test_block_roundtrip(rng):
    net = HierarchicalNet.random(rng, 3, 4, 5, 6, asym_scale=0.2)
    back = HierarchicalNet.from_block(net.to_block())
    for name in ("xi_sv", "xi_cv", "asym_vs", "asym_vc"):
        assert np.max(np.abs(getattr(net, name) - getattr(back, name))) < 1e-14


def test_from_block_rejects_bias(rng):
    b = MixerBlock.init(rng, 3, 4, bias=True)
    with pytest.raises(ConfigurationError):
        HierarchicalNet.from_block(b)


# -- integration --------------------------------------------------------------

@pytest.mark.parametrize("method", ["euler", "rk4"])
def test_zero_state_is_stationary(method):
    net = HierarchicalNet(np.zeros((3, 2)), np.zeros((4, 5)))
    tr = integrate(net, net.zero_state(), dt=0.1, steps=20, method=method)
    assert tr.converged
    assert np.array_equal(net.pack(tr.final_state), np.zeros(net.pack(net.zero_state()).size))


def test_euler_and_rk4_agree(rng):
    net = HierarchicalNet.random(rng, 3, 2, 4, 4, scale=0.5)
    st = _random_state(net, rng)
    a = integrate(net, st, dt=1e-3, steps=3000, method="euler", record_energy=False)
    b = integrate(net, st, dt=1e-2, steps=300, method="rk4", record_energy=False)
    assert np.max(np.abs(net.pack(a.final_state) - net.pack(b.final_state))) < 1e-3


@pytest.mark.parametrize("seed", range(5))
def test_descent_short(seed):
    rng = make_rng(seed)
    for system in (TwoLayerNet.random(rng, 6, 10, scale=2.0), HierarchicalNet.random(rng, 3, 2, 5, 4)):
        init = (rng.standard_normal(6), np.zeros(10)) if isinstance(system, TwoLayerNet) else _random_state(system, rng)
        tr = integrate(system, init, dt=1e-3, steps=2000, method="euler")
        assert np.max(np.diff(tr.energies)) <= 1e-8


@pytest.mark.parametrize("decay", [0.0, 1.0, 3.0])
def test_descent_for_any_decay(decay):
    # the zero mode of the visible Hessian makes the decay term energy-neutral
    rng = make_rng(7)
    net = HierarchicalNet.random(rng, 3, 2, 5, 4, L_v=lg.CenteredNorm(eps=0.0), decay=decay)
    tr = integrate(net, _random_state(net, rng), dt=1e-3, steps=2000, method="euler")
    assert np.max(np.diff(tr.energies)) <= 1e-8
    xv = tr.final_state.xv
    assert np.linalg.norm(net.L_v.hessian(xv) @ (xv - xv.mean()).ravel()) < 1e-8


def test_divergence_reports_step():
    net = TwoLayerNet(np.zeros((1, 2)), L_v=lg.ReLUSquared(), L_h=lg.ReLUSquared(), decay=-1e3)
    with pytest.raises(DivergenceError) as info, np.errstate(over="ignore", invalid="ignore"):
        integrate(net, (np.ones(2), np.zeros(1)), dt=1.0, steps=500, method="euler")
    assert info.value.step is not None and info.value.step > 1


@pytest.mark.parametrize("bad", [{"dt": 0.0}, {"steps": 0}, {"method": "leapfrog"}])
def test_integrate_bad_args(bad):
    net = TwoLayerNet(np.zeros((1, 2)))
    kw = {"dt": 0.1, "steps": 2, "method": "rk4"} | bad
    with pytest.raises(ValueError):
        integrate(net, (np.ones(2), np.zeros(1)), **kw)


def test_trace_export(tmp_path, rng):
    net = TwoLayerNet.random(rng, 3, 4)
    tr = integrate(net, (rng.standard_normal(3), np.zeros(4)), dt=0.1, steps=5)
    tr.write(tmp_path, {"seed": 1})
    lines = (tmp_path / "trace.csv").read_text().splitlines()
    assert lines[0] == "t,energy" and len(lines) == 7
    meta = json.loads((tmp_path / "meta.json").read_text())
    assert meta["seed"] == 1 and "max_energy_increase" in meta and "converged" in meta
    assert np.all(np.diff(tr.times) > 0)
    with pytest.raises(ValueError):
        EnergyTrace(np.zeros(2), np.zeros(3), False, None)


# -- adiabatic reduction ------------------------------------------------------

def test_fixed_point_trivial_cases(rng):
    net = HierarchicalNet.random(rng, 3, 2, 4, 5)
    xs, xc = adiabatic_fixed_point(net, np.full((3, 2), 0.7))
    assert np.max(np.abs(xs)) < 1e-12 and np.max(np.abs(xc)) < 1e-12
    zero = HierarchicalNet(np.zeros((4, 3)), np.zeros((5, 2)))
    xs, xc = adiabatic_fixed_point(zero, rng.standard_normal((3, 2)))
    assert not xs.any() and not xc.any()


def test_fixed_point_matches_fast_relaxation(rng):
    net = HierarchicalNet.random(rng, 3, 2, 4, 5, tau_v=1e12)
    xv = rng.standard_normal((3, 2))
    z = net.zero_state()
    tr = integrate(net, HierState(z.xs, xv, z.xc), dt=1e-2, steps=3000, record_energy=False)
    xs, xc = adiabatic_fixed_point(net, xv)
    assert np.max(np.abs(tr.final_state.xs - xs)) < 1e-6
    assert np.max(np.abs(tr.final_state.xc - xc)) < 1e-6


def test_fast_layers_track_fixed_point():
    rng = make_rng(3)
    net = HierarchicalNet.random(rng, 3, 2, 4, 4, scale=0.5, tau_s=1e-3, tau_c=1e-3)
    system_states = []
    y = net.zero_state()._replace(xv=rng.standard_normal((3, 2)))
    tr = integrate(net, y, dt=2e-4, steps=1500, record_energy=False)
    system_states.append(tr.final_state)
    xs, xc = adiabatic_fixed_point(net, tr.final_state.xv)
    assert np.max(np.abs(tr.final_state.xs - xs)) < 1e-3
    assert np.max(np.abs(tr.final_state.xc - xc)) < 1e-3


def test_visible_flow_euler_is_parallel_step(rng):
    net = HierarchicalNet.random(rng, 3, 4, 5, 6, asym_scale=0.3, L_v=lg.CenteredNorm(1e-6))
    x = rng.standard_normal((3, 4))
    dt = 0.05
    block = net.to_block(step=dt, decay=1.0)
    tr = integrate(VisibleFlow(net), x, dt=dt, steps=1, method="euler", record_energy=False)
    assert np.max(np.abs(tr.final_state - parallel_step(x, block))) < 1e-14
    assert block.mode is Mode.ASYMMETRIC


# -- denoise ------------------------------------------------------------------

def test_denoise_fixed_point_stays(rng):
    net = HierarchicalNet.random(rng, 3, 2, 4, 5, scale=0.7)
    tr = integrate(VisibleFlow(net), rng.standard_normal((3, 2)), dt=0.05, steps=4000, tol=1e-12,
                   stop_when_converged=True, record_energy=False)
    assert tr.converged
    out = denoise(net, tr.final_state, dt=0.05, steps=50)
    assert np.max(np.abs(out - tr.final_state)) < 1e-8
    out_full = denoise(net, tr.final_state, dt=0.01, steps=50, method="rk4", adiabatic=False)
    assert np.max(np.abs(out_full - tr.final_state)) < 1e-6


def test_denoise_untrained_descends(rng):
    net = HierarchicalNet.random(rng, 4, 3, 6, 6)
    noisy = rng.standard_normal((4, 3))
    tr = integrate(VisibleFlow(net), noisy, dt=1e-3, steps=2000, method="euler")
    assert np.max(np.diff(tr.energies)) <= 1e-8
    assert np.array_equal(denoise(net, noisy, dt=1e-3, steps=2000), tr.final_state)


def test_denoise_shape_check(rng):
    net = HierarchicalNet.random(rng, 3, 2, 4, 5)
    with pytest.raises(DimensionError):
        denoise(net, np.zeros((2, 3)))
